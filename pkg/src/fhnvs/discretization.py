"""Uniform Dirichlet grids, stencil Laplacian, quadrature, norms, and CG.

The computational domain is the open box (-L, L)^d, d in {1, 2, 3}.  Only
interior nodes are stored; boundary values are identically zero and enter
the stencil operators as zero ghost values.  All inner products downstream
are built from the midpoint quadrature weight h^d, which keeps every
discrete bilinear form exactly symmetric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "Grid",
    "ScalarField",
    "GridMismatchError",
    "CgBreakdownError",
    "CgConvergenceError",
    "build_grid",
    "field",
    "zeros",
    "laplacian_apply",
    "neg_laplacian_values",
    "integrate",
    "Norms",
    "norms",
    "cg_solve",
    "cg_solve_values",
    "random_smooth_field",
    "save_field_csv",
    "load_field_csv",
    "save_field_vtk",
]


class GridMismatchError(ValueError):
    """Field used with an operator or peer living on a different grid."""


class CgBreakdownError(RuntimeError):
    """Non-positive curvature encountered: the operator is not SPD."""


class CgConvergenceError(RuntimeError):
    """CG failed to reach the requested residual within maxiter."""

    def __init__(self, message: str, relative_residual: float):
        super().__init__(message)
        self.relative_residual = relative_residual


@dataclass(frozen=True)
class Grid:
    """Uniform interior grid of the box (-L, L)^dim with zero boundary data.

    Nodes sit at x_k = -L + i_k * h, i_k in {1, ..., n}, with spacing
    h = 2L / (n + 1); the midpoint quadrature weight is h^dim.
    """

    dim: int
    half_width: float
    nodes_per_axis: int

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.nodes_per_axis + 1)

    @property
    def quad_weight(self) -> float:
        return self.spacing**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.nodes_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.nodes_per_axis**self.dim

    def axis_coords(self) -> np.ndarray:
        """1-D interior node coordinates along any axis."""
        i = np.arange(1, self.nodes_per_axis + 1, dtype=np.float64)
        return -self.half_width + i * self.spacing


def build_grid(dim: int, half_width: float, nodes_per_axis: int) -> Grid:
    """Validate parameters and construct a :class:`Grid`."""
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if not (math.isfinite(half_width) and half_width > 0.0):
        raise ValueError(f"half_width must be finite and positive, got {half_width}")
    if nodes_per_axis < 3:
        raise ValueError(f"nodes_per_axis must be >= 3, got {nodes_per_axis}")
    return Grid(dim=dim, half_width=float(half_width), nodes_per_axis=int(nodes_per_axis))


@lru_cache(maxsize=64)
def node_coords(grid: Grid) -> np.ndarray:
    """All interior node coordinates, shape (size, dim), row-major order."""
    ax = grid.axis_coords()
    mesh = np.meshgrid(*([ax] * grid.dim), indexing="ij")
    out = np.stack([m.ravel() for m in mesh], axis=1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ScalarField:
    """Interior nodal values of a function on a grid; value semantics.

    The value array is flat, row-major over the axis indices, and frozen
    after construction.
    """

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        if vals.size != self.grid.size:
            raise ValueError(
                f"expected {self.grid.size} values for this grid, got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field values must all be finite")
        if vals is self.values and vals.flags.writeable:
            vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def _require_same_grid(self, other: "ScalarField") -> None:
        if self.grid != other.grid:
            raise GridMismatchError("fields live on different grids")

    def __add__(self, other: "ScalarField") -> "ScalarField":
        self._require_same_grid(other)
        return ScalarField(self.grid, self.values + other.values)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        self._require_same_grid(other)
        return ScalarField(self.grid, self.values - other.values)

    def __neg__(self) -> "ScalarField":
        return ScalarField(self.grid, -self.values)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            self._require_same_grid(other)
            return ScalarField(self.grid, self.values * other.values)
        return ScalarField(self.grid, float(other) * self.values)

    __rmul__ = __mul__

    def min(self) -> float:
        return float(self.values.min())

    def max(self) -> float:
        return float(self.values.max())


def field(grid: Grid, values) -> ScalarField:
    return ScalarField(grid, np.asarray(values, dtype=np.float64))


def zeros(grid: Grid) -> ScalarField:
    return ScalarField(grid, np.zeros(grid.size))


def neg_laplacian_values(grid: Grid, vals: np.ndarray) -> np.ndarray:
    """Apply the positive-definite stencil operator -Lap_h to a flat array.

    Second-order centered 3/5/7-point stencil with zero Dirichlet ghost
    values; the resulting matrix is a symmetric Z-matrix.
    """
    n = grid.nodes_per_axis
    u = vals.reshape(grid.shape)
    out = (2.0 * grid.dim) * u
    for ax in range(grid.dim):
        lo = [slice(None)] * grid.dim
        hi = [slice(None)] * grid.dim
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        out[tuple(lo)] -= u[tuple(hi)]
        out[tuple(hi)] -= u[tuple(lo)]
    out /= grid.spacing**2
    return out.ravel()


def laplacian_apply(grid: Grid, u: ScalarField) -> ScalarField:
    """Return -Lap_h u (positive-definite sign convention)."""
    if u.grid != grid:
        raise GridMismatchError("field does not live on the given grid")
    return ScalarField(grid, neg_laplacian_values(grid, u.values))


def integrate(grid: Grid, u: ScalarField) -> float:
    """Midpoint quadrature over the interior nodes: h^dim * sum(values)."""
    if u.grid != grid:
        raise GridMismatchError("field does not live on the given grid")
    return grid.quad_weight * float(u.values.sum())


class Norms(NamedTuple):
    l2: float
    lp: float
    h1_semi: float


def norms(grid: Grid, u: ScalarField, p: float = 2.0) -> Norms:
    """Discrete L2, Lp and H1-seminorm of a field.

    The H1 seminorm is computed through the stencil operator so that it is
    summation-by-parts consistent with the quadrature.
    """
    if u.grid != grid:
        raise GridMismatchError("field does not live on the given grid")
    if p < 1.0:
        raise ValueError(f"p must be >= 1, got {p}")
    w = grid.quad_weight
    v = u.values
    l2 = math.sqrt(w * float(v @ v))
    lp = (w * float(np.abs(v) ** p).real) ** (1.0 / p) if p != 2.0 else l2
    quad = w * float(v @ neg_laplacian_values(grid, v))
    h1 = math.sqrt(max(quad, 0.0))
    return Norms(l2=l2, lp=lp, h1_semi=h1)


def cg_solve_values(
    apply_values: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    *,
    tol: float = 1e-10,
    maxiter: int = 5000,
    diag: np.ndarray | None = None,
) -> np.ndarray:
    """Conjugate gradients on flat arrays; see :func:`cg_solve`."""
    b = np.asarray(rhs, dtype=np.float64)
    bnorm = math.sqrt(float(b @ b))
    x = np.zeros_like(b)
    if bnorm == 0.0:
        return x
    target = tol * bnorm
    r = b.copy()
    z = r / diag if diag is not None else r.copy()
    p = z.copy()
    rz = float(r @ z)
    rnorm = bnorm
    for _ in range(maxiter):
        ap = apply_values(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            raise CgBreakdownError(
                "non-positive curvature encountered: operator is not SPD"
            )
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rnorm = math.sqrt(float(r @ r))
        if rnorm <= target:
            return x
        z = r / diag if diag is not None else r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise CgConvergenceError(
        f"CG did not reach tol={tol:g} within {maxiter} iterations "
        f"(final relative residual {rnorm / bnorm:.3e})",
        relative_residual=rnorm / bnorm,
    )


def cg_solve(
    apply_op: Callable[[ScalarField], ScalarField],
    rhs: ScalarField,
    *,
    tol: float = 1e-10,
    maxiter: int = 5000,
    diag: ScalarField | None = None,
) -> ScalarField:
    """Solve apply_op(x) = rhs for an SPD operator by conjugate gradients.

    The caller guarantees that the operator is linear, symmetric and
    positive definite on the grid (certified upstream through eigenvalue
    checks).  Optional Jacobi preconditioning is enabled by passing the
    operator diagonal.  Deterministic: identical inputs produce
    bitwise-identical outputs.
    """
    grid = rhs.grid

    def apply_vals(x: np.ndarray) -> np.ndarray:
        return apply_op(ScalarField(grid, x)).values

    d = diag.values if diag is not None else None
    out = cg_solve_values(apply_vals, rhs.values, tol=tol, maxiter=maxiter, diag=d)
    return ScalarField(grid, out)


def random_smooth_field(
    grid: Grid, rng: np.random.Generator, modes: int = 3, scale: float = 1.0
) -> ScalarField:
    """Random low-frequency field built from tensor sine modes.

    Boundary-compatible (vanishes at the box boundary) and smooth on the
    grid scale; used by sampling-based diagnostics.  Deterministic given
    the generator state.
    """
    xi = (grid.axis_coords() + grid.half_width) / (2.0 * grid.half_width)
    basis = [np.sin(k * math.pi * xi) for k in range(1, modes + 1)]
    vals = np.zeros(grid.shape)
    for index in np.ndindex(*([modes] * grid.dim)):
        coeff = rng.standard_normal() / float(np.prod([k + 1 for k in index]))
        term = basis[index[0]]
        for ax in range(1, grid.dim):
            term = np.multiply.outer(term, basis[index[ax]])
        vals = vals + coeff * term
    return ScalarField(grid, scale * vals.ravel())


# -- field serialization ----------------------------------------------------

_CSV_FMT = "%.17g"


def save_field_csv(path, u: ScalarField) -> None:
    """Write a field as CSV: header x1[,x2[,x3]],value, one interior node
    per row, row-major over the axis indices."""
    grid = u.grid
    coords = node_coords(grid)
    header = ",".join(f"x{k + 1}" for k in range(grid.dim)) + ",value"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(header + "\n")
        for row, val in zip(coords, u.values):
            cells = [(_CSV_FMT % c) for c in row] + [(_CSV_FMT % val)]
            fh.write(",".join(cells) + "\n")


def load_field_csv(grid: Grid, path) -> ScalarField:
    """Read a field written by :func:`save_field_csv`; exact round-trip."""
    expected_header = ",".join(f"x{k + 1}" for k in range(grid.dim)) + ",value"
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != expected_header:
            raise ValueError(
                f"malformed field CSV: expected header {expected_header!r}, "
                f"got {header!r}"
            )
        vals = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != grid.dim + 1:
                raise ValueError(f"malformed field CSV at line {lineno}")
            try:
                vals.append(float(parts[-1]))
            except ValueError as exc:
                raise ValueError(f"non-numeric value at line {lineno}") from exc
    arr = np.asarray(vals, dtype=np.float64)
    if arr.size != grid.size:
        raise ValueError(
            f"field CSV has {arr.size} nodes, grid expects {grid.size}"
        )
    if not np.all(np.isfinite(arr)):
        raise ValueError("field CSV contains non-finite entries")
    return ScalarField(grid, arr)


def save_field_vtk(path, u: ScalarField, name: str = "value") -> None:
    """Legacy-VTK structured-points export for visualization tools."""
    grid = u.grid
    n = grid.nodes_per_axis
    dims = [n if k < grid.dim else 1 for k in range(3)]
    origin = [-grid.half_width + grid.spacing if k < grid.dim else 0.0 for k in range(3)]
    # VTK orders points x-fastest; our flat layout is row-major (last axis
    # fastest), so transpose before writing.
    vals = u.values.reshape(grid.shape).transpose(tuple(reversed(range(grid.dim)))).ravel()
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("fhnvs field export\n")
        fh.write("ASCII\n")
        fh.write("DATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}\n")
        fh.write(f"ORIGIN {origin[0]:.17g} {origin[1]:.17g} {origin[2]:.17g}\n")
        fh.write(f"SPACING {grid.spacing:.17g} {grid.spacing:.17g} {grid.spacing:.17g}\n")
        fh.write(f"POINT_DATA {grid.size}\n")
        fh.write(f"SCALARS {name} double\n")
        fh.write("LOOKUP_TABLE default\n")
        for v in vals:
            fh.write(f"{v:.17g}\n")
