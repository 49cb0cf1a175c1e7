"""Spectral certification of coefficient classes.

Computes the smallest eigenvalue lambda1 of -Lap_h + sigma on masked
subdomains, the Ls-normalized quotient nu_s, and the shifted-ball /
exterior-domain diagnostics used to judge class membership on a finite
box.  Certification is explicitly "consistent with / inconsistent with"
membership: only finite trends are reported, never verdicts about the
unbounded-domain limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .discretization import (
    CgBreakdownError,
    Grid,
    GridMismatchError,
    ScalarField,
    cg_solve_values,
    neg_laplacian_values,
    node_coords,
    random_smooth_field,
)

__all__ = [
    "CERTIFICATION_TOL",
    "DomainMask",
    "ClassReport",
    "EigenConvergenceError",
    "full_mask",
    "ball_mask",
    "box_minus_ball_mask",
    "lambda1",
    "smallest_eigenpair",
    "nu_s",
    "nu_s_with_minimizer",
    "shifted_ball_diagnostic",
    "norm_equivalence_diagnostic",
]

# Absolute tolerance for certifying "lambda1 > 0"; sits well above the
# eigensolver residual tolerance of 1e-8.
CERTIFICATION_TOL = 1e-6


class EigenConvergenceError(RuntimeError):
    """Inverse power iteration failed to reach the residual tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class DomainMask:
    """Boolean node mask; inactive nodes impose zero Dirichlet values.

    Empty masks are representable (a ball entirely outside the box); the
    eigenvalue solver rejects them while nu_s returns the +inf sentinel.
    """

    grid: Grid
    active: np.ndarray

    def __post_init__(self):
        act = np.asarray(self.active, dtype=bool).ravel()
        if act.size != self.grid.size:
            raise ValueError("mask length does not match grid size")
        act = act.copy()
        act.setflags(write=False)
        object.__setattr__(self, "active", act)

    @property
    def count(self) -> int:
        return int(self.active.sum())

    def is_empty(self) -> bool:
        return not bool(self.active.any())

    def is_subset_of(self, other: "DomainMask") -> bool:
        return bool(np.all(~self.active | other.active))


def full_mask(grid: Grid) -> DomainMask:
    return DomainMask(grid, np.ones(grid.size, dtype=bool))


def ball_mask(grid: Grid, center, radius: float) -> DomainMask:
    c = np.asarray(center, dtype=np.float64).ravel()
    if c.size != grid.dim:
        raise ValueError(f"center must have {grid.dim} components")
    coords = node_coords(grid)
    dist2 = ((coords - c) ** 2).sum(axis=1)
    return DomainMask(grid, dist2 < radius**2)


def box_minus_ball_mask(grid: Grid, radius: float) -> DomainMask:
    coords = node_coords(grid)
    dist2 = (coords**2).sum(axis=1)
    return DomainMask(grid, dist2 > radius**2)


def _masked_operator(
    grid: Grid, sigma_vals: np.ndarray, mask: DomainMask
) -> tuple[Callable[[np.ndarray], np.ndarray], np.ndarray]:
    """Restriction of -Lap_h + diag(sigma) to the active nodes."""
    idx = np.flatnonzero(mask.active)
    sig = sigma_vals[idx]
    size = grid.size

    def apply_reduced(x: np.ndarray) -> np.ndarray:
        full = np.zeros(size)
        full[idx] = x
        return neg_laplacian_values(grid, full)[idx] + sig * x

    return apply_reduced, idx


def smallest_eigenpair(
    apply_reduced: Callable[[np.ndarray], np.ndarray],
    size: int,
    *,
    lower_bound: float,
    residual_tol: float = 1e-8,
    maxiter: int = 100,
    cg_tol: float = 1e-8,
    cg_maxiter: int = 100000,
    seed: int = 0,
) -> tuple[float, np.ndarray]:
    """Smallest eigenpair of a symmetric operator by shift-and-invert
    power iteration.

    ``lower_bound`` must lie at or below the whole spectrum so that the
    initial shifted operator is SPD.  The shift is then tightened to the
    current Rayleigh quotient minus its residual, which keeps the shifted
    operator SPD (some eigenvalue lies within the residual of the
    quotient).  Returns (rayleigh quotient, unit eigenvector).
    """
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(size)
    v /= math.sqrt(float(v @ v))
    av = apply_reduced(v)
    lam = float(v @ av)
    res = math.sqrt(float((av - lam * v) @ (av - lam * v)))
    safe_shift = lower_bound - 1.0
    shift = safe_shift
    for k in range(maxiter):
        if res <= residual_tol * max(1.0, abs(lam)):
            return lam, v

        def apply_shifted(x: np.ndarray, s=shift) -> np.ndarray:
            return apply_reduced(x) - s * x

        try:
            w = cg_solve_values(
                apply_shifted, v, tol=cg_tol, maxiter=cg_maxiter
            )
            safe_shift = shift
        except CgBreakdownError:
            # Shift overshot the smallest eigenvalue; back off halfway
            # toward the last safe shift and retry.
            shift = 0.5 * (shift + safe_shift)
            continue
        v = w / math.sqrt(float(w @ w))
        av = apply_reduced(v)
        lam = float(v @ av)
        res = math.sqrt(float((av - lam * v) @ (av - lam * v)))
        # Warm up with the safe shift for two sweeps before tightening.
        if k >= 1:
            shift = lam - max(res, 1e-3 * max(1.0, abs(lam)))
    raise EigenConvergenceError(
        f"inverse power iteration did not converge "
        f"(final residual {res:.3e})",
        residual=res,
    )


def lambda1(
    sigma: ScalarField,
    mask: DomainMask | None = None,
    *,
    residual_tol: float = 1e-8,
    maxiter: int = 100,
    seed: int = 0,
) -> float:
    """Smallest eigenvalue of -Lap_h + diag(sigma) on the active nodes.

    The Rayleigh quotient of the converged eigenvector matches the
    returned value by construction (the value *is* that quotient).
    """
    grid = sigma.grid
    if mask is None:
        mask = full_mask(grid)
    if mask.grid != grid:
        raise GridMismatchError("mask and sigma live on different grids")
    if mask.is_empty():
        raise ValueError("lambda1 requires at least one active node")
    apply_reduced, idx = _masked_operator(grid, sigma.values, mask)
    lb = float(sigma.values[idx].min())
    lam, _ = smallest_eigenpair(
        apply_reduced,
        idx.size,
        lower_bound=lb,
        residual_tol=residual_tol,
        maxiter=maxiter,
        seed=seed,
    )
    return lam


def _ls_norm(vals: np.ndarray, w: float, s: float) -> float:
    return (w * float(np.abs(vals) ** s)) ** (1.0 / s) if s != 2.0 else math.sqrt(
        w * float(vals @ vals)
    )


def _pgd_quotient_min(
    apply_reduced: Callable[[np.ndarray], np.ndarray],
    w: float,
    s: float,
    u0: np.ndarray,
    *,
    grad_tol: float,
    max_iter: int,
) -> tuple[float, np.ndarray, float]:
    """Projected gradient descent for the quotient N(u)/||u||_{Ls}^2.

    Works on the Ls-normalized sphere: after normalization the quotient
    equals the quadratic form N(u) = w * u.A(u).  Armijo backtracking with
    an adaptively grown step keeps the value monotone.  Returns
    (value, minimizer on the sphere, final tangent-gradient norm).
    """

    def ls_norm(vals: np.ndarray) -> float:
        return (w * float((np.abs(vals) ** s).sum())) ** (1.0 / s)

    u = u0 / ls_norm(u0)
    au = apply_reduced(u)
    val = w * float(u @ au)
    tau = 1.0
    gnorm = math.inf
    for _ in range(max_iter):
        # Gradient of the quotient on the constraint sphere.
        m = np.abs(u) ** (s - 1.0) * np.sign(u) if s != 2.0 else u
        g = 2.0 * w * (au - val * m)
        gnorm = math.sqrt(float(g @ g))
        if gnorm <= grad_tol * max(1.0, abs(val)):
            break
        accepted = False
        for _ in range(50):
            trial = u - tau * g
            nrm = ls_norm(trial)
            if nrm == 0.0:
                tau *= 0.5
                continue
            trial = trial / nrm
            a_trial = apply_reduced(trial)
            val_trial = w * float(trial @ a_trial)
            if val_trial <= val - 1e-4 * tau * gnorm**2:
                u, au, val = trial, a_trial, val_trial
                tau = min(tau * 1.3, 1e6)
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            break
    return val, u, gnorm


def nu_s_with_minimizer(
    sigma: ScalarField,
    mask: DomainMask,
    s: float,
    *,
    restarts: int = 6,
    max_iter: int = 20000,
    grad_tol: float = 1e-7,
    seed: int = 0,
) -> tuple[float, ScalarField | None]:
    """Infimum of the sigma-weighted Dirichlet quotient with Ls
    normalization over fields supported on the mask.

    Non-convex for s > 2: multiple seeded random restarts are run and the
    best value is taken, with the reduction ordered by restart index for
    determinism.  For s = 2 the value must agree with :func:`lambda1` on
    the same mask (cross-checked in the test suite).  Empty mask returns
    the +inf sentinel.
    """
    grid = sigma.grid
    if mask.grid != grid:
        raise GridMismatchError("mask and sigma live on different grids")
    if mask.is_empty():
        return math.inf, None
    if s < 2.0:
        raise ValueError(f"s must be >= 2, got {s}")
    if grid.dim == 3 and s >= 6.0:
        raise ValueError("s must lie in [2, 6) for dim 3")
    apply_reduced, idx = _masked_operator(grid, sigma.values, mask)
    w = grid.quad_weight
    best_val = math.inf
    best_u: np.ndarray | None = None
    for restart in range(restarts):
        rng = np.random.default_rng([seed, restart])
        u0 = np.zeros(idx.size)
        # Re-draw degenerate (all-zero on the mask) starts.
        while not np.any(u0):
            u0 = random_smooth_field(grid, rng, modes=3).values[idx]
            if idx.size <= 4:
                u0 = rng.standard_normal(idx.size)
        val, u, _ = _pgd_quotient_min(
            apply_reduced, w, s, u0, grad_tol=grad_tol, max_iter=max_iter
        )
        if val < best_val:
            best_val = val
            best_u = u
    full = np.zeros(grid.size)
    full[idx] = best_u
    return best_val, ScalarField(grid, full)


def nu_s(
    sigma: ScalarField,
    mask: DomainMask,
    s: float,
    *,
    restarts: int = 6,
    max_iter: int = 20000,
    grad_tol: float = 1e-7,
    seed: int = 0,
) -> float:
    val, _ = nu_s_with_minimizer(
        sigma,
        mask,
        s,
        restarts=restarts,
        max_iter=max_iter,
        grad_tol=grad_tol,
        seed=seed,
    )
    return val


def quotient_value(sigma: ScalarField, mask: DomainMask, s: float, u: ScalarField) -> float:
    """Evaluate the nu_s quotient at a given field (diagnostic)."""
    grid = sigma.grid
    vals = np.where(mask.active, u.values, 0.0)
    w = grid.quad_weight
    num = w * float(vals @ (neg_laplacian_values(grid, vals) + sigma.values * vals))
    den = _ls_norm(vals[mask.active].copy(), w, s) ** 2 if s != 2.0 else w * float(
        vals @ vals
    )
    if s != 2.0:
        den = (w * float((np.abs(vals) ** s).sum())) ** (2.0 / s)
    return num / den


@dataclass
class ClassReport:
    """Finite diagnostics for coefficient-class membership."""

    lambda1: float
    lambda1_positive: bool
    s: float
    nu_values: list[tuple[float, float]] = dc_field(default_factory=list)
    nu_trend_increasing: bool = False
    exterior_values: list[tuple[float, float]] = dc_field(default_factory=list)
    exterior_trend_increasing: bool = False


def _nondecreasing(values: list[float]) -> bool:
    finite = [v for v in values if math.isfinite(v)]
    slack = 1e-9 * max([1.0] + [abs(v) for v in finite])
    ok = True
    prev = -math.inf
    for v in values:
        if v < prev - slack:
            ok = False
        prev = v
    return ok


def shifted_ball_diagnostic(
    sigma: ScalarField,
    radius: float,
    centers,
    *,
    s: float = 2.0,
    ladder=(),
    restarts: int = 6,
    seed: int = 0,
) -> ClassReport:
    """nu_s on balls marching toward the box edge plus an exterior-domain
    radius ladder; records values and monotone-trend flags.

    A ball entirely outside the grid yields the +inf sentinel.  Trends are
    reported, not verdicts: a finite box cannot decide the limit.
    """
    grid = sigma.grid
    lam = lambda1(sigma, full_mask(grid), seed=seed)
    report = ClassReport(
        lambda1=lam, lambda1_positive=lam > CERTIFICATION_TOL, s=s
    )
    for k, center in enumerate(centers):
        c = np.asarray(center, dtype=np.float64).ravel()
        mask = ball_mask(grid, c, radius)
        val = nu_s(sigma, mask, s, restarts=restarts, seed=seed + 1000 + k)
        label = float(np.linalg.norm(c))
        report.nu_values.append((label, val))
    report.nu_trend_increasing = _nondecreasing([v for _, v in report.nu_values])
    for k, rho in enumerate(ladder):
        mask = box_minus_ball_mask(grid, float(rho))
        val = (
            math.inf
            if mask.is_empty()
            else nu_s(sigma, mask, s, restarts=restarts, seed=seed + 2000 + k)
        )
        report.exterior_values.append((float(rho), val))
    report.exterior_trend_increasing = _nondecreasing(
        [v for _, v in report.exterior_values]
    )
    return report


def norm_equivalence_diagnostic(
    a: ScalarField, b: ScalarField, trials: int, seed: int = 0
) -> dict:
    """Extremes of ||u||_{a+}/||u||_{b+} over random smooth fields.

    The positive-part norms ||u||_{sigma+}^2 = int |grad u|^2 + sigma_+ u^2
    generate the topology used by downstream certifications; on a finite
    grid only the sampled ratio envelope is reported.
    """
    if a.grid != b.grid:
        raise GridMismatchError("coefficient fields live on different grids")
    grid = a.grid
    ap = np.maximum(a.values, 0.0)
    bp = np.maximum(b.values, 0.0)
    w = grid.quad_weight
    lo, hi = math.inf, -math.inf
    rng = np.random.default_rng(seed)
    done = 0
    while done < trials:
        u = random_smooth_field(grid, rng, modes=4).values
        grad2 = float(u @ neg_laplacian_values(grid, u))
        na = w * (grad2 + float(ap @ (u * u)))
        nb = w * (grad2 + float(bp @ (u * u)))
        if na <= 0.0 or nb <= 0.0:
            continue  # degenerate draw, re-draw
        ratio = math.sqrt(na / nb)
        lo = min(lo, ratio)
        hi = max(hi, ratio)
        done += 1
    return {"min_ratio": lo, "max_ratio": hi, "trials": trials}
