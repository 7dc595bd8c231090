"""Independent numerical reference solvers.

A Crank-Nicolson finite-difference solver for the discount-weighted
backward equation (and its adjoint forward evolution for densities), and
an Euler-Maruyama Monte Carlo simulator with a counter-based generator.
Both are deliberately built from nothing but the model curves, so they
validate the semi-analytical pipeline end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import solve_banded

from .errors import NumericalError, ValidationError
from .model import RateMap, ShortRateModelSpec, knot_partition, state_moments

__all__ = [
    "PdeGrid",
    "McConfig",
    "default_grid",
    "pde_zcb",
    "pde_density",
    "pde_zcb_refined",
    "mc_zcb",
]


@dataclass(frozen=True)
class PdeGrid:
    """Spatial/temporal grid for the finite-difference solvers."""

    x_min: float
    x_max: float
    n_x: int
    n_t: int
    theta_cn: float = 0.5

    def __post_init__(self):
        if self.n_x < 3 or self.n_t < 1:
            raise ValidationError("need n_x >= 3 and n_t >= 1")
        if not self.x_max > self.x_min:
            raise ValidationError("need x_min < x_max")

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_x)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.n_x - 1)


@dataclass(frozen=True)
class McConfig:
    n_paths: int
    n_steps: int
    seed: int = 0
    antithetic: bool = True

    def __post_init__(self):
        if self.n_paths < 2 or self.n_steps < 1:
            raise ValidationError("need n_paths >= 2 and n_steps >= 1")


def default_grid(
    spec: ShortRateModelSpec,
    u_a: float,
    u_b: float,
    x_a: Optional[float] = None,
    n_x: int = 1201,
    steps_per_year: float = 96.0,
    n_sd: float = 12.0,
) -> PdeGrid:
    """Grid spanning +-n_sd terminal standard deviations around the
    no-discount mean, with knot-aligned time steps."""
    x0 = spec.x0 if x_a is None else x_a
    mean, var = state_moments(spec, u_a, u_b, x0=x0)
    sd = math.sqrt(max(var, 1e-12))
    lo = min(mean, x0) - n_sd * sd
    hi = max(mean, x0) + n_sd * sd
    n_t = max(8, int(math.ceil((u_b - u_a) * steps_per_year)))
    return PdeGrid(x_min=lo, x_max=hi, n_x=n_x, n_t=n_t)


def _time_grid(spec, u_a, u_b, n_t):
    """Uniform steps within knot panels, knots hit exactly."""
    knots = knot_partition(spec, u_a, u_b)
    dt_target = (u_b - u_a) / n_t
    ts = [u_a]
    for k0, k1 in zip(knots[:-1], knots[1:]):
        n = max(1, int(math.ceil((k1 - k0) / dt_target - 1e-12)))
        ts.extend(np.linspace(k0, k1, n + 1)[1:])
    return np.array(ts)


def _operator_rows(spec, xs, dx, t):
    """Tridiagonal rows (lower, diag, upper) of the backward generator
    kappa (theta - x) d/dx + sigma^2/2 d2/dx2 - lam r(x) acting on the
    interior points, at time t."""
    kap = spec.kappa.value(t)
    th = spec.theta.value(t)
    sig2 = spec.sigma.value(t) ** 2
    xi = xs[1:-1]
    drift = kap * (th - xi)
    diffu = 0.5 * sig2 / dx**2
    adv = drift / (2.0 * dx)
    lower = diffu - adv
    upper = diffu + adv
    diag = -2.0 * diffu - spec.lam * np.asarray(spec.rate(xi))
    return lower, diag, upper


def _boundary_values(spec, xs, tau):
    """Asymptotic claim values at the spatial边 boundaries: discount at the
    frozen boundary rate over the remaining time."""
    r_lo = float(spec.rate(xs[0]))
    r_hi = float(spec.rate(xs[-1]))
    return (
        math.exp(-spec.lam * max(r_lo, -1e2) * tau),
        math.exp(-spec.lam * min(r_hi, 7.0e2 / max(tau, 1e-12)) * tau),
    )


def pde_zcb(spec: ShortRateModelSpec, u_a: float, u_b: float, grid: PdeGrid,
            x_a: Optional[float] = None) -> float:
    """Bond value at (u_a, x_a) by backward Crank-Nicolson induction from
    the unit terminal condition, knot-aligned steps, central differences
    and a banded solve per step."""
    x0 = spec.x0 if x_a is None else float(x_a)
    if not (grid.x_min < x0 < grid.x_max):
        raise ValidationError("x_a must lie inside the grid")
    xs = grid.xs
    dx = grid.dx
    n = grid.n_x
    ts = _time_grid(spec, u_a, u_b, grid.n_t)
    V = np.ones(n)
    theta = grid.theta_cn
    ab = np.zeros((3, n - 2))
    for t1, t0 in zip(ts[::-1][:-1], ts[::-1][1:]):
        dt = t1 - t0
        t_mid = 0.5 * (t0 + t1)
        lower, diag, upper = _operator_rows(spec, xs, dx, t_mid)
        # (I - theta dt L) V0 = (I + (1-theta) dt L) V1 + boundary terms
        rhs = V[1:-1] + (1.0 - theta) * dt * (
            lower * V[:-2] + diag * V[1:-1] + upper * V[2:]
        )
        b_lo0, b_hi0 = _boundary_values(spec, xs, u_b - t0)
        b_lo1, b_hi1 = _boundary_values(spec, xs, u_b - t1)
        rhs[0] += (1.0 - theta) * dt * lower[0] * (b_lo1 - V[0])
        rhs[-1] += (1.0 - theta) * dt * upper[-1] * (b_hi1 - V[-1])
        rhs[0] += theta * dt * lower[0] * b_lo0
        rhs[-1] += theta * dt * upper[-1] * b_hi0
        ab[0, 1:] = -theta * dt * upper[:-1]
        ab[1, :] = 1.0 - theta * dt * diag
        ab[2, :-1] = -theta * dt * lower[1:]
        V[1:-1] = solve_banded((1, 1), ab, rhs)
        V[0], V[-1] = b_lo0, b_hi0
        if not np.all(np.isfinite(V)):
            raise NumericalError("finite-difference instability (non-finite values)")
    return float(np.interp(x0, xs, V))


def pde_zcb_refined(spec, u_a, u_b, grid: PdeGrid, x_a=None, levels: int = 2):
    """Richardson-extrapolated bond value over grid doublings (the scheme
    is second order in both steps, so one doubling removes the leading
    error term)."""
    vals = []
    g = grid
    for _ in range(levels):
        vals.append(pde_zcb(spec, u_a, u_b, g, x_a=x_a))
        g = PdeGrid(g.x_min, g.x_max, 2 * g.n_x - 1, 2 * g.n_t, g.theta_cn)
    vals.append(pde_zcb(spec, u_a, u_b, g, x_a=x_a))
    out = vals[-1] + (vals[-1] - vals[-2]) / 3.0
    return out, vals


def pde_density(spec: ShortRateModelSpec, u_a: float, u_b: float, grid: PdeGrid,
                x_a: float, rannacher_steps: int = 2) -> np.ndarray:
    """Forward (adjoint) evolution of a discrete delta at x_a; returns the
    terminal profile on grid.xs.  The forward matrix is the transpose of
    the backward generator, so summed against terminal claims it matches
    the backward solver to solver precision."""
    xs = grid.xs
    dx = grid.dx
    n = grid.n_x
    if not (grid.x_min < x_a < grid.x_max):
        raise ValidationError("x_a must lie inside the grid")
    ts = _time_grid(spec, u_a, u_b, grid.n_t)
    psi = np.zeros(n)
    j = int((x_a - grid.x_min) // dx)
    frac = (x_a - xs[j]) / dx
    psi[j] = (1.0 - frac) / dx
    psi[j + 1] = frac / dx
    theta = grid.theta_cn
    ab = np.zeros((3, n - 2))
    for step, (t0, t1) in enumerate(zip(ts[:-1], ts[1:])):
        dt = t1 - t0
        t_mid = 0.5 * (t0 + t1)
        th_eff = 1.0 if step < rannacher_steps else theta
        lower, diag, upper = _operator_rows(spec, xs, dx, t_mid)
        # Transpose of the interior tridiagonal block: sub/super swap.
        inner = psi[1:-1]
        rhs = inner + (1.0 - th_eff) * dt * (
            np.concatenate([[0.0], upper[:-1] * inner[:-1]])
            + diag * inner
            + np.concatenate([lower[1:] * inner[1:], [0.0]])
        )
        ab[0, 1:] = -th_eff * dt * lower[1:]
        ab[1, :] = 1.0 - th_eff * dt * diag
        ab[2, :-1] = -th_eff * dt * upper[:-1]
        psi[1:-1] = solve_banded((1, 1), ab, rhs)
        psi[0] = psi[-1] = 0.0
        if not np.all(np.isfinite(psi)):
            raise NumericalError("finite-difference instability (non-finite values)")
    return psi


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

_BATCH = 1 << 16


def mc_zcb(spec: ShortRateModelSpec, u_a: float, u_b: float, config: McConfig,
           x_a: Optional[float] = None) -> tuple[float, float]:
    """Euler-Maruyama estimate of the discounted unit payoff with a
    trapezoidal discount accumulator.

    Normals come from a counter-based generator keyed by (seed, batch
    index) over a fixed internal batch size, so the estimate is bitwise
    reproducible for fixed (seed, n_paths, n_steps) regardless of
    evaluation order.  With antithetic sampling the standard error is
    computed on pair averages.
    """
    x0 = spec.x0 if x_a is None else float(x_a)
    ts = _time_grid(spec, u_a, u_b, config.n_steps)
    dts = np.diff(ts)
    kap = spec.kappa.value(ts)
    th = spec.theta.value(ts)
    sig = spec.sigma.value(ts)
    lam = spec.lam

    n_draw = config.n_paths // 2 if config.antithetic else config.n_paths
    if config.antithetic and config.n_paths % 2:
        raise ValidationError("antithetic sampling needs an even path count")
    sums = 0.0
    sums2 = 0.0
    count = 0
    for b_idx, lo in enumerate(range(0, n_draw, _BATCH)):
        nb = min(_BATCH, n_draw - lo)
        rng = np.random.Generator(np.random.Philox(key=[config.seed, b_idx]))
        Z = rng.standard_normal((nb, len(dts)))
        X = np.full(nb, x0)
        Xa = np.full(nb, x0) if config.antithetic else None
        disc = np.zeros(nb)
        disc_a = np.zeros(nb) if config.antithetic else None
        r_prev = np.asarray(spec.rate(X)).copy()
        ra_prev = r_prev.copy() if config.antithetic else None
        for k, dt in enumerate(dts):
            drift = kap[k] * (th[k] - X) * dt
            vol = sig[k] * math.sqrt(dt)
            X = X + drift + vol * Z[:, k]
            r_new = np.asarray(spec.rate(X))
            disc += 0.5 * (r_prev + r_new) * dt
            r_prev = r_new
            if config.antithetic:
                drift_a = kap[k] * (th[k] - Xa) * dt
                Xa = Xa + drift_a - vol * Z[:, k]
                ra_new = np.asarray(spec.rate(Xa))
                disc_a += 0.5 * (ra_prev + ra_new) * dt
                ra_prev = ra_new
        payoff = np.exp(-lam * disc)
        if config.antithetic:
            payoff = 0.5 * (payoff + np.exp(-lam * disc_a))
        sums += float(payoff.sum())
        sums2 += float((payoff**2).sum())
        count += nb
    mean = sums / count
    var = max(sums2 / count - mean**2, 0.0)
    std_err = math.sqrt(var / count)
    return mean, std_err
