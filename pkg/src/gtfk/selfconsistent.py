"""Self-consistent harmonic approximation with time-dependent parameters.

Paths are classified by their time average; for each average point the
potential is replaced by the quadratic trial form whose Gaussian-smeared
value and first two derivatives match those of the true potential.  The
smearing variance alpha and centre shift delta_gamma follow from two
action-curvature constants (C, D) of the trial kernel, which themselves
depend on alpha and delta_gamma through the trial parameters: a scalar
fixed point per average point, solved by damped iteration with warm
starts (and a secant-style rescue if the plain iteration stalls).

For quadratic potentials (the linear-rate model, or any model with the
discount weight switched off) the map is constant and the approximation
is exact; those paths converge in a single pass and share one phase-ODE
solution across all average points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .kernels import (
    EndpointData,
    FhoParams,
    KernelIntegrals,
    endpoint_data,
    fho_density_matrix,
    kernel_integrals,
    kernel_sweep,
    solve_fho_phase,
)
from .model import QuadraticCoeffs, RateMap, ShortRateModelSpec, hamiltonian_coeffs, knot_partition
from .ode import NuSolution, OdeSystemSpec, solve_pinney_system
from .quadrature import adaptive_gauss_kronrod

__all__ = [
    "SelfConsistentState",
    "TrialPotentialParams",
    "TrialBundle",
    "gaussian_smeared",
    "bk_trial_params",
    "cd_constants",
    "self_consistent_solve",
    "self_consistent_batch",
    "reduced_density_matrix",
    "reduced_density_values",
    "diagonal_reduced_density",
    "quadratic_exactness_check",
]


@dataclass
class SelfConsistentState:
    """Converged (or abandoned) fixed point at one average point."""

    x_bar: float
    C: float
    D: float
    alpha: float
    delta_gamma: float
    iterations: int
    converged: bool
    residual: float


@dataclass
class TrialPotentialParams:
    """Trial potential coefficient functions at a fixed average point."""

    omega_sq_trial: Callable
    gamma_trial: Callable
    w_trial: Callable


# ---------------------------------------------------------------------------
# Gaussian smearing
# ---------------------------------------------------------------------------

_GH_NODES = 64


def gaussian_smeared(V, x_center: float, alpha: float, V1=None, V2=None):
    """Gaussian expectation (variance alpha) of a potential and its first
    two derivatives, centred at x_center.

    `V` may be a callable, or a structured closed-form spec:
    ("exp", c, k) for c*exp(k x) or ("poly", [c0, c1, ...]).  Derivative
    callables V1/V2 are used when given; otherwise derivatives of the
    smeared mean are taken (the smear of V' equals d/dc of the smear).
    """
    if alpha < 0.0:
        raise ValidationError(f"smearing variance must be >= 0, got {alpha}")

    if isinstance(V, tuple):
        kind = V[0]
        if kind == "exp":
            _, cc, k = V
            base = cc * math.exp(k * x_center + 0.5 * k * k * alpha)
            return base, k * base, k * k * base
        if kind == "poly":
            coeffs = np.asarray(V[1], dtype=float)
            d1 = np.polynomial.polynomial.polyder(coeffs)
            d2 = np.polynomial.polynomial.polyder(coeffs, 2)
            return tuple(
                _poly_gauss_mean(c, x_center, alpha) for c in (coeffs, d1, d2)
            )
        raise ValidationError(f"unknown structured potential {kind!r}")

    if alpha == 0.0:
        v1 = V1 if V1 is not None else _fd1(V, x_center)
        v2 = V2 if V2 is not None else _fd2(V, x_center)
        return (
            float(V(x_center)),
            float(v1(x_center)) if callable(v1) else float(v1),
            float(v2(x_center)) if callable(v2) else float(v2),
        )

    t, w = np.polynomial.hermite.hermgauss(_GH_NODES)
    pts = x_center + math.sqrt(2.0 * alpha) * t
    norm = 1.0 / math.sqrt(math.pi)
    mean = norm * float(np.dot(w, V(pts)))
    if V1 is not None and V2 is not None:
        return (
            mean,
            norm * float(np.dot(w, V1(pts))),
            norm * float(np.dot(w, V2(pts))),
        )
    # d/dc <<V>> = <<V'>>; second derivative likewise.
    dc = 1e-5 * max(1.0, abs(x_center), math.sqrt(alpha))
    up = norm * float(np.dot(w, V(pts + dc)))
    dn = norm * float(np.dot(w, V(pts - dc)))
    return mean, (up - dn) / (2.0 * dc), (up - 2.0 * mean + dn) / dc**2


def _poly_gauss_mean(coeffs, c, alpha):
    # E[(c + Z)^n], Z ~ N(0, alpha), via the moment recursion.
    n = len(coeffs)
    moments = np.zeros(n)
    moments[0] = 1.0
    if n > 1:
        moments[1] = c
    for k in range(2, n):
        moments[k] = c * moments[k - 1] + (k - 1) * alpha * moments[k - 2]
    return float(np.dot(coeffs, moments))


def _fd1(V, x, h=1e-6):
    return lambda c: (V(c + h) - V(c - h)) / (2.0 * h)


def _fd2(V, x, h=1e-5):
    return lambda c: (V(c + h) - 2.0 * V(c) + V(c - h)) / h**2


# ---------------------------------------------------------------------------
# Trial parameters
# ---------------------------------------------------------------------------

def bk_trial_params(
    spec: ShortRateModelSpec,
    x_bar: float,
    alpha: float,
    delta_gamma: float,
) -> TrialPotentialParams:
    """Trial potential for the exponential-rate (lognormal) model.

    The smeared-exponential forcing adds E sigma^2 to the frequency, with
    E = lam * exp(x_bar - delta_gamma + alpha/2); the force and shift pick
    up the matching terms so the smeared potential and its first two
    derivatives agree with the true ones.
    """
    if spec.rate_map is not RateMap.EXPONENTIAL:
        raise ValidationError("trial parameters of this form need the exponential rate map")
    co = hamiltonian_coeffs(spec)
    E = spec.lam * math.exp(x_bar - delta_gamma + alpha / 2.0)

    def omega_sq_trial(u):
        return co.omega_sq(u) + E / co.m(u)

    def gamma_trial(u):
        return co.m(u) * co.omega_sq(u) * x_bar + co.gamma(u) + E * (delta_gamma + 1.0)

    def w_trial(u):
        m = co.m(u)
        w2 = co.omega_sq(u)
        g = co.gamma(u)
        xc = x_bar - delta_gamma
        gbar = m * w2 * x_bar + g + E * (delta_gamma + 1.0)
        return (
            0.5 * m * w2 * xc**2 + g * xc + co.w(u)
            + E * (1.0 - alpha / 2.0)
            - 0.5 * (m * w2 + E) * delta_gamma**2
            + gbar * delta_gamma
        )

    return TrialPotentialParams(omega_sq_trial, gamma_trial, w_trial)


def quadratic_trial_params(co: QuadraticCoeffs, x_bar: float) -> TrialPotentialParams:
    """Trial parameters for a quadratic potential: exact for every
    smearing width, so alpha and delta_gamma drop out."""

    def gamma_trial(u):
        return co.m(u) * co.omega_sq(u) * x_bar + co.gamma(u)

    def w_trial(u):
        return 0.5 * co.m(u) * co.omega_sq(u) * x_bar**2 + co.gamma(u) * x_bar + co.w(u)

    return TrialPotentialParams(co.omega_sq, gamma_trial, w_trial)


# ---------------------------------------------------------------------------
# C, D and the reduced density matrix
# ---------------------------------------------------------------------------

def cd_constants(ends: EndpointData, ki: KernelIntegrals, hbar: float = 1.0):
    """Action-curvature constants of the diagonal reduced density matrix.

    In the scaled variable, mu sqrt(nu_dot) = 1/H and the boundary term
    (nu_ddot/(2 nu_dot) + mu_dot/mu) mu^2 equals P/H^2.
    """
    s = ends.sinh_dnu
    c = ends.cosh_dnu
    Ha, Hb = ends.H_a, ends.H_b
    i12 = ki.I1 + ki.I2
    mix = ki.Omega_a / Hb + ki.Omega_b / Ha
    C = (
        -0.5 * (ends.P_b / Hb**2 - ends.P_a / Ha**2)
        + ((1.0 / Hb**2 + 1.0 / Ha**2) * c - 2.0 / (Ha * Hb) + mix**2 / (2.0 * ki.Omega_ab))
        / (2.0 * s)
    ) / hbar
    D = (
        ki.Gamma_a / Hb + ki.Gamma_b / Ha - i12 * mix / (2.0 * ki.Omega_ab)
    ) / (hbar * s)
    return C, D


def reduced_density_values(
    ends: EndpointData,
    ki: KernelIntegrals,
    span: float,
    x_bars: np.ndarray,
    x_a: float,
    x_b: float,
    hbar: float = 1.0,
) -> np.ndarray:
    """Off-diagonal reduced density matrix values for a batch of average
    points sharing the endpoint/integral data layout."""
    if np.any(ki.Omega_ab <= 0.0):
        raise NumericalError("non-positive Omega_ab")
    xt_b = (x_b - x_bars) / ends.H_b
    xt_a = (x_a - x_bars) / ends.H_a
    s = ends.sinh_dnu
    c = ends.cosh_dnu
    i12 = ki.I1 + ki.I2
    expo = (
        0.5 * (ends.P_b * xt_b**2 - ends.P_a * xt_a**2) / hbar
        - (
            (xt_b**2 + xt_a**2) * c
            - 2.0 * xt_b * xt_a
            + 2.0 * xt_b * ki.Gamma_a
            + 2.0 * xt_a * ki.Gamma_b
            - 2.0 * ki.Gamma_ab
            + (xt_b * ki.Omega_a + xt_a * ki.Omega_b - i12) ** 2 / (2.0 * ki.Omega_ab)
        ) / (2.0 * hbar * s)
        - ki.w_int / hbar
    )
    pref = (span / (2.0 * math.pi * hbar)) * np.sqrt(
        1.0 / (ends.H_a * ends.H_b * 2.0 * ki.Omega_ab)
    )
    return pref * np.exp(expo)


def diagonal_reduced_density(
    ends: EndpointData,
    ki: KernelIntegrals,
    span: float,
    x_bars: np.ndarray,
    x: float,
    hbar: float = 1.0,
) -> np.ndarray:
    """Gaussian diagonal form of the reduced density matrix (x_b = x_a)."""
    C, D = cd_constants(ends, ki, hbar)
    alpha = 1.0 / (2.0 * C)
    dgam = D / (2.0 * C)
    i12 = ki.I1 + ki.I2
    lead = (span / hbar) * np.sqrt(
        alpha / (ends.H_a * ends.H_b * 4.0 * math.pi * ki.Omega_ab)
    )
    expo = (
        (ki.Gamma_ab - i12**2 / (4.0 * ki.Omega_ab)) / (hbar * ends.sinh_dnu)
        + dgam**2 / (2.0 * alpha)
        - ki.w_int / hbar
    )
    xp = x - x_bars
    gauss = np.exp(-((xp + dgam) ** 2) / (2.0 * alpha)) / np.sqrt(2.0 * math.pi * alpha)
    return lead * np.exp(expo) * gauss


# ---------------------------------------------------------------------------
# Trial bundles and the fixed point
# ---------------------------------------------------------------------------

@dataclass
class TrialBundle:
    """Everything one pass of the map produces for a batch of x_bar."""

    nu: NuSolution
    integrals: KernelIntegrals
    ends: EndpointData
    E: np.ndarray
    span: float


def _trial_bundle(
    spec: ShortRateModelSpec,
    co: QuadraticCoeffs,
    x_bars: np.ndarray,
    alphas: np.ndarray,
    dgammas: np.ndarray,
    u_a: float,
    u_b: float,
    knots: np.ndarray,
    rel_tol: float,
    abs_tol: float,
    max_step: Optional[float] = None,
) -> TrialBundle:
    """One pass: solve the phase system for the trial frequency and sweep
    the kernel integrals with the trial force and shift."""
    B = len(x_bars)
    if spec.rate_map is RateMap.EXPONENTIAL and spec.lam != 0.0:
        E = spec.lam * np.exp(x_bars - dgammas + 0.5 * alphas)
    else:
        E = np.zeros(B)

    tables = co.ode_tables()
    kappa_a = co.kappa_raw(u_a)
    sig_a = co.inv_mu(u_a)
    base = OdeSystemSpec(
        interval=(u_a, u_b),
        knots=knots,
        inv_mu=co.inv_mu,
        mu_dot_over_mu=co.mu_dot_over_mu,
        kappa=co.kappa_raw,
        kappa_eff=co.kappa_eff,
        omega_sq=co.omega_sq,
        rel_tol=rel_tol,
        abs_tol=abs_tol,
        max_step=max_step,
        tables=tables,
    )
    if np.all(E == 0.0):
        # Quadratic trial: one shared Bernoulli-gauge solve for the batch.
        h0 = (kappa_a**2 + 1e-30) ** -0.25 if kappa_a > 0 else math.sqrt(2.0 * (u_b - u_a))
        g0 = abs(kappa_a) - kappa_a
        base.forcing_scale = np.zeros(1)
        nu = solve_pinney_system(base, h0=h0, g0=g0)
    else:
        base.forcing = lambda u, _E=E: co.inv_mu(u) ** 2 * _E
        base.forcing_scale = E
        h0 = (kappa_a**2 + sig_a**2 * E) ** -0.25
        nu = solve_pinney_system(base, h0=h0, hdot0=np.zeros(B))

    def force_nodes(t):
        g = co.m(t) * co.omega_sq(t)
        out = g[:, None] * x_bars[None, :] + co.gamma(t)[:, None]
        if np.any(E != 0.0):
            out = out + (E * (dgammas + 1.0))[None, :]
        return out

    def w_nodes(t):
        m = co.m(t)[:, None]
        w2 = co.omega_sq(t)[:, None]
        g = co.gamma(t)[:, None]
        w0 = co.w(t)[:, None]
        if np.all(E == 0.0):
            return 0.5 * m * w2 * x_bars[None, :] ** 2 + g * x_bars[None, :] + w0
        xc = (x_bars - dgammas)[None, :]
        gbar = m * w2 * x_bars[None, :] + g + (E * (dgammas + 1.0))[None, :]
        return (
            0.5 * m * w2 * xc**2 + g * xc + w0
            + (E * (1.0 - 0.5 * alphas))[None, :]
            - 0.5 * (m * w2 + E[None, :]) * dgammas[None, :] ** 2
            + gbar * dgammas[None, :]
        )

    ki = kernel_sweep(nu, force_nodes, w_nodes, batch=B)
    ends = endpoint_data(nu)
    return TrialBundle(nu=nu, integrals=ki, ends=ends, E=E, span=u_b - u_a)


def self_consistent_batch(
    spec: ShortRateModelSpec,
    x_bars: np.ndarray,
    u_a: float,
    u_b: float,
    seeds=None,
    tol: float = 1e-10,
    max_iter: int = 40,
    rel_tol: float = 1e-8,
    abs_tol: float = 1e-11,
    max_step: Optional[float] = None,
):
    """Solve the (C, D) fixed point for a batch of average points.

    Returns (states, bundle) where the bundle holds the final-pass phase
    solution and integrals for every point.  `seeds` may carry per-point
    (C, D) warm starts, e.g. from neighbouring average points.
    """
    x_bars = np.asarray(x_bars, dtype=float)
    B = len(x_bars)
    co = hamiltonian_coeffs(spec)
    knots = knot_partition(spec, u_a, u_b)
    quadratic = spec.rate_map is not RateMap.EXPONENTIAL or spec.lam == 0.0

    def make_states(C, D, its, conv, res):
        alpha = 1.0 / (2.0 * C)
        dgam = D / (2.0 * C)
        return [
            SelfConsistentState(
                x_bar=float(x_bars[b]), C=float(C[b]), D=float(D[b]),
                alpha=float(alpha[b]), delta_gamma=float(dgam[b]),
                iterations=int(its[b]), converged=bool(conv[b]), residual=float(res[b]),
            )
            for b in range(B)
        ]

    if quadratic:
        bundle = _trial_bundle(
            spec, co, x_bars, np.zeros(B), np.zeros(B), u_a, u_b, knots,
            rel_tol, abs_tol, max_step,
        )
        C, D = cd_constants(bundle.ends, bundle.integrals)
        states = make_states(C, D, np.ones(B), np.ones(B, bool), np.zeros(B))
        return states, bundle

    if seeds is None:
        warm = _trial_bundle(
            spec, co, x_bars, np.zeros(B), np.zeros(B), u_a, u_b, knots,
            rel_tol, abs_tol, max_step,
        )
        C, D = cd_constants(warm.ends, warm.integrals)
    else:
        C = np.array([s[0] for s in seeds], dtype=float)
        D = np.array([s[1] for s in seeds], dtype=float)

    its = np.zeros(B, dtype=int)
    res = np.full(B, np.inf)
    conv = np.zeros(B, dtype=bool)
    prev_dC = np.zeros(B)
    prev_dD = np.zeros(B)
    damp = np.ones(B)
    bundle = None

    for it in range(1, max_iter + 1):
        alpha = 1.0 / (2.0 * C)
        dgam = D / (2.0 * C)
        if np.any(alpha <= 0.0):
            bad = np.where(alpha <= 0.0)[0]
            raise NumericalError(
                f"non-positive smearing variance at x_bar={x_bars[bad[0]]:.4f}"
            )
        bundle = _trial_bundle(
            spec, co, x_bars, alpha, dgam, u_a, u_b, knots, rel_tol, abs_tol, max_step,
        )
        C_new, D_new = cd_constants(bundle.ends, bundle.integrals)
        dC = C_new - C
        dD = D_new - D
        scale = np.maximum(1.0, np.maximum(np.abs(C_new), np.abs(D_new)))
        step = np.maximum(np.abs(dC), np.abs(dD)) / scale
        newly = ~conv
        res[newly] = step[newly]
        its[newly] = it
        # Oscillation guard: if the update reverses direction and does not
        # shrink, halve the step for that point.
        osc = (dC * prev_dC + dD * prev_dD < 0.0) & (
            np.hypot(dC, dD) > 0.75 * np.hypot(prev_dC, prev_dD)
        )
        damp = np.where(osc & newly, np.maximum(0.25, 0.5 * damp), np.minimum(1.0, damp * 1.2))
        C = np.where(newly, C + damp * dC, C)
        D = np.where(newly, D + damp * dD, D)
        prev_dC, prev_dD = dC, dD
        conv = conv | (step <= tol)
        if np.all(conv):
            break

    if not np.all(conv):
        # Secant-style rescue on the stragglers, one at a time.
        for b in np.where(~conv)[0]:
            C_b, D_b, ok, r_b, extra = _rescue_fixed_point(
                spec, co, float(x_bars[b]), float(C[b]), float(D[b]),
                u_a, u_b, knots, tol, rel_tol, abs_tol,
            )
            C[b], D[b] = C_b, D_b
            conv[b] = ok
            res[b] = r_b
            its[b] += extra

    # Final consistent pass at the converged parameters.
    alpha = 1.0 / (2.0 * C)
    dgam = D / (2.0 * C)
    bundle = _trial_bundle(
        spec, co, x_bars, alpha, dgam, u_a, u_b, knots, rel_tol, abs_tol, max_step,
    )
    C_fin, D_fin = cd_constants(bundle.ends, bundle.integrals)
    states = make_states(C_fin, D_fin, its, conv, res)
    return states, bundle


def _rescue_fixed_point(spec, co, x_bar, C0, D0, u_a, u_b, knots, tol, rel_tol, abs_tol):
    """2D quasi-Newton (Broyden) root search for a stubborn average point."""
    from scipy.optimize import root

    def residual(v):
        C, D = v
        if C <= 0.0:
            return [1e3, 1e3]
        alpha = np.array([1.0 / (2.0 * C)])
        dgam = np.array([D / (2.0 * C)])
        bundle = _trial_bundle(
            spec, co, np.array([x_bar]), alpha, dgam, u_a, u_b, knots, rel_tol, abs_tol,
        )
        C_new, D_new = cd_constants(bundle.ends, bundle.integrals)
        return [float(C_new[0] - C), float(D_new[0] - D)]

    sol = root(residual, [C0, D0], method="broyden1", options={"maxiter": 40, "fatol": tol})
    r_vec = residual(sol.x)
    r = max(abs(r_vec[0]), abs(r_vec[1])) / max(1.0, abs(sol.x[0]), abs(sol.x[1]))
    return float(sol.x[0]), float(sol.x[1]), bool(sol.success or r <= 10.0 * tol), r, 40


def self_consistent_solve(
    spec: ShortRateModelSpec,
    x_bar: float,
    u_a: float,
    u_b: float,
    seed=None,
    tol: float = 1e-10,
    max_iter: int = 40,
):
    """Fixed point at a single average point; returns the state, the
    phase solution, the trial parameters and the kernel integrals of the
    final pass."""
    seeds = [seed] if seed is not None else None
    states, bundle = self_consistent_batch(
        spec, np.array([x_bar]), u_a, u_b, seeds=seeds, tol=tol, max_iter=max_iter,
    )
    st = states[0]
    if spec.rate_map is RateMap.EXPONENTIAL:
        trial = bk_trial_params(spec, x_bar, st.alpha, st.delta_gamma)
    else:
        trial = quadratic_trial_params(hamiltonian_coeffs(spec), x_bar)
    return st, bundle.nu, trial, bundle.integrals


def reduced_density_matrix(
    state: SelfConsistentState,
    params,
    nu: NuSolution,
    integrals: KernelIntegrals,
    x_a: float,
    x_b: float,
) -> float:
    """Off-diagonal reduced density matrix at one converged average point."""
    if not state.converged:
        raise ValidationError("reduced density matrix requires a converged state")
    ends = endpoint_data(nu)
    val = reduced_density_values(
        ends, integrals, nu.u_b - nu.u_a, np.array([state.x_bar]), x_a, x_b,
    )
    return float(val[0])


# ---------------------------------------------------------------------------
# Quadratic exactness
# ---------------------------------------------------------------------------

def quadratic_exactness_check(
    params: FhoParams,
    a: tuple[float, float],
    b: tuple[float, float],
    tol: float = 1e-9,
) -> tuple[float, float]:
    """Run the full average-point pipeline on a quadratic weight and
    compare with the closed-form kernel; the two must agree identically.

    Returns (approximate, exact).
    """
    u_a, x_a = a
    u_b, x_b = b
    nu = solve_fho_phase(params, u_a, u_b, rel_tol=1e-9, abs_tol=1e-12)
    ki_exact = kernel_integrals(params, nu)
    exact = fho_density_matrix(params, nu, a, b, integrals=ki_exact)
    ends = endpoint_data(nu)
    span = u_b - u_a

    def integrand(x_bars):
        x_bars = np.asarray(x_bars, dtype=float)
        B = len(x_bars)

        def force_nodes(t):
            g = np.asarray(params.m(t) * params.omega_sq(t), dtype=float)
            if g.ndim == 0:
                g = np.full(len(t), float(g))
            gam = np.asarray(params.gamma(t), dtype=float)
            if gam.ndim == 0:
                gam = np.full(len(t), float(gam))
            return g[:, None] * x_bars[None, :] + gam[:, None]

        def w_nodes(t):
            m = np.asarray(params.m(t), dtype=float)
            w2 = np.asarray(params.omega_sq(t), dtype=float)
            gam = np.asarray(params.gamma(t), dtype=float)
            w0 = np.asarray(params.w(t), dtype=float)
            cols = []
            for arr in (m, w2, gam, w0):
                cols.append(np.full(len(t), float(arr)) if arr.ndim == 0 else arr)
            m, w2, gam, w0 = cols
            return (
                0.5 * (m * w2)[:, None] * x_bars[None, :] ** 2
                + gam[:, None] * x_bars[None, :]
                + w0[:, None]
            )

        ki = kernel_sweep(nu, force_nodes, w_nodes, batch=B)
        return reduced_density_values(ends, ki, span, x_bars, x_a, x_b, params.hbar)

    # Range: centre between the end points, width from the smearing
    # variance of the force-free problem plus the end-point spread.
    C0, _ = cd_constants(ends, ki_exact, params.hbar)
    width = math.sqrt(max(1.0 / (2.0 * float(C0[0])), 1e-12))
    center = 0.5 * (x_a + x_b)
    halfspan = 10.0 * width + 2.0 * abs(x_b - x_a) + 1e-3
    res = adaptive_gauss_kronrod(
        integrand, center - halfspan, center + halfspan, tol=tol * max(exact, 1e-12),
    )
    return float(res.value), float(exact)
