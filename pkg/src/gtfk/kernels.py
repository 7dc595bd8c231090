"""Gaussian path-integral kernels.

Closed-form machinery for quadratic path weights with time-dependent
coefficients: the forced-oscillator kernel expressed through the phase
function nu(u), the sinh-weighted force/weight integrals entering its
classical action, a general quadratic-weight kernel built from the
homogeneous equation of motion (used as an independent oracle), and a
time-sliced transfer-matrix evaluation for small-instance verification.

All integrals are accumulated in a single pass over the phase solution's
steps, sub-split so the phase increment per Gauss panel stays small; the
nested (double) integrals reuse the partial-integral weights of the same
nodes, so one sweep prices every functional at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NumericalError, ValidationError
from .ode import NuSolution, OdeSystemSpec, solve_pinney_system
from .quadrature import cumulative_matrix, gauss_nodes

__all__ = [
    "FhoParams",
    "KernelIntegrals",
    "EndpointData",
    "gaussian_integral",
    "solve_fho_phase",
    "kernel_integrals",
    "gamma_integrals",
    "omega_i_integrals",
    "fho_classical_action",
    "fho_density_matrix",
    "general_gaussian_density",
    "path_integral_oracle",
]


def _zero(u):
    return 0.0


@dataclass
class FhoParams:
    """Time-dependent mass, frequency, force and shift of the quadratic
    path weight m/2 xdot^2 + m/2 omega^2 x^2 + gamma x + w.

    `m_dot` must be supplied when the mass is time-dependent (the phase
    system needs mu'/mu = m'/2m); all callables take scalar or array u.
    """

    m: Callable
    omega_sq: Callable
    gamma: Callable = _zero
    w: Callable = _zero
    m_dot: Callable = _zero
    hbar: float = 1.0

    def mu(self, u):
        return np.sqrt(self.m(u))

    def inv_mu(self, u):
        return 1.0 / math.sqrt(self.m(u)) if np.isscalar(u) else 1.0 / np.sqrt(self.m(u))

    def mu_dot_over_mu(self, u):
        return 0.5 * self.m_dot(u) / self.m(u)


@dataclass
class KernelIntegrals:
    """The sinh-weighted functionals of one phase solution (shape (B,)).

    Gamma_* carry the force; Omega_* carry the plain weight
    1/(mu sqrt(nu_dot)); I1/I2 mix the two; w_int is the integral of the
    shift term.
    """

    Gamma_a: np.ndarray
    Gamma_b: np.ndarray
    Gamma_ab: np.ndarray
    Omega_a: np.ndarray
    Omega_b: np.ndarray
    Omega_ab: np.ndarray
    I1: np.ndarray
    I2: np.ndarray
    w_int: np.ndarray

    def as_dict(self):
        return {
            "Gamma_a": self.Gamma_a.tolist(),
            "Gamma_b": self.Gamma_b.tolist(),
            "Gamma_ab": self.Gamma_ab.tolist(),
            "Omega_a": self.Omega_a.tolist(),
            "Omega_b": self.Omega_b.tolist(),
            "Omega_ab": self.Omega_ab.tolist(),
            "I1": self.I1.tolist(),
            "I2": self.I2.tolist(),
            "w_int": self.w_int.tolist(),
        }


@dataclass
class EndpointData:
    """Endpoint quantities of a phase solution needed by the kernel
    formulas, in the scaled variable H = 1/(mu sqrt(nu_dot))."""

    H_a: np.ndarray
    H_b: np.ndarray
    P_a: np.ndarray          # nu_ddot/(2 nu_dot^2) + mu_dot/(mu nu_dot)
    P_b: np.ndarray
    dnu: np.ndarray          # nu_b - nu_a
    sinh_dnu: np.ndarray
    cosh_dnu: np.ndarray

    @property
    def inv_HaHb(self):
        """mu_a mu_b sqrt(nu_dot_a nu_dot_b)."""
        return 1.0 / (self.H_a * self.H_b)


def endpoint_data(sol: NuSolution, mu_dot_over_mu_fn=None) -> EndpointData:
    """Extract endpoint quantities; P = -H H' mu^2 in the scaled variable."""
    s_a = sol.inv_mu(sol.u_a)
    s_b = sol.inv_mu(np.nextafter(sol.u_b, sol.u_a))
    P_a = -sol.H_a * sol.Hdot_a / s_a**2
    P_b = -sol.H_b * sol.Hdot_b / s_b**2
    dnu = sol.nu_b - sol.nu[0]
    return EndpointData(
        H_a=sol.H_a, H_b=sol.H_b, P_a=P_a, P_b=P_b,
        dnu=dnu, sinh_dnu=np.sinh(dnu), cosh_dnu=np.cosh(dnu),
    )


def gaussian_integral(A: float, B: float) -> float:
    """Integral of exp(A x^2 + B x) over the real line; requires Re A < 0."""
    if not (np.real(A) < 0.0):
        raise ValidationError(f"Gaussian integral needs Re[A] < 0, got {A}")
    return math.sqrt(math.pi / -A) * math.exp(-(B * B) / (4.0 * A))


def solve_fho_phase(
    params: FhoParams,
    u_a: float,
    u_b: float,
    knots=None,
    rel_tol: float = 1e-9,
    abs_tol: float = 1e-12,
    gauge: Optional[tuple] = None,
    max_step: Optional[float] = None,
) -> NuSolution:
    """Solve the phase system for a generic set of oscillator parameters.

    The initial data are a gauge choice; by default h(u_a) is matched to
    the local frequency (with a horizon-scale floor so zero-frequency
    problems remain well posed) and h'(u_a) = 0.
    """
    if not u_b > u_a:
        raise ValidationError("need u_a < u_b")
    knots = np.array([u_a, u_b]) if knots is None else np.asarray(knots, dtype=float)
    spec = OdeSystemSpec(
        interval=(u_a, u_b),
        knots=knots,
        inv_mu=params.inv_mu,
        mu_dot_over_mu=params.mu_dot_over_mu,
        omega_sq=params.omega_sq,
        rel_tol=rel_tol,
        abs_tol=abs_tol,
        max_step=max_step,
    )
    if gauge is None:
        w2a = params.omega_sq(u_a)
        if w2a > 1e-12:
            h0 = w2a**-0.25
        else:
            # Zero-slope free evolution has h^2 = h0^2 - u^2/h0^2, which
            # stays positive on [0, T] only for h0^2 > T; keep a margin.
            h0 = math.sqrt(2.0 * (u_b - u_a))
        hdot0 = 0.0
    else:
        h0, hdot0 = gauge
    return solve_pinney_system(spec, h0=h0, hdot0=hdot0)


# ---------------------------------------------------------------------------
# The integral sweep
# ---------------------------------------------------------------------------

_SWEEP_Q = 10
_MAX_DNU = 0.5
_CHUNK = 256


def kernel_sweep(
    sol: NuSolution,
    force_fn,
    w_fn=None,
    q: int = _SWEEP_Q,
    max_dnu: float = _MAX_DNU,
    batch: Optional[int] = None,
) -> KernelIntegrals:
    """Accumulate all kernel integrals in one pass over the solution steps.

    `force_fn(t_nodes) -> (N, B)` evaluates the force gamma(u) (per batch
    problem), `w_fn(t_nodes) -> (N, B)` the shift term.  Steps are
    sub-split so each Gauss panel spans at most `max_dnu` in phase, which
    keeps the interpolatory partial-integral weights at full accuracy.
    `batch` may exceed the solution's batch when one phase solution is
    shared by several force columns (quadratic trials).
    """
    xg, wg = gauss_nodes(q)
    L = cumulative_matrix(q)
    ts = sol.ts
    B = batch if batch is not None else sol.batch
    if sol.batch not in (1, B):
        raise ValidationError("force batch incompatible with solution batch")
    nu_b = np.broadcast_to(sol.nu_b, (B,))

    # Build sub-panel list: parent step index, local [a, b].
    dnu_steps = np.max(sol.states[1:, 2] - sol.states[:-1, 2], axis=1)
    n_sub = np.maximum(1, np.ceil(dnu_steps / max_dnu).astype(int))
    parents = np.repeat(np.arange(sol.n_steps), n_sub)
    offs = np.concatenate([np.arange(k) for k in n_sub])
    counts = np.repeat(n_sub, n_sub)
    t0s = ts[parents]
    dts = ts[parents + 1] - t0s
    a_loc = t0s + dts * offs / counts
    b_loc = t0s + dts * (offs + 1) / counts

    acc = {k: np.zeros(B) for k in
           ("Gamma_a", "Gamma_b", "Gamma_ab", "Omega_a", "Omega_b", "Omega_ab",
            "I1", "I2", "w_int")}
    carry_ga = np.zeros(B)
    carry_wa = np.zeros(B)

    SP = len(parents)
    for lo in range(0, SP, _CHUNK):
        hi = min(lo + _CHUNK, SP)
        par = parents[lo:hi]
        a = a_loc[lo:hi]
        b = b_loc[lo:hi]
        half = 0.5 * (b - a)                                   # (P,)
        t_nodes = 0.5 * (a + b)[:, None] + half[:, None] * xg  # (P, q)
        frac = (t_nodes - ts[par][:, None]) / (ts[par + 1] - ts[par])[:, None]

        # Hermite evaluation of H and nu on all nodes at once.
        s = frac[:, :, None]
        dt = (ts[par + 1] - ts[par])[:, None, None]
        h00 = (1.0 + 2.0 * s) * (1.0 - s) ** 2
        h10 = s * (1.0 - s) ** 2
        h01 = s * s * (3.0 - 2.0 * s)
        h11 = s * s * (s - 1.0)

        def herm(comp):
            y0 = sol.states[par, comp][:, None, :]
            y1 = sol.states[par + 1, comp][:, None, :]
            d0 = sol.f_start[par, comp][:, None, :]
            d1 = sol.f_end[par, comp][:, None, :]
            return h00 * y0 + dt * h10 * d0 + h01 * y1 + dt * h11 * d1

        H = herm(0)                                            # (P, q, B)
        nu = herm(2)
        sinh_a = np.sinh(nu)
        sinh_b = np.sinh(nu_b[None, None, :] - nu)

        flat = t_nodes.ravel()
        gamma_nodes = np.asarray(force_fn(flat)).reshape(hi - lo, q, -1)
        gt = gamma_nodes * H                                   # gamma-tilde
        ga = gt * sinh_a
        gb = gt * sinh_b
        shape = (hi - lo, q, B)
        wa = np.broadcast_to(H * sinh_a, shape)
        wb = np.broadcast_to(H * sinh_b, shape)

        hw = half[:, None]                                     # (P,1)
        tot = lambda f: np.einsum("q,pqb->pb", wg, f) * hw
        tot_ga = tot(ga)
        tot_wa = tot(wa)

        # Partial integrals from each sub-panel start to its nodes.
        par_ga = np.einsum("iq,pqb->pib", L, ga) * hw[:, :, None]
        par_wa = np.einsum("iq,pqb->pib", L, wa) * hw[:, :, None]
        base_ga = carry_ga + np.concatenate(
            [np.zeros((1, B)), np.cumsum(tot_ga, axis=0)[:-1]], axis=0
        )
        base_wa = carry_wa + np.concatenate(
            [np.zeros((1, B)), np.cumsum(tot_wa, axis=0)[:-1]], axis=0
        )
        cum_ga = base_ga[:, None, :] + par_ga
        cum_wa = base_wa[:, None, :] + par_wa
        carry_ga = base_ga[-1] + tot_ga[-1]
        carry_wa = base_wa[-1] + tot_wa[-1]

        acc["Gamma_a"] += tot_ga.sum(axis=0)
        acc["Gamma_b"] += tot(gb).sum(axis=0)
        acc["Omega_a"] += tot_wa.sum(axis=0)
        acc["Omega_b"] += tot(wb).sum(axis=0)
        acc["Gamma_ab"] += tot(gb * cum_ga).sum(axis=0)
        acc["Omega_ab"] += tot(wb * cum_wa).sum(axis=0)
        acc["I1"] += tot(gb * cum_wa).sum(axis=0)
        acc["I2"] += tot(wb * cum_ga).sum(axis=0)
        if w_fn is not None:
            w_nodes = np.asarray(w_fn(flat)).reshape(hi - lo, q, -1)
            acc["w_int"] += tot(w_nodes).sum(axis=0)

    return KernelIntegrals(**acc)


def _as_nodes(fn, t, B):
    vals = np.asarray(fn(t), dtype=float)
    if vals.ndim == 0:
        vals = np.full(len(t), float(vals))
    return np.broadcast_to(vals[:, None], (len(t), B))


def kernel_integrals(params: FhoParams, nu: NuSolution) -> KernelIntegrals:
    """All sinh-weighted functionals for a plain oscillator force/shift."""
    B = nu.batch
    return kernel_sweep(
        nu,
        lambda t: _as_nodes(params.gamma, t, B),
        lambda t: _as_nodes(params.w, t, B),
    )


def gamma_integrals(params: FhoParams, nu: NuSolution, u_a=None, u_b=None) -> KernelIntegrals:
    """Force-carrying functionals (the full set is computed in one sweep)."""
    return kernel_integrals(params, nu)


def omega_i_integrals(params: FhoParams, nu: NuSolution, u_a=None, u_b=None) -> KernelIntegrals:
    """Weight-carrying and mixed functionals (one sweep computes all)."""
    return kernel_integrals(params, nu)


# ---------------------------------------------------------------------------
# Forced-oscillator kernel
# ---------------------------------------------------------------------------

def fho_classical_action(
    params: FhoParams,
    nu: NuSolution,
    integrals: KernelIntegrals,
    a: tuple[float, float],
    b: tuple[float, float],
) -> float:
    """Classical action of the forced oscillator between end points
    a = (u_a, x_a) and b = (u_b, x_b), using the phase-function form."""
    u_a, x_a = a
    u_b, x_b = b
    if abs(u_a - nu.u_a) > 1e-12 or abs(u_b - nu.u_b) > 1e-12:
        raise ValidationError("end points must match the solved interval")
    ed = endpoint_data(nu)
    xt_a = x_a / ed.H_a
    xt_b = x_b / ed.H_b
    s = ed.sinh_dnu
    c = ed.cosh_dnu
    act = (
        -0.5 * (ed.P_b * xt_b**2 - ed.P_a * xt_a**2)
        + (
            (xt_b**2 + xt_a**2) * c
            - 2.0 * xt_b * xt_a
            + 2.0 * xt_b * integrals.Gamma_a
            + 2.0 * xt_a * integrals.Gamma_b
            - 2.0 * integrals.Gamma_ab
        ) / (2.0 * s)
        + integrals.w_int
    )
    return float(act[0]) if act.shape == (1,) else act


def fho_density_matrix(
    params: FhoParams,
    nu: NuSolution,
    a: tuple[float, float],
    b: tuple[float, float],
    integrals: Optional[KernelIntegrals] = None,
) -> float:
    """Euclidean kernel of the forced oscillator with time-dependent
    parameters between end points a and b."""
    if integrals is None:
        integrals = kernel_integrals(params, nu)
    ed = endpoint_data(nu)
    if np.any(ed.sinh_dnu <= 0.0):
        raise NumericalError("non-positive phase increment: need u_b > u_a")
    hbar = params.hbar
    s_cl = fho_classical_action(params, nu, integrals, a, b)
    pref = np.sqrt(ed.inv_HaHb / (2.0 * math.pi * hbar * ed.sinh_dnu))
    out = pref * np.exp(-np.asarray(s_cl) / hbar)
    return float(out[0]) if out.shape == (1,) else out


# ---------------------------------------------------------------------------
# General quadratic-weight kernel (independent oracle)
# ---------------------------------------------------------------------------

def general_gaussian_density(coeffs, a, b, hbar: float = 1.0, rtol: float = 1e-11):
    """Kernel for the general quadratic path weight
    a xdot^2 + 2b xdot x + c x^2 + 2d xdot + 2e x + f,
    built from a numerically-integrated homogeneous solution.

    `coeffs` provides callables a, a_dot, b, b_dot, c, d, d_dot, e, f.
    The construction is independent of the phase-function route and
    serves as its oracle.
    """
    from scipy.integrate import solve_ivp

    u_a, x_a = a
    u_b, x_b = b
    if not u_b > u_a:
        raise ValidationError("need u_a < u_b")

    ca, cad = coeffs.a, coeffs.a_dot
    cb, cbd = coeffs.b, coeffs.b_dot
    cc, cd_, cdd = coeffs.c, coeffs.d, coeffs.d_dot
    ce, cf = coeffs.e, coeffs.f

    def ed_term(u):
        return ce(u) - cdd(u)

    def rhs(u, y):
        y1, dy1, qq, P1, P2, Z, F = y
        av = ca(u)
        ddy1 = ((cc(u) - cbd(u)) * y1 - cad(u) * dy1) / av
        ed_u = ed_term(u)
        y2 = y1 * qq
        return [
            dy1,
            ddy1,
            1.0 / (av * y1 * y1),
            ed_u * y1,
            ed_u * y2,
            ed_u * (y2 * P1 - y1 * P2),
            cf(u),
        ]

    # tau = 0 convention: y1(0) = 1, y1'(0) = 0.
    sol = solve_ivp(
        rhs, (0.0, u_b), [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        method="DOP853", rtol=rtol, atol=1e-14, dense_output=True,
    )
    if not sol.success:
        raise NumericalError(f"homogeneous-solution integration failed: {sol.message}")

    def state(u):
        return sol.sol(u)

    y1a, dy1a, qa, P1a, P2a, Za, Fa = state(u_a)
    y1b, dy1b, qb, P1b, P2b, Zb, Fb = state(u_b)
    y2a = y1a * qa
    y2b = y1b * qb
    dy2a = dy1a * qa + 1.0 / (ca(u_a) * y1a)
    dy2b = dy1b * qb + 1.0 / (ca(u_b) * y1b)
    R_ba = y2b * y1a - y1b * y2a
    if R_ba <= 0.0:
        raise NumericalError(f"non-positive fluctuation determinant R = {R_ba:.3e}")

    z_a = y2a * P1a - y1a * P2a
    z_b = y2b * P1b - y1b * P2b
    dz_a = dy2a * P1a - dy1a * P2a
    dz_b = dy2b * P1b - dy1b * P2b
    C1 = ((x_a - z_a) * y2b - (x_b - z_b) * y2a) / R_ba
    C2 = ((x_b - z_b) * y1a - (x_a - z_a) * y1b) / R_ba
    xdot_a = C1 * dy1a + C2 * dy2a + dz_a
    xdot_b = C1 * dy1b + C2 * dy2b + dz_b

    integral = C1 * (P1b - P1a) + C2 * (P2b - P2a) + (Zb - Za) + (Fb - Fa)
    s_cl = (
        (ca(u_b) * xdot_b + cb(u_b) * x_b + 2.0 * cd_(u_b)) * x_b
        - (ca(u_a) * xdot_a + cb(u_a) * x_a + 2.0 * cd_(u_a)) * x_a
        + integral
    )
    return math.exp(-s_cl / hbar) / math.sqrt(math.pi * hbar * R_ba)


# ---------------------------------------------------------------------------
# Discretized path-integral oracle
# ---------------------------------------------------------------------------

def path_integral_oracle(
    m_fn,
    V_fn,
    a: tuple[float, float],
    b: tuple[float, float],
    n_slices: int,
    x_min: float,
    x_max: float,
    n_x: int = 401,
    hbar: float = 1.0,
) -> float:
    """Transfer-matrix evaluation of the kernel for weight
    m(u)/2 xdot^2 + V(x, u); converges to the continuum kernel as the
    slice count grows.  End-point states are injected/read by linear
    interpolation on the grid; the grid must be wide enough that the
    boundary carries negligible mass.
    """
    if n_slices < 1:
        raise ValidationError("need at least one slice")
    u_a, x_a = a
    u_b, x_b = b
    xs = np.linspace(x_min, x_max, n_x)
    dx = xs[1] - xs[0]
    dt = (u_b - u_a) / n_slices

    def inject(x0):
        v = np.zeros(n_x)
        j = min(max(int((x0 - x_min) // dx), 0), n_x - 2)
        frac = (x0 - xs[j]) / dx
        v[j] = (1.0 - frac) / dx
        v[j + 1] = frac / dx
        return v

    v = inject(x_a)
    diff = xs[:, None] - xs[None, :]
    for k in range(n_slices):
        t0 = u_a + k * dt
        t1 = t0 + dt
        m_k = m_fn(0.5 * (t0 + t1))
        kin = np.exp(-m_k * diff**2 / (2.0 * hbar * dt))
        pot = np.exp(-0.5 * dt * (V_fn(xs, t0)[None, :] + V_fn(xs, t1)[:, None]) / hbar)
        T = math.sqrt(m_k / (2.0 * math.pi * hbar * dt)) * kin * pot
        v = (T * dx) @ v

    j = min(max(int((x_b - x_min) // dx), 0), n_x - 2)
    frac = (x_b - xs[j]) / dx
    return float((1.0 - frac) * v[j] + frac * v[j + 1])
