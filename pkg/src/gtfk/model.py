"""Time-dependent model parameter curves and the short-rate model spec.

Calibrated short-rate parameters are step functions over a benchmark
maturity schedule.  To make them differentiable each step is replaced by a
C1 cubic on [u_i, u_i + delta_u]; outside these smoothing windows the
curves are piecewise constant.  The value quoted at a benchmark applies to
the bucket that ends there, so the transition toward the next bucket's
value starts exactly at the benchmark.

The module also maps a model specification to the coefficient functions of
the quadratic part of the path-weight Hamiltonian, from which every other
module works.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ValidationError

__all__ = [
    "ParamCurve",
    "build_curve",
    "eval_curve",
    "RateMap",
    "ShortRateModelSpec",
    "QuadraticCoeffs",
    "hamiltonian_coeffs",
    "knot_partition",
    "spec_from_json",
    "spec_to_json",
    "benchmark_spec",
    "state_moments",
]


@dataclass(frozen=True)
class ParamCurve:
    """Piecewise cubic parameter curve with C1 value/derivative everywhere.

    Pieces are stored as local polynomials c0 + c1*x + c2*x^2 + c3*x^3 in
    x = u - piece_start.  `breaks[i] <= u < breaks[i+1]` selects piece i;
    the final piece extends flat to +infinity.
    """

    benchmark_times: tuple[float, ...]
    benchmark_values: tuple[float, ...]
    smoothing_width: float
    breaks: np.ndarray = field(repr=False)
    coeffs: np.ndarray = field(repr=False)  # (n_pieces, 4)

    @property
    def knots(self) -> np.ndarray:
        """Interior piece boundaries (cubic window edges), excluding u = 0."""
        return self.breaks[1:]

    def __post_init__(self):
        # Plain-Python mirrors of the piece table for the scalar fast path
        # (the ODE right-hand side evaluates curves one scalar at a time).
        object.__setattr__(self, "_breaks_list", [float(b) for b in self.breaks])
        object.__setattr__(self, "_coeffs_list", [tuple(map(float, c)) for c in self.coeffs])

    def eval_all(self, u: float) -> tuple[float, float, float]:
        """Scalar (value, first, second derivative) with one piece lookup."""
        if u < 0.0:
            raise ValidationError(f"curve argument outside domain [0, inf): {u!r}")
        i = bisect.bisect_right(self._breaks_list, u) - 1
        if i < 0:
            i = 0
        elif i >= len(self._coeffs_list):
            i = len(self._coeffs_list) - 1
        c0, c1, c2, c3 = self._coeffs_list[i]
        x = u - self._breaks_list[i]
        val = c0 + x * (c1 + x * (c2 + x * c3))
        der = c1 + x * (2.0 * c2 + 3.0 * c3 * x)
        der2 = 2.0 * c2 + 6.0 * c3 * x
        return val, der, der2

    def _piece_index(self, u):
        idx = np.searchsorted(self.breaks, u, side="right") - 1
        return np.clip(idx, 0, len(self.coeffs) - 1)

    def _check_domain(self, u):
        if np.any(np.asarray(u) < 0.0) or np.any(~np.isfinite(np.asarray(u))):
            raise ValidationError(f"curve argument outside domain [0, inf): {u!r}")

    def value(self, u):
        self._check_domain(u)
        idx = self._piece_index(u)
        x = np.asarray(u, dtype=float) - self.breaks[idx]
        c = self.coeffs[idx]
        out = c[..., 0] + x * (c[..., 1] + x * (c[..., 2] + x * c[..., 3]))
        return float(out) if np.isscalar(u) else out

    def deriv(self, u):
        self._check_domain(u)
        idx = self._piece_index(u)
        x = np.asarray(u, dtype=float) - self.breaks[idx]
        c = self.coeffs[idx]
        out = c[..., 1] + x * (2.0 * c[..., 2] + x * 3.0 * c[..., 3])
        return float(out) if np.isscalar(u) else out

    def deriv2(self, u):
        """Second derivative of the active piece (discontinuous at knots)."""
        self._check_domain(u)
        idx = self._piece_index(u)
        x = np.asarray(u, dtype=float) - self.breaks[idx]
        c = self.coeffs[idx]
        out = 2.0 * c[..., 2] + 6.0 * c[..., 3] * x
        return float(out) if np.isscalar(u) else out

    def integral(self, u0: float, u1: float) -> float:
        """Exact integral of the piecewise polynomial over [u0, u1]."""
        self._check_domain([u0, u1])
        if u1 < u0:
            return -self.integral(u1, u0)

        def anti(piece: int, x: float) -> float:
            c = self.coeffs[piece]
            return x * (c[0] + x * (c[1] / 2 + x * (c[2] / 3 + x * c[3] / 4)))

        i0 = int(self._piece_index(u0))
        i1 = int(self._piece_index(u1))
        if i0 == i1:
            s = self.breaks[i0]
            return anti(i0, u1 - s) - anti(i0, u0 - s)
        total = anti(i0, self.breaks[i0 + 1] - self.breaks[i0]) - anti(i0, u0 - self.breaks[i0])
        for i in range(i0 + 1, i1):
            total += anti(i, self.breaks[i + 1] - self.breaks[i])
        total += anti(i1, u1 - self.breaks[i1])
        return total


def build_curve(
    benchmark_times: Sequence[float],
    value_at_shortest: float,
    value_at_longest: float,
    delta_u: float,
) -> ParamCurve:
    """Build a smoothed step curve over a benchmark schedule.

    The value at each benchmark is the linear interpolation (in maturity)
    between the endpoint values; between benchmarks the curve is constant
    at the value of the bucket's closing benchmark, and every step is
    replaced by a zero-slope cubic on [u_i, u_i + delta_u].
    """
    times = [float(t) for t in benchmark_times]
    if len(times) == 0:
        raise ValidationError("need at least one benchmark time")
    if any(t2 <= t1 for t1, t2 in zip(times, times[1:])):
        raise ValidationError(f"benchmark times must be strictly increasing: {times}")
    if times[0] < 0.0:
        raise ValidationError("benchmark times must be non-negative")
    if delta_u <= 0.0:
        raise ValidationError(f"smoothing width must be positive, got {delta_u}")
    gaps = [t2 - t1 for t1, t2 in zip(times, times[1:])]
    if gaps and delta_u >= min(gaps):
        raise ValidationError(
            f"smoothing width {delta_u} must be smaller than the minimum "
            f"benchmark gap {min(gaps)}"
        )

    if len(times) == 1:
        values = [float(value_at_shortest)]
        if value_at_longest != value_at_shortest:
            raise ValidationError("single-benchmark curve needs equal endpoint values")
    else:
        t0, t1 = times[0], times[-1]
        values = [
            value_at_shortest + (value_at_longest - value_at_shortest) * (t - t0) / (t1 - t0)
            for t in times
        ]

    breaks = [0.0]
    coeffs = [(values[0], 0.0, 0.0, 0.0)]
    for i in range(len(times) - 1):
        ti, vi, vnext = times[i], values[i], values[i + 1]
        dv = vnext - vi
        # Zero-slope cubic from vi to vnext over [ti, ti + delta_u].
        breaks.append(ti)
        coeffs.append((vi, 0.0, 3.0 * dv / delta_u**2, -2.0 * dv / delta_u**3))
        breaks.append(ti + delta_u)
        coeffs.append((vnext, 0.0, 0.0, 0.0))
    return ParamCurve(
        benchmark_times=tuple(times),
        benchmark_values=tuple(values),
        smoothing_width=float(delta_u),
        breaks=np.array(breaks),
        coeffs=np.array(coeffs),
    )


def eval_curve(curve: ParamCurve, u, order: int = 0):
    """Evaluate a curve (order 0) or its first derivative (order 1)."""
    if order == 0:
        return curve.value(u)
    if order == 1:
        return curve.deriv(u)
    raise ValidationError(f"order must be 0 or 1, got {order}")


class RateMap(str, Enum):
    """Map from the state variable to the short rate."""

    LINEAR = "linear"        # r = x  (Gaussian model)
    EXPONENTIAL = "exponential"  # r = exp(x)  (lognormal model)


@dataclass(frozen=True)
class ShortRateModelSpec:
    """Mean reversion speed/level, volatility, rate map and initial state.

    `lam` is the discounting weight: 0 gives plain transition densities,
    1 gives discounted (pricing) densities.
    """

    kappa: ParamCurve
    theta: ParamCurve
    sigma: ParamCurve
    rate_map: RateMap
    x0: float
    lam: float = 1.0

    def __post_init__(self):
        if any(v <= 0.0 for v in self.sigma.benchmark_values):
            raise ValidationError("sigma must be positive everywhere")
        if not isinstance(self.rate_map, RateMap):
            object.__setattr__(self, "rate_map", RateMap(self.rate_map))

    def rate(self, x, u=None):
        """Short rate for state x (vectorized)."""
        if self.rate_map is RateMap.LINEAR:
            return x
        return np.exp(x)


class QuadraticCoeffs:
    """Coefficient functions of the quadratic path-weight Hamiltonian
    a*xdot^2 + 2b*xdot*x + c*x^2 + 2d*xdot + 2e*x + f, plus the derived
    mass/frequency/force/shift functions. All methods are vectorized in u.
    """

    def __init__(self, spec: ShortRateModelSpec):
        self.spec = spec
        self._kappa = spec.kappa
        self._theta = spec.theta
        self._sigma = spec.sigma
        self.lam_in_gamma = spec.lam if spec.rate_map is RateMap.LINEAR else 0.0

    # -- primitive curves ------------------------------------------------
    def _k(self, u):
        return self._kappa.value(u)

    def _s(self, u):
        return self._sigma.value(u)

    def a(self, u):
        return 0.5 / self._s(u) ** 2

    def a_dot(self, u):
        s = self._s(u)
        return -self._sigma.deriv(u) / s**3

    def b(self, u):
        return 0.5 * self._k(u) / self._s(u) ** 2

    def b_dot(self, u):
        k, s = self._k(u), self._s(u)
        return 0.5 * self._kappa.deriv(u) / s**2 - k * self._sigma.deriv(u) / s**3

    def c(self, u):
        return 0.5 * self._k(u) ** 2 / self._s(u) ** 2

    def d(self, u):
        return -0.5 * self._k(u) * self._theta.value(u) / self._s(u) ** 2

    def d_dot(self, u):
        k, th, s = self._k(u), self._theta.value(u), self._s(u)
        kd, thd, sd = self._kappa.deriv(u), self._theta.deriv(u), self._sigma.deriv(u)
        return -0.5 * (kd * th + k * thd) / s**2 + k * th * sd / s**3

    def e(self, u):
        return -0.5 * self._k(u) ** 2 * self._theta.value(u) / self._s(u) ** 2

    def f(self, u):
        k, th, s = self._k(u), self._theta.value(u), self._s(u)
        return 0.5 * k**2 * th**2 / s**2 - 0.5 * k

    # -- derived Hamiltonian functions ------------------------------------
    def m(self, u):
        return 1.0 / self._s(u) ** 2

    def mu(self, u):
        return 1.0 / self._s(u)

    def inv_mu(self, u):
        if not isinstance(u, np.ndarray):
            return self._sigma.eval_all(u)[0]
        return self._s(u)

    def kappa_raw(self, u):
        if not isinstance(u, np.ndarray):
            return self._kappa.eval_all(u)[0]
        return self._k(u)

    def mu_dot_over_mu(self, u):
        if not isinstance(u, np.ndarray):
            sv, sd, _ = self._sigma.eval_all(u)
            return -sd / sv
        return -self._sigma.deriv(u) / self._s(u)

    def omega_sq(self, u):
        if not isinstance(u, np.ndarray):
            kv, kd, _ = self._kappa.eval_all(u)
            sv, sd, _ = self._sigma.eval_all(u)
            return kv * kv + 2.0 * kv * sd / sv - kd
        k, s = self._k(u), self._s(u)
        return k**2 + 2.0 * k * self._sigma.deriv(u) / s - self._kappa.deriv(u)

    def gamma(self, u):
        return 2.0 * (self.e(u) - self.d_dot(u)) + self.lam_in_gamma

    def w(self, u):
        return self.f(u)

    def kappa_eff(self, u):
        """kappa - mu_dot/mu, the damping coefficient of the phase system."""
        if not isinstance(u, np.ndarray):
            kv, _, _ = self._kappa.eval_all(u)
            sv, sd, _ = self._sigma.eval_all(u)
            return kv + sd / sv
        return self._k(u) + self._sigma.deriv(u) / self._s(u)

    def kappa_eff_dot(self, u):
        if not isinstance(u, np.ndarray):
            _, kd, _ = self._kappa.eval_all(u)
            sv, sd, sdd = self._sigma.eval_all(u)
            r = sd / sv
            return kd + sdd / sv - r * r
        s, sd = self._s(u), self._sigma.deriv(u)
        return self._kappa.deriv(u) + self._sigma.deriv2(u) / s - (sd / s) ** 2

    def ode_tables(self):
        """Curve piece tables (kappa, sigma) for the compiled solver core."""
        return (
            np.ascontiguousarray(self._kappa.breaks),
            np.ascontiguousarray(self._kappa.coeffs),
            np.ascontiguousarray(self._sigma.breaks),
            np.ascontiguousarray(self._sigma.coeffs),
        )

    def pinney_coeff(self, u):
        """omega^2 + mu_ddot/mu, written without second curve derivatives
        of the combined expression: equals kappa_eff^2 - kappa_eff_dot."""
        if not isinstance(u, np.ndarray):
            kv, kd, _ = self._kappa.eval_all(u)
            sv, sd, sdd = self._sigma.eval_all(u)
            r = sd / sv
            k = kv + r
            return k * k - (kd + sdd / sv - r * r)
        k = self.kappa_eff(u)
        return k * k - self.kappa_eff_dot(u)


def hamiltonian_coeffs(spec: ShortRateModelSpec) -> QuadraticCoeffs:
    """Coefficient functions for a short-rate model specification.

    For the linear rate map the discount weight contributes `lam` to the
    linear force term; for the exponential map the rate term is handled by
    the self-consistent trial potential instead.
    """
    return QuadraticCoeffs(spec)


def knot_partition(spec: ShortRateModelSpec, u_a: float, u_b: float) -> np.ndarray:
    """Sorted times {u_a, u_b} plus every curve piece boundary strictly
    inside (u_a, u_b); all parameter curves are single polynomials between
    consecutive entries."""
    if not u_b > u_a:
        raise ValidationError(f"need u_a < u_b, got [{u_a}, {u_b}]")
    pts = {float(u_a), float(u_b)}
    for curve in (spec.kappa, spec.theta, spec.sigma):
        for t in curve.knots:
            if u_a < t < u_b:
                pts.add(float(t))
    return np.array(sorted(pts))


# ---------------------------------------------------------------------------
# JSON interface
# ---------------------------------------------------------------------------

_REQUIRED_KEYS = {"benchmarks", "delta_u", "kappa", "theta", "sigma", "rate_map", "x0", "lambda"}


def spec_from_json(doc) -> ShortRateModelSpec:
    """Parse a model spec from a JSON document (dict, str, or file path)."""
    if isinstance(doc, (str, bytes)):
        text = doc
        if isinstance(doc, str) and not doc.lstrip().startswith("{"):
            with open(doc, "r", encoding="utf-8") as fh:
                text = fh.read()
        doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValidationError("model spec document must be a JSON object")
    missing = _REQUIRED_KEYS - doc.keys()
    if missing:
        raise ValidationError(f"model spec missing keys: {sorted(missing)}")
    try:
        benchmarks = [float(t) for t in doc["benchmarks"]]
        delta_u = float(doc["delta_u"])
        curves = {}
        for name in ("kappa", "theta", "sigma"):
            ends = doc[name]
            curves[name] = build_curve(benchmarks, float(ends["low"]), float(ends["high"]), delta_u)
        rate_map = RateMap(doc["rate_map"])
        return ShortRateModelSpec(
            kappa=curves["kappa"],
            theta=curves["theta"],
            sigma=curves["sigma"],
            rate_map=rate_map,
            x0=float(doc["x0"]),
            lam=float(doc["lambda"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed model spec: {exc}") from exc


def spec_to_json(spec: ShortRateModelSpec) -> str:
    """Bit-exact echo of a parsed spec (floats round-trip via repr)."""
    doc = {
        "benchmarks": list(spec.kappa.benchmark_times),
        "delta_u": spec.kappa.smoothing_width,
        "kappa": {"low": spec.kappa.benchmark_values[0], "high": spec.kappa.benchmark_values[-1]},
        "theta": {"low": spec.theta.benchmark_values[0], "high": spec.theta.benchmark_values[-1]},
        "sigma": {"low": spec.sigma.benchmark_values[0], "high": spec.sigma.benchmark_values[-1]},
        "rate_map": spec.rate_map.value,
        "x0": spec.x0,
        "lambda": spec.lam,
    }
    return json.dumps(doc, indent=2)


_BENCHMARKS = (0.25, 0.5, 1.0, 2.0, 5.0, 10.0, 15.0, 20.0, 30.0)
_DELTA_U = 1.0 / 512.0


def benchmark_spec(volatility: str = "typical", lam: float = 1.0) -> ShortRateModelSpec:
    """Bundled lognormal benchmark configuration used by the CLI table
    command: nine benchmark maturities out to 30y, mean reversion easing
    from 2% to 1%, reversion level rising from ln(4%) to ln(6%), and either
    a typical (50%/40%) or high (100%/80%) log-volatility profile."""
    if volatility == "typical":
        sig_lo, sig_hi = 0.5, 0.4
    elif volatility == "high":
        sig_lo, sig_hi = 1.0, 0.8
    else:
        raise ValidationError(f"volatility must be 'typical' or 'high', got {volatility!r}")
    return ShortRateModelSpec(
        kappa=build_curve(_BENCHMARKS, 0.02, 0.01, _DELTA_U),
        theta=build_curve(_BENCHMARKS, math.log(0.04), math.log(0.06), _DELTA_U),
        sigma=build_curve(_BENCHMARKS, sig_lo, sig_hi, _DELTA_U),
        rate_map=RateMap.EXPONENTIAL,
        x0=math.log(0.06),
        lam=lam,
    )


def state_moments(
    spec: ShortRateModelSpec, u_a: float, u_b: float, x0: Optional[float] = None
) -> tuple[float, float]:
    """Mean and variance of the state at u_b (no discounting), starting
    from x0 (default spec.x0) at u_a.  Exact for the piecewise-polynomial
    curves up to quadrature of the smooth exponential-weighted integrands."""
    from .quadrature import integrate_panels

    start = spec.x0 if x0 is None else float(x0)
    knots = knot_partition(spec, u_a, u_b)
    kap = lambda v: spec.kappa.value(v)

    def K(v):
        return np.array([spec.kappa.integral(u_a, vi) for vi in np.atleast_1d(v)])

    mean_int = integrate_panels(
        lambda v: kap(v) * spec.theta.value(v) * np.exp(K(v)), knots, q=12, max_dx=2.0
    )
    KT = spec.kappa.integral(u_a, u_b)
    mean = math.exp(-KT) * (start + mean_int)
    var_int = integrate_panels(
        lambda v: spec.sigma.value(v) ** 2 * np.exp(2.0 * K(v)), knots, q=12, max_dx=2.0
    )
    var = math.exp(-2.0 * KT) * var_int
    return mean, var
