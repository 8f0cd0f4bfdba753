"""Model description, parameter conditions and the delay-aligned time grid.

The simulated equation is

    dX(t) = [a (gamma(t) - X(t)) + b X(t - tau)] dt + sigma sqrt(X(t)) dW(t)

on [t0, T] with X = X0 on [t0 - tau, t0].  Everything downstream works on the
square-root transform Y = sqrt(X), whose drift uses the reparameterised
coefficients

    a_under(t) = (4 a gamma(t) - sigma^2) / 8,   a_bar = a / 2,
    b_bar = b / 2,                               sigma_bar = sigma / 2.

This module holds the immutable specification types, the mean-level families
for gamma, the initial-segment families, grid construction (step = tau / N so
the delay is an exact index shift), and ``validate`` which summarises the
parameter conditions in a :class:`ConditionReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal

import numpy as np

Array = np.ndarray

__all__ = [
    "GammaSpec",
    "InitialSegmentSpec",
    "ModelSpec",
    "TimeGrid",
    "ConditionReport",
    "gamma_eval",
    "gamma_bounds",
    "build_grid",
    "validate",
    "NonPositiveParameter",
    "HorizonBeforeStart",
    "GammaNotPositive",
    "OutOfDomain",
    "GridMisaligned",
]


class NonPositiveParameter(ValueError):
    """A parameter that must be positive (or nonnegative) is not."""


class HorizonBeforeStart(ValueError):
    """The horizon T does not lie strictly after the start time t0."""


class GammaNotPositive(ValueError):
    """The mean level gamma is not strictly positive on the horizon."""


class OutOfDomain(ValueError):
    """A time argument lies outside the domain the object is defined on."""


class GridMisaligned(ValueError):
    """Requested times are not representable on the delay-aligned grid."""


# ---------------------------------------------------------------------------
# gamma families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GammaSpec:
    """Deterministic mean level gamma(t), parameterised by elapsed time t - t0.

    Supported kinds:

    ``constant``   params = (gamma0,)            gamma(t) = gamma0
    ``affine``     params = (gamma0, slope)      gamma(t) = gamma0 + slope (t - t0)
    ``sinusoid``   params = (gamma0, A, omega)   gamma(t) = gamma0 + A sin(omega (t - t0))
    """

    kind: Literal["constant", "affine", "sinusoid"]
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        expected = {"constant": 1, "affine": 2, "sinusoid": 3}
        if self.kind not in expected:
            raise ValueError(f"unknown gamma kind {self.kind!r}")
        if len(self.params) != expected[self.kind]:
            raise ValueError(
                f"gamma kind {self.kind!r} takes {expected[self.kind]} parameters, "
                f"got {len(self.params)}"
            )
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))

    @classmethod
    def constant(cls, gamma0: float) -> "GammaSpec":
        return cls("constant", (gamma0,))

    @classmethod
    def affine(cls, gamma0: float, slope: float) -> "GammaSpec":
        return cls("affine", (gamma0, slope))

    @classmethod
    def sinusoid(cls, gamma0: float, amplitude: float, omega: float) -> "GammaSpec":
        return cls("sinusoid", (gamma0, amplitude, omega))


def gamma_eval(
    gamma: GammaSpec,
    t: float | Array,
    t0: float = 0.0,
    domain: tuple[float, float] | None = None,
):
    """Evaluate gamma(t).  ``domain=(lo, hi)`` additionally enforces lo <= t <= hi.

    Raises
    ------
    OutOfDomain
        If a domain is given and any requested time falls outside it.
    """
    t_arr = np.asarray(t, dtype=float)
    if domain is not None:
        lo, hi = domain
        tol = 1e-12 * max(1.0, abs(lo), abs(hi))
        if np.any(t_arr < lo - tol) or np.any(t_arr > hi + tol):
            raise OutOfDomain(f"time {t!r} outside [{lo}, {hi}]")
    s = t_arr - t0
    if gamma.kind == "constant":
        out = np.full_like(s, gamma.params[0])
    elif gamma.kind == "affine":
        gamma0, slope = gamma.params
        out = gamma0 + slope * s
    else:
        gamma0, amp, omega = gamma.params
        out = gamma0 + amp * np.sin(omega * s)
    return out if np.ndim(t) else float(out)


def _sin_extrema(theta0: float, theta1: float) -> tuple[float, float]:
    """Exact (min, max) of sin over the closed interval [theta0, theta1]."""
    if theta1 < theta0:
        theta0, theta1 = theta1, theta0
    two_pi = 2.0 * math.pi

    def hits(target: float) -> bool:
        return math.ceil((theta0 - target) / two_pi - 1e-12) <= math.floor(
            (theta1 - target) / two_pi + 1e-12
        )

    s0, s1 = math.sin(theta0), math.sin(theta1)
    hi = 1.0 if hits(0.5 * math.pi) else max(s0, s1)
    lo = -1.0 if hits(-0.5 * math.pi) else min(s0, s1)
    return lo, hi


def gamma_bounds(gamma: GammaSpec, t0: float, t_end: float) -> tuple[float, float, float]:
    """Infimum, supremum and Hölder-1/2 constant of gamma on [t0, t_end].

    The returned constant L satisfies |gamma(t) - gamma(s)| <= L |t - s|^(1/2)
    on [t0, t_end]; for the built-in Lipschitz families it is the Lipschitz
    constant scaled by sqrt(t_end - t0).
    """
    if t_end <= t0:
        raise HorizonBeforeStart(f"t_end={t_end} must exceed t0={t0}")
    span = t_end - t0
    if gamma.kind == "constant":
        g0 = gamma.params[0]
        return g0, g0, 0.0
    if gamma.kind == "affine":
        g0, slope = gamma.params
        lo, hi = sorted((g0, g0 + slope * span))
        return lo, hi, abs(slope) * math.sqrt(span)
    g0, amp, omega = gamma.params
    smin, smax = _sin_extrema(0.0, omega * span) if omega >= 0 else _sin_extrema(omega * span, 0.0)
    vals = (amp * smin, amp * smax)
    return g0 + min(vals), g0 + max(vals), abs(amp * omega) * math.sqrt(span)


# ---------------------------------------------------------------------------
# initial segment families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InitialSegmentSpec:
    """Initial segment X0 on [t0 - tau, t0].

    ``constant``    params = (x0,); X0(t) = x0.
    ``table``       points = ((t, value), ...); piecewise-linear through the
                    given knots, which must cover [t0 - tau, t0].
    ``lognormal``   params = (median, log_sd); a single lognormal level per
                    path, constant in time: X0(t) = median * exp(log_sd * Z).
    """

    kind: Literal["constant", "table", "lognormal"]
    params: tuple[float, ...] = ()
    points: tuple[tuple[float, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind == "constant":
            if len(self.params) != 1:
                raise ValueError("constant segment takes params=(x0,)")
        elif self.kind == "lognormal":
            if len(self.params) != 2:
                raise ValueError("lognormal segment takes params=(median, log_sd)")
        elif self.kind == "table":
            if len(self.points) < 2:
                raise ValueError("table segment needs at least two (t, value) knots")
            ts = [p[0] for p in self.points]
            if sorted(ts) != ts:
                raise ValueError("table knots must be sorted by time")
        else:
            raise ValueError(f"unknown initial-segment kind {self.kind!r}")
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        object.__setattr__(
            self, "points", tuple((float(t), float(v)) for t, v in self.points)
        )

    @classmethod
    def constant(cls, x0: float) -> "InitialSegmentSpec":
        return cls("constant", (x0,))

    @classmethod
    def table(cls, points) -> "InitialSegmentSpec":
        return cls("table", (), tuple((float(t), float(v)) for t, v in points))

    @classmethod
    def lognormal(cls, median: float, log_sd: float) -> "InitialSegmentSpec":
        return cls("lognormal", (median, log_sd))

    @property
    def is_random(self) -> bool:
        return self.kind == "lognormal"

    def mean_at(self, t: float | Array):
        """E[X0(t)]; for the lognormal level this is median * exp(log_sd^2 / 2)."""
        t_arr = np.asarray(t, dtype=float)
        if self.kind == "constant":
            out = np.full_like(t_arr, self.params[0])
        elif self.kind == "table":
            ts = np.array([p[0] for p in self.points])
            vs = np.array([p[1] for p in self.points])
            out = np.interp(t_arr, ts, vs)
        else:
            median, log_sd = self.params
            out = np.full_like(t_arr, median * math.exp(0.5 * log_sd**2))
        return out if np.ndim(t) else float(out)


# ---------------------------------------------------------------------------
# model and grid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """Full parameter set of the delayed equation on [t0, horizon]."""

    a: float
    b: float
    sigma: float
    tau: float
    t0: float
    horizon: float
    gamma: GammaSpec
    initial: InitialSegmentSpec

    @property
    def a_bar(self) -> float:
        return 0.5 * self.a

    @property
    def b_bar(self) -> float:
        return 0.5 * self.b

    @property
    def sigma_bar(self) -> float:
        return 0.5 * self.sigma

    def gamma_at(self, t: float | Array):
        """gamma(t) with the domain check on [t0 - tau, horizon]."""
        return gamma_eval(
            self.gamma, t, self.t0, domain=(self.t0 - self.tau, self.horizon)
        )

    def a_under(self, t: float | Array):
        """a_under(t) = (4 a gamma(t) - sigma^2) / 8, the transformed mean-level drift."""
        g = gamma_eval(self.gamma, t, self.t0)
        return (4.0 * self.a * g - self.sigma**2) / 8.0

    @property
    def a_under_star(self) -> float:
        """sup of a_under over [t0, horizon]."""
        _, hi, _ = gamma_bounds(self.gamma, self.t0, self.horizon)
        return (4.0 * self.a * hi - self.sigma**2) / 8.0

    @property
    def gamma_lower(self) -> float:
        lo, _, _ = gamma_bounds(self.gamma, self.t0, self.horizon)
        return lo

    @property
    def feller_ratio(self) -> float:
        """2 a inf(gamma) / sigma^2; > 1 keeps the classical process away from 0."""
        return 2.0 * self.a * self.gamma_lower / self.sigma**2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = t0 + k tau / N, k = -N .. K.

    The step is stored as the exact pair (tau, N); ``delta`` is the float
    quotient.  The delay tau equals N steps exactly, so the delayed node of
    index k is the node of index k - N: delay lookups are pure integer
    arithmetic and never compare floating-point times.
    """

    t0: float
    tau: float
    n_per_delay: int
    n_steps: int

    def __post_init__(self) -> None:
        if self.n_per_delay < 1:
            raise NonPositiveParameter("grid needs at least one step per delay")
        if self.n_steps < 1:
            raise HorizonBeforeStart("grid needs at least one step after t0")

    @property
    def delta(self) -> float:
        return self.tau / self.n_per_delay

    @property
    def t_end(self) -> float:
        return self.t0 + self.n_steps * self.delta

    @property
    def n_nodes(self) -> int:
        """Total node count over k = -N .. K."""
        return self.n_per_delay + self.n_steps + 1

    def time(self, k: int | Array):
        """Node time t_k for k in [-N, K]."""
        return self.t0 + np.asarray(k, dtype=float) * self.delta

    def times(self) -> Array:
        """All node times, ordered k = -N .. K."""
        return self.t0 + np.arange(-self.n_per_delay, self.n_steps + 1) * self.delta

    def node_index(self, k: int) -> int:
        """Position of grid index k inside arrays that start at k = -N."""
        if k < -self.n_per_delay or k > self.n_steps:
            raise OutOfDomain(f"grid index {k} outside [-{self.n_per_delay}, {self.n_steps}]")
        return k + self.n_per_delay

    def delay_index(self, k: int) -> int:
        """Grid index of the delayed node: t_k - tau = t_{k - N} exactly."""
        return k - self.n_per_delay


def build_grid(spec: ModelSpec, n_per_delay: int) -> TimeGrid:
    """Grid with N = ``n_per_delay`` steps per delay covering [t0, horizon].

    Raises
    ------
    GridMisaligned
        If horizon - t0 is not an integer multiple of tau / N.
    """
    if n_per_delay < 1:
        raise NonPositiveParameter("n_per_delay must be >= 1")
    if spec.horizon <= spec.t0:
        raise HorizonBeforeStart(f"horizon={spec.horizon} must exceed t0={spec.t0}")
    ratio = (spec.horizon - spec.t0) * n_per_delay / spec.tau
    n_steps = round(ratio)
    if n_steps < 1 or abs(ratio - n_steps) > 1e-9 * max(1.0, abs(ratio)):
        raise GridMisaligned(
            f"horizon - t0 = {spec.horizon - spec.t0} is not a whole number of "
            f"steps tau/N = {spec.tau / n_per_delay}"
        )
    return TimeGrid(t0=spec.t0, tau=spec.tau, n_per_delay=n_per_delay, n_steps=n_steps)


# ---------------------------------------------------------------------------
# parameter conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionReport:
    """Summary of the parameter conditions behind the convergence guarantees.

    feller_ok          sigma^2 <= 2 a inf(gamma)  (boundary never reached for b = 0)
    strong_feller_ok   sigma^2 <  2 a inf(gamma)  (strict version; the strong
                       error analysis needs it)
    p_max              supremum of the L^p orders with a strong error guarantee,
                       p_max = (2 a inf(gamma) / sigma^2) * 2 / (1 + m)
    nu                 2 a inf(gamma) / sigma^2 - 1
    m                  number of delay windows, ceil((horizon - t0) / tau)
    """

    feller_ok: bool
    strong_feller_ok: bool
    p_max: float
    nu: float
    m: int


def validate(spec: ModelSpec) -> ConditionReport:
    """Check hard invariants of ``spec`` and report the soft conditions.

    Hard violations raise; everything else (e.g. a violated Feller condition)
    is reported through the returned flags so callers can decide what they
    need.
    """
    for name in ("a", "sigma", "tau"):
        if getattr(spec, name) <= 0.0:
            raise NonPositiveParameter(f"{name} must be positive, got {getattr(spec, name)}")
    if spec.b < 0.0:
        raise NonPositiveParameter(f"b must be nonnegative, got {spec.b}")
    if spec.horizon <= spec.t0:
        raise HorizonBeforeStart(f"horizon={spec.horizon} must exceed t0={spec.t0}")
    lo, _, _ = gamma_bounds(spec.gamma, spec.t0, spec.horizon)
    if lo <= 0.0:
        raise GammaNotPositive(f"inf gamma = {lo} on [{spec.t0}, {spec.horizon}]")
    init = spec.initial
    if init.kind == "constant" and init.params[0] <= 0.0:
        raise NonPositiveParameter(f"initial level must be positive, got {init.params[0]}")
    if init.kind == "table" and min(v for _, v in init.points) <= 0.0:
        raise NonPositiveParameter("initial table must be strictly positive")
    if init.kind == "lognormal" and init.params[0] <= 0.0:
        raise NonPositiveParameter(f"initial median must be positive, got {init.params[0]}")

    span = spec.horizon - spec.t0
    m = math.ceil(span / spec.tau / (1.0 + 1e-12))
    ratio = 2.0 * spec.a * lo / spec.sigma**2
    feller_ok = spec.sigma**2 <= 2.0 * spec.a * lo
    strong_feller_ok = spec.sigma**2 < 2.0 * spec.a * lo
    half = (1 + m) / 2.0  # exact: small half-integer
    p_max = ratio / half
    # nu is derived from the rounded product so that the report satisfies
    # p_max * (1 + m) / 2 == nu + 1 exactly in floating arithmetic (the raw
    # divide-then-multiply round trip can be one ulp off the original ratio).
    nu = p_max * half - 1.0
    return ConditionReport(
        feller_ok=feller_ok,
        strong_feller_ok=strong_feller_ok,
        p_max=p_max,
        nu=nu,
        m=m,
    )
