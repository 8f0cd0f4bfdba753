"""Monte Carlo experiments: strong-convergence rates, consistency checks, censuses.

The central experiment couples every coarse resolution to one fine reference
path through shared Brownian increments (exact block sums, see
``delay_cir.noise``) and reports L^p norms of the pathwise sup errors:

* grid error      max over coarse nodes of |x_ref(t_k) - x_k|,
* uniform error   max over *fine* nodes of |Xhat_ref(t) - Xhat(t)|; both
                  interpolants are affine between fine nodes, so the fine-node
                  maximum is the exact sup over [t0, T].

Monte Carlo aggregation uses numpy pairwise summation over per-path arrays
assembled in path order, so results do not depend on chunking or on the
worker count; ``threads`` only changes wall time.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import noise as noise_mod
from . import scheme as scheme_mod
from .cir_analytics import (
    CIRParams,
    StrongFellerViolated,
    classical_mean,
    mean_delay_curve,
)
from .model import GammaSpec, GridMisaligned, ModelSpec, TimeGrid, build_grid, validate

Array = np.ndarray

__all__ = [
    "ErrorRow",
    "ErrorTable",
    "RateFit",
    "MeanCheckRow",
    "CensusRow",
    "ModulusRow",
    "ModulusResult",
    "SurvivalEstimate",
    "strong_error_study",
    "fit_rate",
    "mean_consistency_check",
    "comparison_census",
    "positivity_census",
    "modulus_scaling",
    "survival_probability",
    "PRequestedTooLarge",
    "InsufficientRows",
    "IncomparableModels",
]

_CHUNK = 2048


class PRequestedTooLarge(ValueError):
    """A requested L^p order is outside the range backed by the conditions."""


class InsufficientRows(ValueError):
    """Not enough table rows to fit a rate."""


class IncomparableModels(ValueError):
    """The two models do not satisfy the pathwise-comparison preconditions."""


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------


def _path_range_inputs(model, fine_grid, seed, lo, hi):
    """(increments, segment values) for paths lo..hi-1 on the fine grid."""
    inc = np.stack(
        [noise_mod.generate(fine_grid, seed, i).increments for i in range(lo, hi)]
    )
    if model.initial.is_random:
        seg = np.stack(
            [
                noise_mod.sample_segment(model.initial, fine_grid, seed, i).values
                for i in range(lo, hi)
            ]
        )
    else:
        seg = noise_mod.sample_segment(model.initial, fine_grid, seed, 0).values
    return inc, seg


def _lp_norm_and_jackknife(err: Array, p: float) -> tuple[float, float]:
    """(E[err^p])^{1/p} with its leave-one-out jackknife standard error."""
    n = err.size
    v = err**p
    total = float(np.sum(v))
    norm = (total / n) ** (1.0 / p)
    loo = ((total - v) / (n - 1)) ** (1.0 / p)
    center = float(np.mean(loo))
    return norm, math.sqrt((n - 1) / n * float(np.sum((loo - center) ** 2)))


def _coarse_on_fine_weights(n_fine_steps: int, r: int) -> tuple[Array, Array]:
    idx = np.arange(n_fine_steps + 1)
    base = np.minimum(idx // r, n_fine_steps // r - 1)
    frac = idx / r - base
    return base, frac


# ---------------------------------------------------------------------------
# strong error study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErrorRow:
    delta: float
    p: float
    grid_error: float
    uniform_error: float
    std_err: float
    uniform_std_err: float
    n_paths: int


@dataclass(frozen=True)
class ErrorTable:
    rows: tuple[ErrorRow, ...]
    n_ref: int
    seed: int


def strong_error_study(
    model: ModelSpec,
    n_list,
    n_ref: int,
    n_paths: int,
    p_list,
    seed: int,
    threads: int = 1,
) -> ErrorTable:
    """Coupled strong-error table of the drift-implicit scheme.

    Every coarse level N in ``n_list`` shares the Brownian path of the
    reference level ``n_ref`` via exact block sums; errors are pathwise sups,
    reported as L^p Monte Carlo norms with jackknife standard errors (the
    ``std_err`` column belongs to the grid error).

    ``n_list`` must be increasing with each entry dividing the next and the
    largest dividing ``n_ref``; every p must lie below the ``p_max`` of the
    model's condition report, and the strict Feller condition must hold.
    """
    report = validate(model)
    if not report.strong_feller_ok:
        raise StrongFellerViolated(
            "strong error study requires sigma^2 < 2 a inf(gamma)"
        )
    n_list = [int(n) for n in n_list]
    p_list = [float(p) for p in p_list]
    if sorted(n_list) != n_list or len(set(n_list)) != len(n_list):
        raise noise_mod.NotNested(f"n_list must be strictly increasing, got {n_list}")
    for small, big in zip(n_list, n_list[1:]):
        if big % small:
            raise noise_mod.NotNested(f"{small} does not divide {big} in n_list")
    if n_ref <= n_list[-1] or n_ref % n_list[-1]:
        raise noise_mod.NotNested(
            f"n_ref={n_ref} must be a proper multiple of max(n_list)={n_list[-1]}"
        )
    for p in p_list:
        if p >= report.p_max:
            raise PRequestedTooLarge(f"p={p} is not below p_max={report.p_max}")
        if p <= 0.0:
            raise PRequestedTooLarge(f"p must be positive, got {p}")

    fine_grid = build_grid(model, n_ref)
    coarse_grids = {n: build_grid(model, n) for n in n_list}
    offset_fine = fine_grid.n_per_delay
    weights = {n: _coarse_on_fine_weights(fine_grid.n_steps, n_ref // n) for n in n_list}

    grid_err = {n: np.empty(n_paths) for n in n_list}
    unif_err = {n: np.empty(n_paths) for n in n_list}

    def run_chunk(lo: int, hi: int) -> None:
        inc_fine, seg = _path_range_inputs(model, fine_grid, seed, lo, hi)
        y_ref = scheme_mod.simulate_y_paths(model, fine_grid, inc_fine, seg)
        x_ref = np.square(y_ref[:, offset_fine:])
        for n in n_list:
            r = n_ref // n
            grid_c = coarse_grids[n]
            inc_c = noise_mod.block_sum(inc_fine, r)
            seg_c = seg  # segment nodes at the coarse level are a subset in time
            y_c = scheme_mod.simulate_y_paths(
                model, grid_c, inc_c, _subsample_segment(seg_c, r)
            )
            x_c = np.square(y_c[:, grid_c.n_per_delay :])
            grid_err[n][lo:hi] = np.max(np.abs(x_ref[:, ::r] - x_c), axis=1)
            base, frac = weights[n]
            on_fine = x_c[:, base] * (1.0 - frac) + x_c[:, base + 1] * frac
            unif_err[n][lo:hi] = np.max(np.abs(x_ref - on_fine), axis=1)

    bounds = [(lo, min(lo + _CHUNK, n_paths)) for lo in range(0, n_paths, _CHUNK)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(lambda b: run_chunk(*b), bounds))
    else:
        for lo, hi in bounds:
            run_chunk(lo, hi)

    rows = []
    for p in p_list:
        for n in n_list:
            g_norm, g_se = _lp_norm_and_jackknife(grid_err[n], p)
            u_norm, u_se = _lp_norm_and_jackknife(unif_err[n], p)
            rows.append(
                ErrorRow(
                    delta=coarse_grids[n].delta,
                    p=p,
                    grid_error=g_norm,
                    uniform_error=u_norm,
                    std_err=g_se,
                    uniform_std_err=u_se,
                    n_paths=n_paths,
                )
            )
    return ErrorTable(rows=tuple(rows), n_ref=n_ref, seed=seed)


def _subsample_segment(seg: Array, r: int) -> Array:
    """Segment node values at the coarse resolution (every r-th fine node)."""
    return seg[..., ::r]


@dataclass(frozen=True)
class RateFit:
    p: float
    variant: str
    slope: float
    intercept: float
    r_squared: float


def fit_rate(table: ErrorTable, p: float, variant: str = "plain_delta") -> RateFit:
    """OLS rate fit over the table rows of order ``p``.

    ``plain_delta`` regresses log(grid error) on log(delta);
    ``delta_log_delta`` regresses log(uniform error) on log(delta |log delta|),
    the modulus-of-continuity scale of the interpolated paths.
    """
    rows = [r for r in table.rows if r.p == p]
    if len(rows) < 3:
        raise InsufficientRows(f"need >= 3 rows at p={p}, got {len(rows)}")
    if variant == "plain_delta":
        x = np.array([math.log(r.delta) for r in rows])
        y_vals = [r.grid_error for r in rows]
    elif variant == "delta_log_delta":
        x = np.array([math.log(r.delta * abs(math.log(r.delta))) for r in rows])
        y_vals = [r.uniform_error for r in rows]
    else:
        raise ValueError(f"unknown fit variant {variant!r}")
    if min(y_vals) <= 0.0:
        raise InsufficientRows(f"cannot fit a rate through zero errors at p={p}")
    y = np.log(y_vals)
    slope, intercept = np.polyfit(x, y, 1)
    fitted = slope * x + intercept
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(
        p=p, variant=variant, slope=float(slope), intercept=float(intercept),
        r_squared=r_squared,
    )


# ---------------------------------------------------------------------------
# mean consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeanCheckRow:
    t: float
    mc_mean: float
    oracle_mean: float
    z: float


def _checkpoint_indices(grid: TimeGrid, checkpoints) -> list[int]:
    out = []
    for t in checkpoints:
        rel = (float(t) - grid.t0) / grid.delta
        k = round(rel)
        if abs(rel - k) > 1e-9 * max(1.0, abs(rel)) or not 0 <= k <= grid.n_steps:
            raise GridMisaligned(f"checkpoint {t} is not a grid node in [t0, T]")
        out.append(k)
    return out


def mean_consistency_check(
    model: ModelSpec,
    grid: TimeGrid,
    n_paths: int,
    checkpoints,
    seed: int,
) -> tuple[MeanCheckRow, ...]:
    """z-scores of the Monte Carlo mean against the analytic mean.

    The oracle is the b = 0 closed form when it applies (constant gamma, no
    delay feedback) and the quadrature mean curve otherwise; in both cases the
    initial level is E[X0].  z = (MC mean - oracle) / (sample sd / sqrt(n)).
    """
    validate(model)
    ks = _checkpoint_indices(grid, checkpoints)
    samples = np.empty((n_paths, len(ks)))
    offset = grid.n_per_delay
    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        inc, seg = _path_range_inputs(model, grid, seed, lo, hi)
        y = scheme_mod.simulate_y_paths(model, grid, inc, seg)
        x = np.square(y)
        for j, k in enumerate(ks):
            samples[lo:hi, j] = x[:, offset + k]

    if model.b == 0.0 and model.gamma.kind == "constant":
        params = CIRParams(
            a=model.a,
            gamma=model.gamma.params[0],
            sigma=model.sigma,
            x0=float(model.initial.mean_at(model.t0)),
            t0=model.t0,
        )
        oracle = [classical_mean(params, float(grid.time(k))) for k in ks]
    else:
        curve = mean_delay_curve(model, grid)
        oracle = [float(curve.means[k]) for k in ks]

    rows = []
    for j, k in enumerate(ks):
        mc = float(np.mean(samples[:, j]))
        se = float(np.std(samples[:, j], ddof=1) / math.sqrt(n_paths))
        rows.append(
            MeanCheckRow(
                t=float(grid.time(k)),
                mc_mean=mc,
                oracle_mean=oracle[j],
                z=(mc - oracle[j]) / se,
            )
        )
    return tuple(rows)


# ---------------------------------------------------------------------------
# censuses
# ---------------------------------------------------------------------------


def comparison_census(
    model_upper: ModelSpec,
    model_lower: ModelSpec,
    grid: TimeGrid,
    n_paths: int,
    seed: int,
) -> int:
    """Count pathwise ordering violations y_upper < y_lower on shared noise.

    Requires the models to share (a, sigma, tau, t0, horizon) and the initial
    segment, with b_lower = 0 <= b_upper and gamma_upper >= gamma_lower at
    every grid node; under these conditions the implicit update is monotone in
    its forcing, so the count should be zero.
    """
    same = all(
        getattr(model_upper, f) == getattr(model_lower, f)
        for f in ("a", "sigma", "tau", "t0", "horizon")
    )
    if not same or model_upper.initial != model_lower.initial:
        raise IncomparableModels(
            "models must share a, sigma, tau, t0, horizon and the initial segment"
        )
    if model_lower.b != 0.0 or model_upper.b < 0.0:
        raise IncomparableModels("need b_lower = 0 and b_upper >= 0")
    times = grid.times()
    g_upper = np.asarray(model_upper.gamma_at(times))
    g_lower = np.asarray(model_lower.gamma_at(times))
    if np.any(g_upper < g_lower):
        raise IncomparableModels("need gamma_upper >= gamma_lower on the grid")
    validate(model_upper)
    validate(model_lower)

    violations = 0
    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        inc, seg = _path_range_inputs(model_upper, grid, seed, lo, hi)
        y_up = scheme_mod.simulate_y_paths(model_upper, grid, inc, seg)
        y_lo_ = scheme_mod.simulate_y_paths(model_lower, grid, inc, seg)
        violations += int(np.count_nonzero(y_up < y_lo_))
    return violations


@dataclass(frozen=True)
class CensusRow:
    scheme: str
    fraction_nonpositive: float
    n_paths: int


def positivity_census(
    scheme: str, model: ModelSpec, grid: TimeGrid, n_paths: int, seed: int
) -> CensusRow:
    """Fraction of paths with any nonpositive node value x_k <= 0, k >= 0."""
    if scheme not in ("implicit", "truncated", "symmetrized"):
        raise ValueError(f"unknown scheme {scheme!r}")
    validate(model)
    offset = grid.n_per_delay
    flagged = 0
    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        inc, seg = _path_range_inputs(model, grid, seed, lo, hi)
        if scheme == "implicit":
            y = scheme_mod.simulate_y_paths(model, grid, inc, seg)
            bad = np.any(np.square(y[:, offset:]) <= 0.0, axis=1)
        elif scheme == "truncated":
            x, _ = scheme_mod.truncated_euler_paths(model, grid, inc, seg)
            bad = np.any(x[:, offset:] <= 0.0, axis=1)
        else:
            x, _ = scheme_mod.symmetrized_euler_paths(model, grid, inc, seg)
            bad = np.any(x[:, offset:] <= 0.0, axis=1)
        flagged += int(np.count_nonzero(bad))
    return CensusRow(
        scheme=scheme, fraction_nonpositive=flagged / n_paths, n_paths=n_paths
    )


# ---------------------------------------------------------------------------
# modulus of continuity and survival functional
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModulusRow:
    delta: float
    modulus: float


@dataclass(frozen=True)
class ModulusResult:
    rows: tuple[ModulusRow, ...]
    p: float
    slope: float

    @property
    def deltas(self) -> Array:
        return np.array([r.delta for r in self.rows])


def modulus_scaling(
    model: ModelSpec,
    grid: TimeGrid,
    n_paths: int,
    delta_list,
    seed: int,
    p: float = 1.0,
) -> ModulusResult:
    """L^p norms of the pathwise modulus of continuity w(delta) of the interpolant.

    w(delta) = sup over |t - s| <= delta of |Xhat(t) - Xhat(s)| over [t0, T];
    for lags that are whole numbers of grid steps the sup is attained at node
    pairs, so the computation is exact.  The reported slope is the OLS slope
    of log E[w^p]^{1/p} against log sqrt(delta |log delta|), the scale on
    which the modulus of a square-root diffusion grows linearly.
    """
    validate(model)
    lags = []
    for d in delta_list:
        rel = float(d) / grid.delta
        lag = round(rel)
        if lag < 1 or abs(rel - lag) > 1e-9 or lag > grid.n_steps:
            raise GridMisaligned(
                f"modulus delta {d} must be a whole number of grid steps in (0, T - t0]"
            )
        lags.append(lag)
    order = np.argsort(lags)
    sorted_lags = [lags[i] for i in order]

    offset = grid.n_per_delay
    w_by_lag = {lag: np.empty(n_paths) for lag in sorted_lags}
    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        inc, seg = _path_range_inputs(model, grid, seed, lo, hi)
        y = scheme_mod.simulate_y_paths(model, grid, inc, seg)
        x = np.square(y[:, offset:])
        running = np.zeros(hi - lo)
        next_record = 0
        for lag in range(1, sorted_lags[-1] + 1):
            diffs = np.max(np.abs(x[:, lag:] - x[:, :-lag]), axis=1)
            running = np.maximum(running, diffs)
            while next_record < len(sorted_lags) and sorted_lags[next_record] == lag:
                w_by_lag[lag][lo:hi] = running
                next_record += 1

    rows = []
    for i in order:
        lag = lags[i]
        norm, _ = _lp_norm_and_jackknife(w_by_lag[lag], p)
        rows.append(ModulusRow(delta=lag * grid.delta, modulus=norm))
    xs = np.array([math.log(math.sqrt(r.delta * abs(math.log(r.delta)))) for r in rows])
    ys = np.array([math.log(r.modulus) for r in rows])
    slope = float(np.polyfit(xs, ys, 1)[0]) if len(rows) >= 2 else math.nan
    return ModulusResult(rows=tuple(rows), p=p, slope=slope)


@dataclass(frozen=True)
class SurvivalEstimate:
    value: float
    std_err: float
    n_paths: int


def survival_probability(
    model: ModelSpec, grid: TimeGrid, n_paths: int, seed: int
) -> SurvivalEstimate:
    """Monte Carlo E[exp(-integral_t0^T X(t) dt)] via exact trapezoid integration.

    The integral of the piecewise-linear interpolant is exactly the trapezoid
    rule over the nodes, so the only approximations are the scheme itself and
    Monte Carlo averaging.
    """
    validate(model)
    offset = grid.n_per_delay
    vals = np.empty(n_paths)
    for lo in range(0, n_paths, _CHUNK):
        hi = min(lo + _CHUNK, n_paths)
        inc, seg = _path_range_inputs(model, grid, seed, lo, hi)
        y = scheme_mod.simulate_y_paths(model, grid, inc, seg)
        x = np.square(y[:, offset:])
        integral = grid.delta * (np.sum(x, axis=1) - 0.5 * (x[:, 0] + x[:, -1]))
        vals[lo:hi] = np.exp(-integral)
    return SurvivalEstimate(
        value=float(np.mean(vals)),
        std_err=float(np.std(vals, ddof=1) / math.sqrt(n_paths)),
        n_paths=n_paths,
    )


def classical_variant(model: ModelSpec, gamma_level: float | None = None) -> ModelSpec:
    """The b = 0 comparison model: same parameters, optionally flat gamma."""
    gamma = model.gamma if gamma_level is None else GammaSpec.constant(gamma_level)
    return replace(model, b=0.0, gamma=gamma)
