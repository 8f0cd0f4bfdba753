"""Coupled Gaussian increments shared across refinement levels.

Normals come from the inverse normal CDF applied to a counter-based
(Philox) uniform stream keyed by ``(seed, path_index, stream tag)``; the
position in the stream is the step counter.  Any increment is therefore
addressable without generating its predecessors, regeneration is bit-exact
within one interpreter session and across sessions on the same platform,
and distinct paths never share state.

Coarse increments are exact left-to-right block sums of fine increments, so
a path simulated at a coarse level sees precisely the Brownian increments of
its fine-level twin aggregated over blocks — the coupling used by the
strong-convergence experiments.

Initial-segment randomness lives on a separate stream tag so that drawing a
segment never disturbs the Brownian increments (and vice versa), no matter
how many of either are drawn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .model import InitialSegmentSpec, OutOfDomain, TimeGrid

Array = np.ndarray

__all__ = [
    "CoupledNoise",
    "SegmentDraw",
    "generate",
    "coarsen",
    "block_sum",
    "sample_segment",
    "NotNested",
    "NonPositiveSample",
]

_MASK64 = (1 << 64) - 1
_TAG_NOISE = 0
_TAG_SEGMENT = 1


class NotNested(ValueError):
    """Coarsening factor does not nest inside the fine resolution."""


class NonPositiveSample(ValueError):
    """A drawn or tabulated initial-segment value is not strictly positive."""


def _standard_normals(seed: int, path_index: int, tag: int, n: int) -> Array:
    """n standard normals from the (seed, path_index, tag) stream."""
    if seed < 0 or path_index < 0:
        raise ValueError("seed and path_index must be nonnegative integers")
    key = np.array(
        [seed & _MASK64, ((path_index << 1) | tag) & _MASK64], dtype=np.uint64
    )
    gen = np.random.Generator(np.random.Philox(key=key))
    draws = gen.integers(0, 1 << 53, size=n, dtype=np.int64)
    # (draws + 0.5) * 2^-53 lies strictly inside (0, 1): ndtri never sees 0 or 1.
    return ndtri((draws + 0.5) * 2.0**-53)


@dataclass(frozen=True)
class CoupledNoise:
    """Brownian increments of one path at one resolution.

    ``n_fine`` is the number of steps per delay at this resolution and
    ``delta_fine`` the step; ``increments`` holds W(t_{k+1}) - W(t_k) for
    k = 0 .. K-1.
    """

    seed: int
    path_index: int
    n_fine: int
    delta_fine: float
    increments: Array


def generate(grid: TimeGrid, seed: int, path_index: int) -> CoupledNoise:
    """Increments of path ``path_index`` on ``grid``, keyed by ``seed``."""
    z = _standard_normals(seed, path_index, _TAG_NOISE, grid.n_steps)
    return CoupledNoise(
        seed=seed,
        path_index=path_index,
        n_fine=grid.n_per_delay,
        delta_fine=grid.delta,
        increments=z * math.sqrt(grid.delta),
    )


def block_sum(increments: Array, r: int) -> Array:
    """Left-to-right sums of consecutive blocks of ``r`` along the last axis."""
    n = increments.shape[-1]
    if r < 1 or n % r:
        raise NotNested(f"block size {r} does not divide {n} increments")
    out = np.ascontiguousarray(increments[..., 0::r]).astype(float, copy=True)
    for j in range(1, r):
        out += increments[..., j::r]
    return out

def coarsen(noise: CoupledNoise, r: int) -> CoupledNoise:
    """The same Brownian path at resolution ``n_fine / r``.

    Raises :class:`NotNested` unless ``r`` divides both the per-delay step
    count and the total number of increments.
    """
    if r < 1 or noise.n_fine % r:
        raise NotNested(f"factor {r} does not divide n_fine={noise.n_fine}")
    return CoupledNoise(
        seed=noise.seed,
        path_index=noise.path_index,
        n_fine=noise.n_fine // r,
        delta_fine=noise.delta_fine * r,
        increments=block_sum(noise.increments, r),
    )


@dataclass(frozen=True)
class SegmentDraw:
    """Initial segment of one path evaluated on the grid nodes k = -N .. 0.

    For deterministic kinds (and for the lognormal kind, whose randomness is a
    single time-constant level) the continuous-time segment is recoverable via
    :meth:`value_at`.
    """

    values: Array
    spec: InitialSegmentSpec
    level: float | None = None

    def value_at(self, t: float | Array):
        """X0(t) for t in the segment's time range."""
        if self.spec.kind == "constant":
            out = np.full_like(np.asarray(t, dtype=float), self.spec.params[0])
        elif self.spec.kind == "table":
            ts = np.array([p[0] for p in self.spec.points])
            vs = np.array([p[1] for p in self.spec.points])
            out = np.interp(np.asarray(t, dtype=float), ts, vs)
        else:
            out = np.full_like(np.asarray(t, dtype=float), self.level)
        return out if np.ndim(t) else float(out)


def sample_segment(
    spec: InitialSegmentSpec, grid: TimeGrid, seed: int, path_index: int
) -> SegmentDraw:
    """Draw (or tabulate) the initial segment of one path on the grid nodes.

    Uses the segment stream tag, so the draw is identical whatever grid
    resolution is used for the Brownian increments of the same path.
    """
    times = grid.t0 + np.arange(-grid.n_per_delay, 1) * grid.delta
    if spec.kind == "constant":
        values = np.full(times.shape, spec.params[0])
        level = None
    elif spec.kind == "table":
        ts = np.array([p[0] for p in spec.points])
        vs = np.array([p[1] for p in spec.points])
        tol = 1e-9 * max(1.0, abs(grid.t0), grid.tau)
        if ts[0] > times[0] + tol or ts[-1] < times[-1] - tol:
            raise OutOfDomain(
                f"segment table covers [{ts[0]}, {ts[-1]}] but the grid needs "
                f"[{times[0]}, {times[-1]}]"
            )
        values = np.interp(times, ts, vs)
        level = None
    else:
        median, log_sd = spec.params
        z = _standard_normals(seed, path_index, _TAG_SEGMENT, 1)[0]
        level = median * math.exp(log_sd * z)
        values = np.full(times.shape, level)
    if np.any(values <= 0.0):
        raise NonPositiveSample(
            f"initial segment of path {path_index} is not strictly positive"
        )
    return SegmentDraw(values=values, spec=spec, level=level)
