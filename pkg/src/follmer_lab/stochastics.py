"""Paths, random streams, Brownian and Q-drift simulation, local times.

All randomness flows through :class:`RngStream`, a ``(seed, stream_id)`` key
for a Philox4x64-10 counter-based generator. Bulk simulators give path ``i``
the stream ``stream_id * 2**32 + i``, so results never depend on how paths
are split across workers.
"""

from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import _paths, _philox
from .models import HarmonicReciprocalModel, ModelDomainError

_U64 = 2**64
PATHS_PER_STREAM = 2**32
DEFAULT_THRESHOLD = 1e-3
DEFAULT_SUBSTEP_C = 0.1
CHUNK = 1024


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_start + k * dt``, k = 0..n_steps."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise ValueError("grid bounds must be finite")
        if self.t_start < 0:
            raise ValueError("t_start must be >= 0")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError("n_steps must be a positive integer")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")

    @classmethod
    def from_step(cls, t_end: float, dt: float, t_start: float = 0.0) -> "TimeGrid":
        """Grid with step ``dt``; ``(t_end - t_start) / dt`` must be (nearly) integral."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        n = round((t_end - t_start) / dt)
        if n < 1 or abs(n * dt - (t_end - t_start)) > 1e-9 * max(1.0, t_end):
            raise ValueError("horizon is not a whole number of steps")
        return cls(t_start, t_end, n)

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return self.t_start + np.arange(self.n_steps + 1) * self.dt

    def node(self, k: int) -> float:
        if not 0 <= k <= self.n_steps:
            raise IndexError(k)
        return self.t_start + k * self.dt

    def index_of(self, t: float) -> int:
        """Node index of time ``t``, which must sit on the grid."""
        k = round((t - self.t_start) / self.dt)
        if not 0 <= k <= self.n_steps or abs(self.node(k) - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} is not a grid node")
        return k

    def refine(self, factor: int) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.n_steps * factor)


class StopReason(enum.Enum):
    NONE = "none"
    EXPLOSION = "explosion"
    HORIZON = "horizon"


@dataclass(frozen=True)
class SamplePath:
    """States on a grid, shape ``(n_steps + 1, q)``, plus stop metadata."""

    grid: TimeGrid
    states: np.ndarray
    stop_index: Optional[int] = None
    stop_reason: StopReason = StopReason.NONE

    def __post_init__(self):
        s = np.asarray(self.states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] != self.grid.n_steps + 1 or s.shape[1] < 1:
            raise ValueError("states must have shape (n_steps + 1, q)")
        if (self.stop_index is None) != (self.stop_reason is StopReason.NONE):
            raise ValueError("stop_index and stop_reason must be set together")
        if self.stop_index is not None and not 0 <= self.stop_index <= self.grid.n_steps:
            raise ValueError("stop_index outside the grid")
        object.__setattr__(self, "states", _readonly(s))

    @property
    def dimension(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @property
    def stop_time(self) -> Optional[float]:
        return None if self.stop_index is None else self.grid.node(self.stop_index)

    def component(self, i: int) -> "SamplePath":
        """The i-th coordinate as a one-dimensional path (stop metadata kept)."""
        return SamplePath(self.grid, self.states[:, i : i + 1], self.stop_index, self.stop_reason)

    @property
    def values(self) -> np.ndarray:
        """States of a one-dimensional path as a flat array."""
        if self.dimension != 1:
            raise ValueError("values is defined for one-dimensional paths only")
        return self.states[:, 0]


@dataclass(frozen=True)
class RngStream:
    """A Philox key. Same key, same numbers, bit for bit."""

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("seed", "stream_id"):
            v = getattr(self, name)
            if int(v) != v or not 0 <= int(v) < _U64:
                raise ValueError(f"{name} must be an integer in [0, 2**64)")
            object.__setattr__(self, name, int(v))

    def path_ids(self, n: int, offset: int = 0) -> np.ndarray:
        """Stream ids of paths ``offset .. offset + n - 1`` under this stream."""
        if self.stream_id >= _U64 // PATHS_PER_STREAM:
            raise ValueError("stream_id too large to derive per-path streams")
        if offset < 0 or offset + n > PATHS_PER_STREAM:
            raise ValueError("path index out of range")
        base = np.uint64(self.stream_id * PATHS_PER_STREAM + offset)
        return base + np.arange(n, dtype=np.uint64)

    def path_stream(self, i: int) -> "RngStream":
        return RngStream(self.seed, int(self.path_ids(1, i)[0]))

    def normals(self, n: int) -> np.ndarray:
        out = np.empty(n)
        _philox.fill_normals(np.uint64(self.seed), np.uint64(self.stream_id), out)
        return out

    def numpy_generator(self) -> np.random.Generator:
        """numpy generator whose raw 64-bit words match this stream's."""
        # integer key: a list key goes through a signed array and mangles words >= 2**63
        return np.random.Generator(np.random.Philox(key=self.seed | (self.stream_id << 64)))


def resolve_workers(workers: Optional[int] = None) -> int:
    """``workers`` if given, else ``FOLLMER_LAB_WORKERS``, else the CPU count."""
    if workers is None:
        env = os.environ.get("FOLLMER_LAB_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    workers = int(workers)
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def run_chunked(task: Callable[[int, int], None], n: int, workers: Optional[int] = None, chunk: int = CHUNK):
    """Call ``task(lo, hi)`` over fixed chunks of ``range(n)``.

    Chunk boundaries do not depend on ``workers`` and each task writes only
    its own slice, so outputs are identical for any worker count.
    """
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    workers = resolve_workers(workers)
    if workers == 1 or len(bounds) == 1:
        for lo, hi in bounds:
            task(lo, hi)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for f in [pool.submit(task, lo, hi) for lo, hi in bounds]:
            f.result()


def _as_point(x0, q=None) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x0, dtype=float)).copy()
    if x.ndim != 1 or x.size < 1:
        raise ValueError("start point must be a vector")
    if q is not None and x.size != q:
        raise ValueError(f"start point must have dimension {q}")
    return x


def sample_brownian_path(x0, grid: TimeGrid, rng: RngStream) -> SamplePath:
    """Brownian path from ``x0`` on ``grid`` using stream ``rng``."""
    x = _as_point(x0)
    out = np.empty((1, grid.n_steps + 1, x.size))
    ids = np.array([rng.stream_id], dtype=np.uint64)
    _paths.brownian_paths(x, grid.dt, grid.n_steps, np.uint64(rng.seed), ids, out)
    return SamplePath(grid, out[0])


def sample_brownian_paths(x0, grid: TimeGrid, rng: RngStream, n: int, workers=None) -> np.ndarray:
    """``n`` Brownian paths, shape ``(n, n_steps + 1, q)``; path i uses ``rng.path_stream(i)``."""
    x = _as_point(x0)
    out = np.empty((n, grid.n_steps + 1, x.size))
    ids = rng.path_ids(n)

    def task(lo, hi):
        _paths.brownian_paths(x, grid.dt, grid.n_steps, np.uint64(rng.seed), ids[lo:hi], out[lo:hi])

    run_chunked(task, n, workers, chunk=max(1, min(CHUNK, 2**22 // (grid.n_steps + 1))))
    return out


def gaussian_endpoints(x0, t: float, rng: RngStream, n: int, workers=None) -> np.ndarray:
    """Exact draws of ``x0 + W_t``, shape ``(n, q)``."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = _as_point(x0)
    out = np.empty((n, x.size))
    ids = rng.path_ids(n)

    def task(lo, hi):
        _paths.gaussian_endpoints(x, t, np.uint64(rng.seed), ids[lo:hi], out[lo:hi])

    run_chunked(task, n, workers, chunk=65536)
    return out


def _check_q_start(model: HarmonicReciprocalModel, x, threshold: float):
    if not threshold > 0:
        raise ValueError("explosion_threshold must be positive")
    h0 = float(model.h(x))
    if not h0 > 0:
        raise ModelDomainError("start point lies on the zero set of h")
    if not threshold < h0:
        raise ValueError("explosion_threshold must be below h(x0)")


def _diag_or_nan(terms):
    return np.ascontiguousarray(terms.diagonal)


def simulate_q_path(
    model: HarmonicReciprocalModel,
    x0,
    grid: TimeGrid,
    rng: RngStream,
    explosion_threshold: float = DEFAULT_THRESHOLD,
    substep_c: float = DEFAULT_SUBSTEP_C,
) -> SamplePath:
    """Euler-Maruyama path of dY = dW - grad ln h(Y) dt, continued as Brownian motion after explosion.

    Explosion is the first grid node whose macro step drove h to
    ``explosion_threshold`` or below; the state recorded there is the
    substep point where that happened.
    """
    x = _as_point(x0, model.dimension)
    _check_q_start(model, x, explosion_threshold)
    if model.terms is None:
        states, stop = _q_path_python(model, x, grid, rng, explosion_threshold, substep_c)
    else:
        t = model.terms
        n = grid.n_steps
        states = np.empty((1, n + 1, x.size))
        stop_arr = np.empty(1, dtype=np.int64)
        lam = np.empty((1, n + 1))
        hs = np.empty(1)
        hp = np.empty(1)
        _paths.q_simulate(
            x, grid.t_start, grid.dt, np.arange(n + 1, dtype=np.int64), True,
            explosion_threshold, substep_c, t.weights, t.centers, t.projections, _diag_or_nan(t),
            np.uint64(rng.seed), np.array([rng.stream_id], dtype=np.uint64),
            stop_arr, states, lam, hs, hp,
        )
        states = states[0]
        stop = int(stop_arr[0])
    if stop < 0:
        return SamplePath(grid, states)
    return SamplePath(grid, states, stop, StopReason.EXPLOSION)


def _q_path_python(model, x, grid, rng, threshold, c):
    """Reference implementation for models given only as callables."""
    state = _philox.new_state(rng.seed, rng.stream_id)
    q = x.size
    z = np.empty(q)
    y = x.copy()
    n = grid.n_steps
    dt = grid.dt
    out = np.empty((n + 1, q))
    out[0] = y
    stop = -1
    grad = model.grad_ln_h(y)
    for k in range(n):
        if stop >= 0:
            _philox.draw_normals(state, z)
            y = y + math.sqrt(dt) * z
        else:
            remaining = dt
            while True:
                g2 = float(grad @ grad)
                hs, final = remaining, True
                if c < remaining * g2:
                    hs, final = c / g2, False
                _philox.draw_normals(state, z)
                y = y - grad * hs + math.sqrt(hs) * z
                h = float(model.h(y))
                if h <= threshold or final:
                    break
                grad = model.grad_ln_h(y)
                remaining -= hs
            if h <= threshold:
                stop = k + 1
            else:
                grad = model.grad_ln_h(y)
        out[k + 1] = y
    return out, stop


@dataclass(frozen=True)
class QEnsemble:
    """Per-path summaries of stopped Q-paths at a set of record times.

    ``states[p, r]`` and ``lam[p, r]`` are Y and Lambda (of the first
    coordinate, at level 0) at ``record_times[r]``, frozen at explosion.
    ``stop_index`` is the explosion node or -1.
    """

    grid: TimeGrid
    record_times: np.ndarray
    record_index: np.ndarray
    states: np.ndarray
    lam: np.ndarray
    stop_index: np.ndarray
    h_at_stop: np.ndarray
    h_before_stop: np.ndarray
    explosion_threshold: float
    substep_c: float

    @property
    def n_paths(self) -> int:
        return self.stop_index.size

    def column(self, t: float) -> int:
        hit = np.flatnonzero(np.isclose(self.record_times, t, rtol=0, atol=1e-12))
        if hit.size == 0:
            raise KeyError(f"time {t} was not recorded")
        return int(hit[0])

    def exploded_by(self, t: float) -> np.ndarray:
        k = self.record_index[self.column(t)]
        return (self.stop_index >= 0) & (self.stop_index <= k)


def simulate_q_ensemble(
    model: HarmonicReciprocalModel,
    x0,
    t_values,
    n: int,
    rng: RngStream,
    dt: float = 1e-4,
    explosion_threshold: float = DEFAULT_THRESHOLD,
    substep_c: float = DEFAULT_SUBSTEP_C,
    workers=None,
) -> QEnsemble:
    """``n`` stopped Q-paths from ``x0`` reduced to summaries at ``t_values``.

    Paths stop at explosion or at ``max(t_values)``, whichever comes first.
    Requires an inverse-distance model (``model.terms``).
    """
    if model.terms is None:
        raise ValueError("bulk Q simulation needs an inverse-distance model")
    if n < 1:
        raise ValueError("n must be positive")
    x = _as_point(x0, model.dimension)
    _check_q_start(model, x, explosion_threshold)
    times = np.sort(np.atleast_1d(np.asarray(t_values, dtype=float)))
    if times[0] <= 0:
        raise ValueError("record times must be positive")
    grid = TimeGrid.from_step(times[-1], dt)
    rec = np.array([grid.index_of(t) for t in times], dtype=np.int64)
    t = model.terms
    diag = _diag_or_nan(t)
    q = x.size
    stop = np.empty(n, dtype=np.int64)
    states = np.empty((n, rec.size, q))
    lam = np.empty((n, rec.size))
    hs = np.empty(n)
    hp = np.empty(n)
    ids = rng.path_ids(n)

    def task(lo, hi):
        _paths.q_simulate(
            x, grid.t_start, grid.dt, rec, False, explosion_threshold, substep_c,
            t.weights, t.centers, t.projections, diag, np.uint64(rng.seed), ids[lo:hi],
            stop[lo:hi], states[lo:hi], lam[lo:hi], hs[lo:hi], hp[lo:hi],
        )

    run_chunked(task, n, workers, chunk=256)
    return QEnsemble(grid, times, rec, states, lam, stop, hs, hp, explosion_threshold, substep_c)


def simulate_q_paths(
    model, x0, grid: TimeGrid, rng: RngStream, n: int,
    explosion_threshold: float = DEFAULT_THRESHOLD, substep_c: float = DEFAULT_SUBSTEP_C, workers=None,
) -> list:
    """``n`` full Q-paths (continued after explosion); path i uses ``rng.path_stream(i)``."""
    return [simulate_q_path(model, x0, grid, rng.path_stream(i), explosion_threshold, substep_c) for i in range(n)]


@dataclass(frozen=True)
class LocalTimePath:
    """Nonnegative, nondecreasing values on a grid, starting at 0."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.n_steps + 1,):
            raise ValueError("values must have one entry per grid node")
        if v[0] != 0.0:
            raise ValueError("local time must start at 0")
        if np.any(np.diff(v) < 0):
            raise ValueError("local time must be nondecreasing")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)


def _one_dimensional(path: SamplePath) -> np.ndarray:
    if path.dimension != 1:
        raise ValueError("path must be one-dimensional")
    return path.values


def tanaka_increments(x: np.ndarray, level: float = 0.0) -> np.ndarray:
    """Per-step |b-l| - |a-l| - sgn(a-l)(b-a), sgn(0) = 0."""
    a = x[:-1] - level
    b = x[1:] - level
    return np.abs(b) - np.abs(a) - np.sign(a) * (b - a)


def local_time_tanaka(path: SamplePath, level: float = 0.0) -> LocalTimePath:
    """Tanaka-formula local time at ``level``, clamped to its running maximum."""
    x = _one_dimensional(path)
    raw = np.concatenate([[0.0], np.cumsum(tanaka_increments(x, level))])
    return LocalTimePath(path.grid, np.maximum(np.maximum.accumulate(raw), 0.0))


def local_time_occupation(path: SamplePath, level: float = 0.0, bandwidth: Optional[float] = None) -> LocalTimePath:
    """Occupation-density local time: time in ``[level - b, level + b]`` over ``2b``.

    Each step contributes ``dt`` when its left node lies in the band.
    ``bandwidth`` defaults to ``sqrt(dt)``.
    """
    x = _one_dimensional(path)
    b = math.sqrt(path.grid.dt) if bandwidth is None else float(bandwidth)
    if not b > 0:
        raise ValueError("bandwidth must be positive")
    inside = np.abs(x[:-1] - level) <= b
    occ = np.concatenate([[0.0], np.cumsum(inside)]) * path.grid.dt
    return LocalTimePath(path.grid, occ / (2.0 * b))


def stochastic_integral(integrand_values: Union[np.ndarray, SamplePath], integrator: SamplePath) -> np.ndarray:
    """Cumulative left-point sums ``sum_k f(t_k) (X_{k+1} - X_k)``; entry 0 is 0."""
    x = _one_dimensional(integrator)
    if isinstance(integrand_values, SamplePath):
        if integrand_values.grid != integrator.grid:
            raise ValueError("integrand and integrator grids differ")
        f = integrand_values.values
    else:
        f = np.asarray(integrand_values, dtype=float)
    if f.shape != x.shape:
        raise ValueError("integrand must have one value per grid node")
    return np.concatenate([[0.0], np.cumsum(f[:-1] * np.diff(x))])
