"""Projection of N onto the first-coordinate filtration (Example 1) and the
extraction of its multiplicative finite-variation part Lambda.

With X = Y1 a Brownian motion from 1, the projection is S_t = u(t, X_t) and

    S_t = 1 + int_0^t u_x(s, X_s) dX_s - int_0^t (1/s) dL0_s.

The additive part dA = (1/t) dL0 charges only {X = 0}, where S = u(t, 0) =
sqrt(pi / 2t); the multiplicative part therefore has dLambda = dA / S =
sqrt(2 / (pi t)) dL0.

Local-time increments between nodes k-1 and k are attributed to node k
and weighted at t_k, never below the first positive node.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .kernels import u_kernel, u_kernel_dx_nodes
from .measures import McEstimate, MeasureTag
from .models import HarmonicReciprocalModel
from .stochastics import (
    DEFAULT_THRESHOLD,
    LocalTimePath,
    QEnsemble,
    RngStream,
    SamplePath,
    TimeGrid,
    local_time_tanaka,
    run_chunked,
    simulate_q_ensemble,
    stochastic_integral,
)
from . import _paths

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_START_TOL = 1e-12


@dataclass(frozen=True)
class DecompositionRecord:
    grid: TimeGrid
    projected: np.ndarray
    additive_fv: np.ndarray
    lambda_: np.ndarray
    local_time: LocalTimePath
    martingale_residual: np.ndarray

    def __post_init__(self):
        n = self.grid.n_steps + 1
        for name in ("projected", "additive_fv", "lambda_", "martingale_residual"):
            a = np.ascontiguousarray(getattr(self, name), dtype=float)
            if a.shape != (n,):
                raise ValueError(f"{name} must have one value per grid node")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        if self.local_time.grid != self.grid:
            raise ValueError("local time lives on a different grid")


def _unit_path(x_path: SamplePath) -> np.ndarray:
    if x_path.dimension != 1:
        raise ValueError("x_path must be one-dimensional")
    if x_path.grid.t_start != 0:
        raise ValueError("x_path must start at time 0")
    x = x_path.values
    if abs(x[0] - 1.0) > _START_TOL:
        raise ValueError("x_path must start at 1")
    return x


def _weight_times(grid: TimeGrid) -> np.ndarray:
    """Time attached to the increment ending at node k (k >= 1), floored at the first positive node."""
    t = grid.times[1:]
    return np.maximum(t, t[t > 0][0])


def project_path(x_path: SamplePath) -> np.ndarray:
    """S_k = u(t_k, X_k) for k >= 1 and S_0 = 1."""
    x = _unit_path(x_path)
    s = np.empty_like(x)
    s[0] = 1.0
    s[1:] = u_kernel(x_path.grid.times[1:], x[1:])
    return s


def additive_from_local_time(local_time: LocalTimePath) -> np.ndarray:
    """A_k = sum_{j <= k} (1 / t_j) dL_j."""
    w = 1.0 / _weight_times(local_time.grid)
    return np.concatenate([[0.0], np.cumsum(w * local_time.increments)])


def lambda_from_local_time(local_time: LocalTimePath) -> np.ndarray:
    """Lambda_k = sum_{j <= k} sqrt(2 / (pi t_j)) dL_j."""
    w = SQRT_2_OVER_PI / np.sqrt(_weight_times(local_time.grid))
    return np.concatenate([[0.0], np.cumsum(w * local_time.increments)])


def lambda_from_additive(additive_fv, projected_at_charge) -> np.ndarray:
    """The general rule dLambda = dA / S, with S taken where dA charges.

    ``projected_at_charge[k]`` is S at the point where the increment ending
    at node k charges (u(t_k, 0) for Example 1, where dA lives on X = 0).
    """
    a = np.asarray(additive_fv, dtype=float)
    s = np.asarray(projected_at_charge, dtype=float)
    d = np.diff(a)
    if np.any(d < 0):
        raise ValueError("additive part must be nondecreasing")
    ratio = np.divide(d, s[1:], out=np.zeros_like(d), where=d > 0)
    return np.concatenate([[0.0], np.cumsum(ratio)])


def ito_tanaka_residual(x_path: SamplePath, strict: bool = True) -> np.ndarray:
    """u(t, X_t) - [1 + int u_x dX - int (1/s) dL0] along the grid.

    u_x uses the node conventions of :func:`follmer_lab.kernels.u_kernel_dx_nodes`.
    With ``strict`` the grid must have dt <= 1e-3; coarser grids are only
    meaningful for convergence studies.
    """
    x = _unit_path(x_path)
    if strict and x_path.grid.dt > 1e-3 * (1 + 1e-12):
        raise ValueError("ito_tanaka_residual needs dt <= 1e-3 (pass strict=False for coarse grids)")
    s = project_path(x_path)
    ux = u_kernel_dx_nodes(x_path.grid.times, x)
    a = additive_from_local_time(local_time_tanaka(x_path, 0.0))
    return s - (1.0 + stochastic_integral(ux, x_path) - a)


def extract_lambda(x_path: SamplePath, local_time: Optional[LocalTimePath] = None) -> DecompositionRecord:
    """Local time, additive and multiplicative parts and the Ito-Tanaka residual of one path."""
    x = _unit_path(x_path)
    lt = local_time_tanaka(x_path, 0.0) if local_time is None else local_time
    if lt.grid != x_path.grid:
        raise ValueError("local time lives on a different grid")
    s = project_path(x_path)
    a = additive_from_local_time(lt)
    ux = u_kernel_dx_nodes(x_path.grid.times, x)
    resid = s - (1.0 + stochastic_integral(ux, x_path) - a)
    return DecompositionRecord(x_path.grid, s, a, lambda_from_local_time(lt), lt, resid)


def _window_end(record: DecompositionRecord, x_path: SamplePath) -> int:
    """Last node of the analysis window: the stop node if the path was stopped."""
    return record.grid.n_steps if x_path.stop_index is None else x_path.stop_index


def lambda_support_stats(record: DecompositionRecord, x_path: SamplePath, epsilon: float) -> float:
    """Share of Lambda-mass charged by steps whose left node has |X| > epsilon.

    The window ends at the stop node when the path was stopped; 0 if
    Lambda carries no mass there.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if x_path.grid != record.grid or x_path.dimension != 1:
        raise ValueError("record and path must share a one-dimensional grid")
    end = _window_end(record, x_path)
    d = np.diff(record.lambda_[: end + 1])
    total = d.sum()
    if total <= 0:
        return 0.0
    far = np.abs(x_path.values[:end]) > epsilon
    return float(d[far].sum() / total)


@dataclass(frozen=True)
class SingularityProxy:
    """Time spent in the band |X| <= epsilon (as a share of the horizon) and the Lambda-mass charged there."""

    time_fraction: float
    mass_fraction: float


def singularity_proxy(record: DecompositionRecord, x_path: SamplePath, epsilon: float) -> SingularityProxy:
    """Lebesgue size of the band {|X| <= epsilon} before the window end, relative to the horizon.

    A small time fraction with a mass fraction near 1 says Lambda lives on
    a thin set of times.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    end = _window_end(record, x_path)
    if end == 0:
        return SingularityProxy(0.0, 0.0)
    near = np.abs(x_path.values[:end]) <= epsilon
    d = np.diff(record.lambda_[: end + 1])
    total = d.sum()
    return SingularityProxy(float(near.sum() / record.grid.n_steps), float(d[near].sum() / total) if total > 0 else 0.0)


def compensator_check(
    model: HarmonicReciprocalModel, t: float, n: int, rng: RngStream,
    explosion_threshold: float = DEFAULT_THRESHOLD, dt: float = 1e-4, start=(1.0, 0.0, 0.0),
    workers=None, ensemble: Optional[QEnsemble] = None,
):
    """(Q(tau <= t), E^Q[Lambda_{t ^ tau}]) with Lambda built on X = Y1 of Q-paths."""
    if ensemble is None:
        ensemble = simulate_q_ensemble(model, start, [t], n, rng, dt, explosion_threshold, workers=workers)
    j = ensemble.column(t)
    th = ensemble.explosion_threshold
    hit = McEstimate.from_samples(ensemble.exploded_by(t), MeasureTag.Q, th)
    lam = McEstimate.from_samples(ensemble.lam[:, j], MeasureTag.Q, th)
    return hit, lam


def ndec_factor_check(t: float, n: int, rng: RngStream, dt: float = 1e-4, workers=None) -> McEstimate:
    """Mean of e^{Lambda_t} u(t, X_t) over Brownian paths X from 1."""
    grid = TimeGrid.from_step(t, dt)
    x = np.empty(n)
    lam = np.empty(n)
    ids = rng.path_ids(n)

    def task(lo, hi):
        _paths.brownian_lambda_bulk(1.0, 0.0, grid.dt, grid.n_steps, np.uint64(rng.seed), ids[lo:hi], x[lo:hi], lam[lo:hi])

    run_chunked(task, n, workers, chunk=256)
    return McEstimate.from_samples(np.exp(lam) * u_kernel(t, x))
