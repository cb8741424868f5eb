"""Monte Carlo engines under Wiener measure P and the Föllmer measure Q.

P-side functionals of Y_t use exact Gaussian draws. Q-side functionals come
from :func:`follmer_lab.stochastics.simulate_q_ensemble` and carry the
explosion threshold that defines the stopping rule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .kernels import normal_cdf
from .models import HarmonicReciprocalModel
from .stochastics import (
    DEFAULT_THRESHOLD,
    QEnsemble,
    RngStream,
    gaussian_endpoints,
    simulate_q_ensemble,
)


class MeasureTag(enum.Enum):
    P = "P"
    Q = "Q"


@dataclass(frozen=True)
class McEstimate:
    """Sample mean with stderr = sample sd / sqrt(n)."""

    mean: float
    stderr: float
    n_paths: int
    measure: MeasureTag = MeasureTag.P
    explosion_threshold: Optional[float] = None

    def __post_init__(self):
        if self.n_paths < 2:
            raise ValueError("an estimate needs at least two paths")
        if not self.stderr >= 0:
            raise ValueError("stderr must be nonnegative")
        if self.measure is MeasureTag.Q and self.explosion_threshold is None:
            raise ValueError("Q estimates must record their explosion threshold")

    @classmethod
    def from_samples(cls, samples, measure: MeasureTag = MeasureTag.P, explosion_threshold=None) -> "McEstimate":
        x = np.asarray(samples, dtype=float).ravel()
        n = x.size
        if n < 2:
            raise ValueError("an estimate needs at least two samples")
        return cls(float(x.mean()), float(x.std(ddof=1) / math.sqrt(n)), n, measure, explosion_threshold)

    def combined_stderr(self, other: "McEstimate") -> float:
        return math.hypot(self.stderr, other.stderr)

    def agrees_with(self, value: float, k: float = 3.0, allowance: float = 0.0) -> bool:
        return abs(self.mean - value) <= k * self.stderr + allowance


def _unit_start(model: HarmonicReciprocalModel, start) -> np.ndarray:
    x = np.asarray(start, dtype=float)
    h0 = float(model.h(x))
    if abs(h0 - 1.0) > 1e-12:
        raise ValueError(f"start point must satisfy h(start) = 1, got {h0}")
    return x


def mass_loss(model: HarmonicReciprocalModel, start, t: float, n: int, rng: RngStream, workers=None) -> McEstimate:
    """E^P[N_t] = E^P[1/h(Y_t)] from exact draws of Y_t."""
    x = _unit_start(model, start)
    y = gaussian_endpoints(x, t, rng, n, workers)
    return McEstimate.from_samples(model.reciprocal(y))


def _ensemble(model, start, t_values, n, rng, explosion_threshold, dt, workers, ensemble):
    if ensemble is not None:
        for t in np.atleast_1d(t_values):
            ensemble.column(t)
        return ensemble
    x = _unit_start(model, start)
    return simulate_q_ensemble(model, x, t_values, n, rng, dt, explosion_threshold, workers=workers)


def survival_q(
    model, start, t: float, n: int, rng: RngStream, explosion_threshold: float = DEFAULT_THRESHOLD,
    dt: float = 1e-4, workers=None, ensemble: Optional[QEnsemble] = None,
) -> McEstimate:
    """Q(tau > t): fraction of Q-paths not exploded by t (binomial stderr)."""
    ens = _ensemble(model, start, [t], n, rng, explosion_threshold, dt, workers, ensemble)
    alive = ~ens.exploded_by(t)
    return McEstimate.from_samples(alive, MeasureTag.Q, ens.explosion_threshold)


def density_identity_check(
    model, start, t: float, c: float, n: int, rng: RngStream, explosion_threshold: float = DEFAULT_THRESHOLD,
    dt: float = 1e-4, workers=None, ensemble: Optional[QEnsemble] = None,
):
    """(E^Q[M_t 1{Y1_t > c}], P(Y1_t > c)).

    M_t = h(Y_t) on {tau > t} and 0 after explosion. The P side is exact,
    returned as an estimate with zero stderr.
    """
    ens = _ensemble(model, start, [t], n, rng, explosion_threshold, dt, workers, ensemble)
    j = ens.column(t)
    y = ens.states[:, j]
    alive = ~ens.exploded_by(t)
    m = np.where(alive, model.h(y), 0.0)
    lhs = McEstimate.from_samples(m * (y[:, 0] > c), MeasureTag.Q, ens.explosion_threshold)
    x0 = float(np.asarray(start, dtype=float)[0])
    rhs = McEstimate(float(1 - normal_cdf((c - x0) / math.sqrt(t))), 0.0, ens.n_paths)
    return lhs, rhs


def radius_martingale_check(
    model, start, t: float, n: int, rng: RngStream, explosion_threshold: float = DEFAULT_THRESHOLD,
    dt: float = 1e-4, workers=None, ensemble: Optional[QEnsemble] = None,
) -> McEstimate:
    """E^Q[h(Y_{t ^ tau})]; equals h(start) when h(Y) is Q-Brownian up to tau (the Bessel models)."""
    ens = _ensemble(model, start, [t], n, rng, explosion_threshold, dt, workers, ensemble)
    return McEstimate.from_samples(model.h(ens.states[:, ens.column(t)]), MeasureTag.Q, ens.explosion_threshold)


@dataclass(frozen=True)
class NoJumpReport:
    """Per threshold: h at explosion on each path (NaN if none) and summaries."""

    thresholds: np.ndarray
    dt: float
    h_at_explosion: tuple
    h_before_explosion: tuple
    median_h: np.ndarray
    exploded: np.ndarray
    far_fraction: np.ndarray


def no_jump_to_infinity_check(
    model, start, horizon: float, n: int, rng: RngStream, explosion_thresholds: Sequence[float],
    dt: float = 1e-4, workers=None, far_factor: float = 10.0,
) -> NoJumpReport:
    """Record h at the explosion node for each threshold of a decreasing sequence.

    ``far_fraction`` is the share of exploding paths whose h at the last
    macro node before explosion exceeded ``far_factor * threshold``; it
    measures how far a single grid step can carry a path toward the zero set.
    """
    th = np.asarray(explosion_thresholds, dtype=float)
    if th.ndim != 1 or th.size < 1 or np.any(np.diff(th) >= 0) or np.any(th <= 0):
        raise ValueError("explosion thresholds must be a positive decreasing sequence")
    x = _unit_start(model, start)
    h_stop, h_prev, med, cnt, far = [], [], [], [], []
    for c in th:
        ens = simulate_q_ensemble(model, x, [horizon], n, rng, dt, float(c), workers=workers)
        hit = ens.stop_index >= 0
        h_stop.append(ens.h_at_stop)
        h_prev.append(ens.h_before_stop)
        cnt.append(int(hit.sum()))
        med.append(float(np.median(ens.h_at_stop[hit])) if hit.any() else math.nan)
        far.append(float(np.mean(ens.h_before_stop[hit] > far_factor * c)) if hit.any() else math.nan)
    return NoJumpReport(th, dt, tuple(h_stop), tuple(h_prev), np.array(med), np.array(cnt), np.array(far))
