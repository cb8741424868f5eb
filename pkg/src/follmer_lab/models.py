"""Harmonic-reciprocal models: positive functions h with 1/h harmonic off h = 0.

A model is evaluated through vectorized callables on arrays of shape
``(..., q)``. Built-ins are sums of inverse distances to affine subspaces,

    1/h(y) = sum_i w_i / |P_i (y - c_i)|,

with ``P_i`` an orthogonal projection; that family is closed under
superposition and is what the jitted simulators consume (``terms``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

ArrayFn = Callable[[np.ndarray], np.ndarray]


class ModelDomainError(ValueError):
    """Evaluation requested on (or too close to) the zero set of h."""


@dataclass(frozen=True)
class InverseDistanceTerms:
    """Arrays describing ``1/h = sum_i w_i / |P_i (y - c_i)|``."""

    weights: np.ndarray  # (m,)
    centers: np.ndarray  # (m, q)
    projections: np.ndarray  # (m, q, q)

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=float)
        c = np.ascontiguousarray(self.centers, dtype=float)
        p = np.ascontiguousarray(self.projections, dtype=float)
        if w.ndim != 1 or c.shape != (w.size, c.shape[-1]) or p.shape != (w.size,) + (c.shape[-1],) * 2:
            raise ValueError("inconsistent term array shapes")
        if np.any(w <= 0):
            raise ValueError("term weights must be positive")
        for proj in p:
            if not (np.allclose(proj, proj.T, atol=1e-12) and np.allclose(proj @ proj, proj, atol=1e-12)):
                raise ValueError("term projections must be symmetric and idempotent")
        for arr in (w, c, p):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "projections", p)

    @property
    def dimension(self) -> int:
        return self.centers.shape[1]

    @property
    def diagonal(self) -> np.ndarray:
        """Projection diagonals ``(m, q)`` when every projection is diagonal, else all-NaN."""
        p = self.projections
        d = np.ascontiguousarray(np.diagonal(p, axis1=1, axis2=2))
        if np.array_equal(p, d[:, :, None] * np.eye(self.dimension)):
            return d
        return np.full_like(d, np.nan)

    def offsets(self, y: np.ndarray) -> np.ndarray:
        """``P_i (y - c_i)`` with shape ``(..., m, q)``."""
        d = y[..., None, :] - self.centers
        return np.einsum("mij,...mj->...mi", self.projections, d)

    def h(self, y):
        r = np.linalg.norm(self.offsets(y), axis=-1)
        with np.errstate(divide="ignore"):
            inv = np.sum(self.weights / r, axis=-1)
        return np.where(np.isinf(inv), 0.0, 1.0 / inv)

    def grad_ln_h(self, y):
        off = self.offsets(y)
        r = np.linalg.norm(off, axis=-1)
        if np.any(r == 0.0):
            raise ModelDomainError("gradient of ln h requested on the zero set")
        inv = np.sum(self.weights / r, axis=-1)
        s = np.sum((self.weights / r**3)[..., None] * off, axis=-2)
        return s / inv[..., None]

    def zero_set_distance(self, y):
        return np.min(np.linalg.norm(self.offsets(y), axis=-1), axis=-1)


@dataclass(frozen=True)
class HarmonicReciprocalModel:
    """h, its log-gradient and its zero-set distance on R^q.

    ``terms`` is set for inverse-distance models and enables the jitted
    path simulators; models built from bare callables still work with every
    analytic check and with the (slow) pure-Python simulator.
    """

    dimension: int
    h: ArrayFn
    grad_ln_h: ArrayFn
    zero_set_distance: ArrayFn
    label: str
    terms: Optional[InverseDistanceTerms] = None

    def __call__(self, y):
        return self.h(np.asarray(y, dtype=float))

    def reciprocal(self, y):
        """``1/h(y)`` (``inf`` on the zero set)."""
        hv = self.h(np.asarray(y, dtype=float))
        with np.errstate(divide="ignore"):
            return 1.0 / hv


def from_terms(terms: InverseDistanceTerms, label: str) -> HarmonicReciprocalModel:
    return HarmonicReciprocalModel(
        dimension=terms.dimension,
        h=terms.h,
        grad_ln_h=terms.grad_ln_h,
        zero_set_distance=terms.zero_set_distance,
        label=label,
        terms=terms,
    )


def inverse_distance(center, projection=None, weight: float = 1.0, label: str = "inverse-distance"):
    """Model with ``1/h(y) = weight / |P (y - center)|``.

    1/h is harmonic exactly when P has rank 3; other ranks are accepted
    (and :func:`check_harmonic` will report them).
    """
    center = np.asarray(center, dtype=float)
    q = center.size
    proj = np.eye(q) if projection is None else np.asarray(projection, dtype=float)
    terms = InverseDistanceTerms(np.array([weight]), center[None, :], proj[None, :, :])
    return from_terms(terms, label)


def inverse_bessel3() -> HarmonicReciprocalModel:
    """h(y) = |y| on R^3; 1/h(Y) is the reciprocal of a BES(3) process."""
    return inverse_distance(np.zeros(3), label="inverse-bessel3")


def embedded_bessel4(alpha1: float, alpha2: float) -> HarmonicReciprocalModel:
    """h(y) = |(y1, y2, y3)| on R^4, the distance to the y4-axis.

    The alphas do not enter h; they select the companion shrinkage map
    (see :func:`follmer_lab.kernels.example2_shrinkage`) and are kept in the
    label so a configuration is self-describing. Zero alphas belong to the
    counterexample, built with :func:`counterexample_bessel4`.
    """
    if alpha1 == 0 or alpha2 == 0:
        raise ValueError("alpha1 and alpha2 must be nonzero; use counterexample_bessel4()")
    return inverse_distance(
        np.zeros(4), np.diag([1.0, 1.0, 1.0, 0.0]), label=f"embedded-bessel4({alpha1:g},{alpha2:g})"
    )


def counterexample_bessel4() -> HarmonicReciprocalModel:
    return inverse_distance(np.zeros(4), np.diag([1.0, 1.0, 1.0, 0.0]), label="embedded-bessel4(0,0)")


def superpose(models: Sequence[HarmonicReciprocalModel], label: Optional[str] = None) -> HarmonicReciprocalModel:
    """Model with ``1/h = 1/h_1 + ... + 1/h_m``, extended by h = 0 on the union of zero sets."""
    models = list(models)
    if not models:
        raise ValueError("superpose() needs at least one model")
    q = models[0].dimension
    if any(m.dimension != q for m in models):
        raise ValueError("all superposed models must share one dimension")
    label = label or "+".join(m.label for m in models)
    if len(models) == 1:
        m = models[0]
        return HarmonicReciprocalModel(q, m.h, m.grad_ln_h, m.zero_set_distance, label, m.terms)

    if all(m.terms is not None for m in models):
        terms = InverseDistanceTerms(
            np.concatenate([m.terms.weights for m in models]),
            np.concatenate([m.terms.centers for m in models]),
            np.concatenate([m.terms.projections for m in models]),
        )
        return from_terms(terms, label)

    def inv_h(y):
        with np.errstate(divide="ignore"):
            return sum(1.0 / m.h(y) for m in models)

    def h(y):
        inv = inv_h(y)
        return np.where(np.isinf(inv), 0.0, 1.0 / inv)

    def grad_ln_h(y):
        # (1/h) grad ln h = sum_i (1/h_i) grad ln h_i
        s = sum(m.grad_ln_h(y) / m.h(y)[..., None] for m in models)
        return h(y)[..., None] * s

    def zero_set_distance(y):
        return np.min(np.stack([m.zero_set_distance(y) for m in models]), axis=0)

    return HarmonicReciprocalModel(q, h, grad_ln_h, zero_set_distance, label)


def check_harmonic(model: HarmonicReciprocalModel, point, step: float = 1e-3) -> float:
    """Central-difference Laplacian of 1/h at ``point``.

    Raises :class:`ModelDomainError` when the stencil could touch the zero
    set, i.e. when ``h(point) <= step * |grad h(point)|``.
    """
    y = np.asarray(point, dtype=float)
    hv = float(model.h(y))
    if hv <= 0 or hv <= step * hv * float(np.linalg.norm(model.grad_ln_h(y))):
        raise ModelDomainError("point too close to the zero set for this stencil")
    q = y.size
    shifts = np.concatenate([np.eye(q), -np.eye(q)]) * step
    vals = 1.0 / model.h(y + shifts)
    return float((vals.sum() - 2 * q / hv) / step**2)


BUILTIN_START = {
    "inverse-bessel3": (1.0, 0.0, 0.0),
    "embedded-bessel4": (1.0, 0.0, 0.0, 0.0),
}


def model_from_label(label: str, alpha=None) -> HarmonicReciprocalModel:
    if label == "inverse-bessel3":
        return inverse_bessel3()
    if label == "embedded-bessel4":
        a1, a2 = alpha if alpha is not None else (1.0, 1.0)
        if a1 == 0 and a2 == 0:
            return counterexample_bessel4()
        return embedded_bessel4(a1, a2)
    raise ValueError(f"unknown model label {label!r}")
