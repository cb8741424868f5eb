"""Closed forms and quadratures: Normal functions, the projection kernel u,
Gaussian conditioning under a linear shrinkage map, and the conditional
functionals F of the worked examples.

Example 1 projects Y in R^3 (from (1,0,0)) onto its first coordinate.
Example 2 maps Y in R^4 (from (1,0,0,0)) to (Y1 + a1 Y4, Y2 + a2 Y4).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import integrate, special

from .models import HarmonicReciprocalModel
from .stochastics import RngStream, gaussian_endpoints

SQRT_2PI = math.sqrt(2.0 * math.pi)
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
QUAD_EPSABS = 1e-13
QUAD_EPSREL = 1e-11
QUAD_LIMIT = 500


class QuadratureError(RuntimeError):
    """An adaptive quadrature did not reach its tolerance."""


def normal_cdf(x):
    return special.ndtr(x)


def normal_pdf(x):
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / SQRT_2PI


def mills_ratio(z):
    """(1 - Phi(z)) / phi(z), overflow-free for all z via the scaled erfc."""
    return math.sqrt(math.pi / 2.0) * special.erfcx(np.asarray(z, dtype=float) / math.sqrt(2.0))


def _positive_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(~(t > 0)):
        raise ValueError("t must be positive")
    return t


def u_kernel(t, x):
    """u(t, x) = sqrt(2 pi / t) exp(x^2 / 2t) (1 - Phi(|x| / sqrt t)) = Mills(|x|/sqrt t) / sqrt t."""
    t = _positive_time(t)
    x = np.asarray(x, dtype=float)
    out = mills_ratio(np.abs(x) / np.sqrt(t)) / np.sqrt(t)
    return out[()] if np.ndim(out) == 0 else out


def u_kernel_dx(t, x):
    """Partial derivative of u in x, for x != 0: sgn(x) (z Mills(z) - 1) / t with z = |x|/sqrt t."""
    t = _positive_time(t)
    x = np.asarray(x, dtype=float)
    if np.any(x == 0):
        raise ValueError("u_x is not defined at the kink x = 0")
    z = np.abs(x) / np.sqrt(t)
    out = np.sign(x) * (z * mills_ratio(z) - 1.0) / t
    return out[()] if np.ndim(out) == 0 else out


def u_kernel_dx_nodes(t, x):
    """u_x with the conventions used in discrete Ito sums.

    u_x(s, 0) := 0 at the kink, and at s = 0 the limit -sgn(x) / x^2
    (the derivative of 1/|x|, to which u(s, x) tends as s -> 0).
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    t, x = np.broadcast_arrays(t, x)
    out = np.zeros(x.shape)
    live = x != 0
    pos = live & (t > 0)
    out[pos] = u_kernel_dx(t[pos], x[pos])
    zero_t = live & (t == 0)
    out[zero_t] = -np.sign(x[zero_t]) / x[zero_t] ** 2
    return out


def folded_normal_mean(mu: float, sigma: float) -> float:
    """E|X| for X ~ N(mu, sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return abs(mu)
    return float(sigma * SQRT_2_OVER_PI * math.exp(-mu * mu / (2 * sigma * sigma)) + mu * (1 - 2 * normal_cdf(-mu / sigma)))


# --- linear shrinkage and Gaussian conditioning -----------------------------


@dataclass(frozen=True)
class LinearShrinkage:
    """A linear map pi on R^q with rank p < q.

    ``image_basis`` (q, p) has orthonormal columns spanning D = pi(R^q);
    points of D are given either as q-vectors or as p coordinates in this
    basis. ``d0_basis`` (q, k) spans D0 = pi(E0) when E0 is a linear
    subspace; k = 0 encodes D0 = {0}.
    """

    matrix: np.ndarray
    pseudoinverse: np.ndarray
    rank: int
    image_basis: np.ndarray
    d0_basis: np.ndarray

    @classmethod
    def from_matrix(cls, matrix, image_basis=None, zero_set_basis=None) -> "LinearShrinkage":
        """Build from pi; ``zero_set_basis`` (q, k) spans E0 (``None`` for E0 = {0})."""
        a = np.array(matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("pi must be a square matrix")
        q = a.shape[0]
        pinv = np.linalg.pinv(a)
        rank = int(np.linalg.matrix_rank(a))
        if rank >= q:
            raise ValueError("pi must be rank deficient (a genuine shrinkage)")
        if image_basis is None:
            u, _, _ = np.linalg.svd(a)
            basis = u[:, :rank]
        else:
            basis = np.array(image_basis, dtype=float).reshape(q, -1)
            if basis.shape[1] != rank or not np.allclose(basis.T @ basis, np.eye(rank), atol=1e-12):
                raise ValueError("image_basis must be orthonormal with rank columns")
            if not np.allclose(basis @ (basis.T @ a), a, atol=1e-12):
                raise ValueError("image_basis does not span the image of pi")
        if zero_set_basis is None:
            d0 = np.zeros((q, 0))
        else:
            d0 = a @ np.array(zero_set_basis, dtype=float).reshape(q, -1)
            d0 = d0[:, np.linalg.norm(d0, axis=0) > 1e-14]
            if d0.shape[1]:
                uu, ss, _ = np.linalg.svd(d0, full_matrices=False)
                d0 = uu[:, ss > 1e-12 * ss[0]]
        arrays = []
        for arr in (a, pinv, basis, d0):
            arr = np.ascontiguousarray(arr)
            arr.setflags(write=False)
            arrays.append(arr)
        return cls(arrays[0], arrays[1], rank, arrays[2], arrays[3])

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    @property
    def row_projection(self) -> np.ndarray:
        """pi+ pi, the orthogonal projection onto the row space of pi."""
        return self.pseudoinverse @ self.matrix

    def embed(self, coords) -> np.ndarray:
        """q-vector of the point of D with the given image-basis coordinates."""
        return np.asarray(coords, dtype=float) @ self.image_basis.T

    def coordinates(self, point) -> np.ndarray:
        return np.asarray(point, dtype=float) @ self.image_basis

    def apply(self, y) -> np.ndarray:
        return np.asarray(y, dtype=float) @ self.matrix.T

    def distance_to_d0(self, coords) -> np.ndarray:
        """Distance from image-basis coordinates to D0."""
        p = self.embed(coords)
        if self.d0_basis.shape[1]:
            p = p - (p @ self.d0_basis) @ self.d0_basis.T
        return np.linalg.norm(p, axis=-1)


def example1_shrinkage() -> LinearShrinkage:
    """pi(y) = (y1, 0, 0) on R^3; D = R, D0 = {0}."""
    e1 = np.eye(3)[:, :1]
    return LinearShrinkage.from_matrix(np.diag([1.0, 0.0, 0.0]), image_basis=e1)


def example2_matrix(alpha1: float, alpha2: float) -> np.ndarray:
    return np.array(
        [[1.0, 0.0, 0.0, alpha1], [0.0, 1.0, 0.0, alpha2], [0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]
    )


def example2_shrinkage(alpha1: float, alpha2: float, allow_zero: bool = False) -> LinearShrinkage:
    """pi(y) = (y1 + a1 y4, y2 + a2 y4, 0, 0); D = R^2, D0 = the line through (a1, a2).

    Zero alphas give the counterexample map and need ``allow_zero``.
    """
    if not allow_zero and (alpha1 == 0 or alpha2 == 0):
        raise ValueError("alpha1 and alpha2 must be nonzero")
    return LinearShrinkage.from_matrix(
        example2_matrix(alpha1, alpha2), image_basis=np.eye(4)[:, :2], zero_set_basis=np.eye(4)[:, 3:]
    )


@dataclass(frozen=True)
class ConditionalGaussian:
    cond_mean: np.ndarray
    cond_cov: np.ndarray

    def __post_init__(self):
        m = np.array(self.cond_mean, dtype=float)
        c = np.array(self.cond_cov, dtype=float)
        if c.shape != (m.size, m.size) or not np.allclose(c, c.T, atol=1e-12):
            raise ValueError("cond_cov must be a symmetric q x q matrix")
        if np.linalg.eigvalsh(c).min() < -1e-10 * max(1.0, np.abs(c).max()):
            raise ValueError("cond_cov must be positive semidefinite")
        for a in (m, c):
            a.setflags(write=False)
        object.__setattr__(self, "cond_mean", m)
        object.__setattr__(self, "cond_cov", c)

    def marginal(self, i: int):
        """(mean, variance) of coordinate i."""
        return float(self.cond_mean[i]), float(self.cond_cov[i, i])


def gaussian_condition(shrinkage: LinearShrinkage, start, t: float, observed) -> ConditionalGaussian:
    """Law of Y_t ~ N(start, t I) given pi(Y_t) = observed (a q-vector in D).

    With P = pi+ pi the orthogonal projection onto the row space, P Y_t is
    pinned to pi+ observed and (I - P) Y_t keeps its unconditional law.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    obs = np.asarray(observed, dtype=float)
    start = np.asarray(start, dtype=float)
    q = shrinkage.dimension
    if obs.shape != (q,) or start.shape != (q,):
        raise ValueError(f"start and observed must be vectors of length {q}")
    a, pinv = shrinkage.matrix, shrinkage.pseudoinverse
    if np.linalg.norm(a @ (pinv @ obs) - obs) > 1e-9:
        raise ValueError("observed point is outside the image of pi")
    comp = np.eye(q) - pinv @ a
    cov = t * comp
    return ConditionalGaussian(pinv @ obs + comp @ start, 0.5 * (cov + cov.T))


def schur_condition(mean, cov, observe_matrix, observed):
    """Generic Gaussian conditioning of N(mean, cov) on ``observe_matrix @ Y = observed``.

    Uses the Schur complement with a pseudoinverse of the observed block;
    an independent route to :func:`gaussian_condition`.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    b = np.asarray(observe_matrix, dtype=float)
    s = b @ cov @ b.T
    gain = cov @ b.T @ np.linalg.pinv(s)
    return mean + gain @ (np.asarray(observed, dtype=float) - b @ mean), cov - gain @ b @ cov


# --- Example 1 ---------------------------------------------------------------


def _quad(f, a, b, points=None):
    val, err, *rest = integrate.quad(
        f, a, b, epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=QUAD_LIMIT, points=points, full_output=1
    )
    if len(rest) > 1 and "Warning" in str(rest[1]) or err > max(1e-9 * abs(val), 1e-12):
        raise QuadratureError(f"quad did not converge on [{a}, {b}] (value {val}, error {err})")
    return val


def f_example1(t: float, x: float) -> float:
    """F(t, x) = E[|x| / (x^2 + Z)^{3/2}] with Z = (Y2_t)^2 + (Y3_t)^2 ~ t chi^2_2.

    Adaptive quadrature against the density exp(-z/2t)/(2t), directly at
    the given t. With z = x^2 w the integrand becomes
    (1 + w)^{-3/2} exp(-x^2 w / 2t) / (2t), free of the x^{-2} scale.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    ax = abs(float(x))
    if ax == 0:
        return 0.0
    c = ax * ax / (2 * t)

    def f(w):
        return (1.0 + w) ** -1.5 * math.exp(-c * w) / (2 * t)

    # geometric knots out to c w = 50, where the exponential factor is negligible;
    # quad's map of a half line otherwise misses a cutoff far from its start
    top = min(50.0 / c, 1e300) if c > 0 else 1e300
    knots = [0.0]
    k = 1.0
    while k < top:
        knots.append(k)
        k *= 10
    knots.append(top)
    total = sum(_quad(f, a, b) for a, b in zip(knots, knots[1:]))
    return total + _quad(f, top, np.inf)


def f_example1_closed(t: float, x: float) -> float:
    """Closed form t^{-1} (1 - z Mills(z)) with z = |x|/sqrt t; 0 at x = 0."""
    if not t > 0:
        raise ValueError("t must be positive")
    if x == 0:
        return 0.0
    z = abs(x) / math.sqrt(t)
    return float((1.0 - z * mills_ratio(z)) / t)


# --- Example 2 ---------------------------------------------------------------


def inverse_cube_mean(rho2: float, t: float) -> float:
    """E[(rho^2 + V^2)^{-3/2}] for V ~ N(0, t), via modified Bessel functions.

    Equals (p / sqrt(2 pi t)) (K1e(s) - K0e(s)) with p = 1/(2t), s = rho^2 / (4t).
    """
    if rho2 <= 0:
        return math.inf
    s = rho2 / (4 * t)
    p = 1.0 / (2 * t)
    if s > 1e4:
        # asymptotic series, the Bessel difference cancels badly out here
        return (rho2 ** -1.5) * (1 - 1.5 * t / rho2 + 45 * t * t / (8 * rho2 * rho2))
    return float(p / math.sqrt(2 * math.pi * t) * (special.k1e(s) - special.k0e(s)))


def _fiber(shrinkage: LinearShrinkage, start, t, x):
    """Conditional law of Y4 and the affine map b -> (Y1, Y2) on the fiber."""
    obs = shrinkage.embed(x)
    cg = gaussian_condition(shrinkage, start, t, obs)
    m4, v4 = cg.marginal(3)
    a1, a2 = shrinkage.matrix[0, 3], shrinkage.matrix[1, 3]
    return m4, v4, (x[0], -a1), (x[1], -a2)


def f_example2(t: float, x, alpha=(1.0, 1.0), start=(1.0, 0.0, 0.0, 0.0), allow_zero: bool = False):
    """(F1, F2)(t, x) with F_i = E[|Y^i_t| / |Ybar_t|^3 | pi(Y_t) = x], Ybar = (Y1, Y2, Y3).

    Given pi(Y_t) = x the point (Y1, Y2) moves on a line parameterized by
    b = Y4 (Gaussian), while Y3 ~ N(0, t) is independent; the Y3 average is
    done in closed form (:func:`inverse_cube_mean`) and the b average by
    adaptive quadrature. The value is +inf on D0 = {lambda alpha}, where
    the fiber meets the y4-axis and the integrand has a 1/|b - b*| pole.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    a1, a2 = float(alpha[0]), float(alpha[1])
    sh = example2_shrinkage(a1, a2, allow_zero=allow_zero)
    m4, v4, (c1, d1), (c2, d2) = _fiber(sh, np.asarray(start, dtype=float), t, x)
    # rho^2(b) = (c1 + d1 b)^2 + (c2 + d2 b)^2, minimized at b*
    dd = d1 * d1 + d2 * d2
    b_star = -(c1 * d1 + c2 * d2) / dd if dd > 0 else m4
    rho2_min = (c1 + d1 * b_star) ** 2 + (c2 + d2 * b_star) ** 2
    if dd > 0 and rho2_min <= 1e-30 * max(1.0, c1 * c1 + c2 * c2):
        return (math.inf, math.inf)
    sd = math.sqrt(v4)
    if sd == 0:
        rho2 = c1 * c1 + c2 * c2
        g = inverse_cube_mean(rho2, t)
        return (abs(c1) * g, abs(c2) * g)
    norm = 1.0 / (sd * SQRT_2PI)

    def integrand(b, c, d):
        rho2 = (c1 + d1 * b) ** 2 + (c2 + d2 * b) ** 2
        return abs(c + d * b) * inverse_cube_mean(rho2, t) * norm * math.exp(-0.5 * ((b - m4) / sd) ** 2)

    lo, hi = m4 - 14 * sd, m4 + 14 * sd
    out = []
    for c, d in ((c1, d1), (c2, d2)):
        knots = [lo, m4, hi]
        if dd > 0 and lo < b_star < hi:
            knots.append(b_star)
            # the integrand varies on the scale of rho_min near b*
            w = math.sqrt(rho2_min / dd)
            knots += [b for b in (b_star - w, b_star + w) if lo < b < hi]
        if d != 0 and lo < -c / d < hi:
            knots.append(-c / d)
        knots = sorted(set(knots))
        out.append(sum(_quad(lambda b: integrand(b, c, d), a, bb) for a, bb in zip(knots, knots[1:])))
    return tuple(out)


def f_counterexample(t: float, x) -> tuple:
    """(F1, F2) for the alpha = (0, 0) map, where Y1 = x1, Y2 = x2 are pinned.

    F_i = |x_i| E[(|x|^2 + V^2)^{-3/2}], V ~ N(0, t).
    """
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    g = inverse_cube_mean(float(x @ x), t)
    return (abs(x[0]) * g, abs(x[1]) * g)


def example2_moments(alpha, x, t: float = 1.0, start=(1.0, 0.0, 0.0, 0.0)):
    """Conditional (mu_i, sigma_i^2), i = 1, 2, of Y^i_t given pi(Y_t) = x."""
    sh = example2_shrinkage(alpha[0], alpha[1])
    cg = gaussian_condition(sh, np.asarray(start, dtype=float), t, sh.embed(x))
    return [cg.marginal(i) for i in (0, 1)]


def example2_bound(alpha, x, i: int) -> float:
    """sqrt(2/pi)/sigma_i + E|N(mu_i, sigma_i^2)|, the majorant claimed for F_i(1, x)."""
    mu, var = example2_moments(alpha, x)[i - 1]
    sigma = math.sqrt(var)
    return SQRT_2_OVER_PI / sigma + folded_normal_mean(mu, sigma)


def fi1_majorant(x, alpha, i: int, cutoff: float) -> float:
    """E[|U| / (U^2 + V^2)^{3/2}; U^2 + V^2 > cutoff^2] with U ~ N(mu_i, sigma_i^2), V ~ N(0, 1) independent.

    This is the intermediate majorant of F_i(1, x) with the disc of radius
    ``cutoff`` removed; it grows like log(1/cutoff), so without the cutoff
    it is infinite for every x.
    """
    if not cutoff > 0:
        raise ValueError("cutoff must be positive")
    mu, var = example2_moments(alpha, x)[i - 1]
    s = math.sqrt(var)

    def dens(u, v):
        return math.exp(-0.5 * ((u - mu) / s) ** 2 - 0.5 * v * v) / (2 * math.pi * s)

    def over_theta(r):
        # polar: |u| / r^3 * r dr dtheta = |cos theta| / r dr dtheta
        f = lambda th: abs(math.cos(th)) * dens(r * math.cos(th), r * math.sin(th))
        return sum(_quad(f, a, b) for a, b in ((0, math.pi / 2), (math.pi / 2, 1.5 * math.pi), (1.5 * math.pi, 2 * math.pi))) / r

    r_hi = abs(mu) + 14 * max(s, 1.0)
    knots = sorted({cutoff, min(1.0, r_hi), r_hi} | ({abs(mu)} if cutoff < abs(mu) < r_hi else set()))
    return sum(_quad(over_theta, a, b) for a, b in zip(knots, knots[1:]) if b > a)


def counterexample_lower_bound(x, i: int) -> float:
    """sqrt(2/(pi e)) |x_i| / (|x|^2 sqrt(1 + |x|^2)), a lower bound for F_i(1, x) when alpha = 0."""
    x = np.asarray(x, dtype=float)
    if i not in (1, 2):
        raise ValueError("i must be 1 or 2")
    r2 = float(x @ x)
    if r2 == 0:
        raise ValueError("x must be nonzero")
    return math.sqrt(2 / (math.pi * math.e)) * abs(x[i - 1]) / (r2 * math.sqrt(1 + r2))


# --- scaling and the boundedness conditions -----------------------------------


def check_scaling(f: Callable[[float, object], object], t: float, x) -> float:
    """F(t, x) - F(1, x / sqrt t) / t (largest component for vector F)."""
    if not t > 0:
        raise ValueError("t must be positive")
    x = np.asarray(x, dtype=float)
    lhs = np.asarray(f(t, x), dtype=float)
    rhs = np.asarray(f(1.0, x / math.sqrt(t)), dtype=float) / t
    r = lhs - rhs
    if r.ndim == 0:
        return float(r)
    return float(r.flat[np.argmax(np.abs(r))])


def bessel3_inverse_square_mean(t: float) -> float:
    """E[1 / R_t^2] for R a BES(3) process from 1, by quadrature of its transition density."""
    if not t > 0:
        raise ValueError("t must be positive")
    st = math.sqrt(t)
    f = lambda r: (math.exp(-0.5 * ((r - 1) / st) ** 2) - math.exp(-0.5 * ((r + 1) / st) ** 2)) / (st * SQRT_2PI * r)
    hi = 1 + 40 * st
    return _quad(f, 0.0, 1.0) + _quad(f, 1.0, hi)


def bessel3_inverse_mean(t: float) -> float:
    """E[1 / R_t] = 2 Phi(1/sqrt t) - 1 for BES(3) from 1 (the mass of N_t)."""
    return float(2 * normal_cdf(1 / math.sqrt(t)) - 1)


def check_lbm1(
    model: HarmonicReciprocalModel, t_grid: Sequence[float], mc: int, rng: RngStream, start=None, workers=None
):
    """Monte Carlo E[|grad ln h(Y_t)| / h(Y_t)] per t, from exact Gaussian draws of Y_t.

    The sample variance is infinite for the Bessel models (1/|y|^4 is not
    integrable at 0 in three dimensions), so stderr understates the error.
    """
    from .measures import McEstimate

    if start is None:
        start = np.eye(model.dimension)[0]
    out = []
    for j, t in enumerate(t_grid):
        # a fresh block of path streams per time keeps the times independent
        y = gaussian_endpoints(start, t, RngStream(rng.seed, rng.stream_id + j), mc, workers)
        g = np.linalg.norm(model.grad_ln_h(y), axis=-1) / model.h(y)
        out.append(McEstimate.from_samples(g))
    return out


@dataclass(frozen=True)
class BoundednessReport:
    """Values of a conditional functional over a grid, with a divergence flag."""

    points: np.ndarray
    values: np.ndarray
    max_value: float
    argmax: np.ndarray
    unbounded: bool
    ceiling: float


def check_lbm2(
    functional: Callable[[float, np.ndarray], float],
    points,
    ceiling: float = 1e4,
    refine_toward=None,
    refinement=None,
) -> BoundednessReport:
    """Evaluate ``functional(t, x)`` at ``points`` (rows (t, x...)) and flag divergence.

    Divergence is flagged when any value is infinite, or when the values
    along ``refinement`` (a sequence of (t, x) rows approaching a target)
    increase and end above ``ceiling``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = np.array([float(np.max(functional(p[0], p[1:] if p.size > 2 else p[1]))) for p in pts])
    unbounded = bool(np.any(np.isinf(vals)))
    if refinement is not None:
        ref = np.atleast_2d(np.asarray(refinement, dtype=float))
        rv = np.array([float(np.max(functional(p[0], p[1:] if p.size > 2 else p[1]))) for p in ref])
        pts = np.vstack([pts, ref])
        vals = np.concatenate([vals, rv])
        if np.all(np.diff(rv) > 0) and rv[-1] > ceiling:
            unbounded = True
    finite = np.where(np.isfinite(vals), vals, -np.inf)
    k = int(np.argmax(vals)) if unbounded and np.any(np.isinf(vals)) else int(np.argmax(finite))
    return BoundednessReport(pts, vals, float(vals[k]), pts[k], unbounded, float(ceiling))
