import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from follmer_lab.models import (
    HarmonicReciprocalModel,
    InverseDistanceTerms,
    ModelDomainError,
    check_harmonic,
    counterexample_bessel4,
    embedded_bessel4,
    inverse_bessel3,
    inverse_distance,
    model_from_label,
    superpose,
)
from follmer_lab.stochastics import RngStream

coord = st.floats(-5, 5, allow_nan=False)


def _fd_grad_ln_h(model, y, step=1e-4):
    e = np.eye(y.size) * step
    return np.array([(np.log(model.h(y + d)) - np.log(model.h(y - d))) / (2 * step) for d in e])


def _random_points(q, n, seed, scale=3.0):
    return RngStream(seed, q).numpy_generator().uniform(-scale, scale, size=(n, q))


def _builtins():
    return [inverse_bessel3(), embedded_bessel4(1.0, 1.0), embedded_bessel4(-2.0, 0.5), counterexample_bessel4()]


# --- built-ins -------------------------------------------------------------------


def test_inverse_bessel3_examples():
    m = inverse_bessel3()
    assert m.dimension == 3
    assert m.h(np.array([1.0, 0.0, 0.0])) == 1.0
    assert np.allclose(m.grad_ln_h(np.array([0.0, 2.0, 0.0])), [0.0, 0.5, 0.0], atol=1e-15)
    assert abs(check_harmonic(m, (1.0, 1.0, 1.0), 1e-3)) <= 1e-4
    assert abs(check_harmonic(m, (2.0, 0.0, 0.0), 1e-3)) <= 1e-4


def test_embedded_bessel4_examples():
    m = embedded_bessel4(1.0, 1.0)
    assert m.dimension == 4
    assert m.h(np.array([0.0, 0.0, 0.0, 7.0])) == 0.0
    assert np.allclose(m.grad_ln_h(np.array([3.0, 4.0, 0.0, 9.0])), [3 / 25, 4 / 25, 0, 0], atol=1e-15)
    assert abs(check_harmonic(m, (1.0, 1.0, 1.0, 5.0), 1e-3)) <= 1e-4
    with pytest.raises(ValueError):
        embedded_bessel4(0.0, 1.0)
    with pytest.raises(ValueError):
        embedded_bessel4(1.0, 0.0)


@settings(max_examples=80, deadline=None)
@given(y=st.tuples(coord, coord, coord, coord))
def test_builtin_closed_forms(y):
    y = np.array(y)
    b3, b4 = inverse_bessel3(), embedded_bessel4(2.0, -1.0)
    assert b3.h(y[:3]) == pytest.approx(np.linalg.norm(y[:3]), rel=1e-14, abs=1e-300)
    assert b4.h(y) == pytest.approx(np.linalg.norm(y[:3]), rel=1e-14, abs=1e-300)
    assert b4.zero_set_distance(y) == pytest.approx(np.linalg.norm(y[:3]), rel=1e-14, abs=1e-300)
    r2 = y[:3] @ y[:3]
    if r2 > 1e-6:
        assert np.allclose(b4.grad_ln_h(y), np.r_[y[:3] / r2, 0.0], rtol=1e-12, atol=1e-15)
        assert np.allclose(b3.grad_ln_h(y[:3]), y[:3] / r2, rtol=1e-12, atol=1e-15)


def test_zero_set_distance_vanishes_exactly_with_h():
    for m in _builtins():
        pts = _random_points(m.dimension, 200, 1)
        pts[:50, :3] = 0.0  # on the zero set
        h = m.h(pts)
        d = m.zero_set_distance(pts)
        assert np.array_equal(h == 0, d == 0)
        assert np.all(h >= 0)


def test_gradients_match_finite_differences():
    for m in _builtins():
        pts = _random_points(m.dimension, 400, 2)
        pts = pts[m.h(pts) > 0.1][:100]
        assert len(pts) == 100
        for y in pts:
            assert np.allclose(m.grad_ln_h(y), _fd_grad_ln_h(m, y), rtol=0, atol=1e-5)


def test_grad_on_zero_set_raises():
    with pytest.raises(ModelDomainError):
        inverse_bessel3().grad_ln_h(np.zeros(3))


def test_zero_set_distance_is_lipschitz():
    for m in _builtins():
        a = _random_points(m.dimension, 500, 3)
        b = a + _random_points(m.dimension, 500, 4, scale=0.5)
        lhs = np.abs(m.zero_set_distance(a) - m.zero_set_distance(b))
        assert np.all(lhs <= np.linalg.norm(a - b, axis=1) + 1e-12)


def test_labels_and_registry():
    assert model_from_label("inverse-bessel3").label == "inverse-bessel3"
    assert model_from_label("embedded-bessel4", (1.0, 2.0)).label == "embedded-bessel4(1,2)"
    assert model_from_label("embedded-bessel4", (0.0, 0.0)).label == "embedded-bessel4(0,0)"
    with pytest.raises(ValueError):
        model_from_label("bessel5")


# --- superposition -----------------------------------------------------------------


def test_superpose_single_model_is_identity():
    m = inverse_bessel3()
    s = superpose([m])
    pts = _random_points(3, 50, 5)
    assert np.array_equal(s.h(pts), m.h(pts))
    assert np.array_equal(s.grad_ln_h(pts), m.grad_ln_h(pts))
    assert np.array_equal(s.zero_set_distance(pts), m.zero_set_distance(pts))


def test_two_centers_equidistant_point():
    a, b = np.array([1.0, 0.0, 0.0]), np.array([-1.0, 0.0, 0.0])
    s = superpose([inverse_distance(a), inverse_distance(b)])
    for y in ([0.0, 0.0, 0.0], [0.0, 2.0, -1.0], [0.0, 0.3, 0.4]):
        r = np.linalg.norm(np.array(y) - a)
        assert s.h(np.array(y)) == pytest.approx(r / 2, rel=1e-15)
    assert abs(check_harmonic(s, (0.3, 0.7, -0.2), 1e-3)) <= 1e-4


def _callable_copy(m):
    return HarmonicReciprocalModel(m.dimension, m.h, m.grad_ln_h, m.zero_set_distance, m.label + "*")


def test_superpose_gradient_identity_both_routes():
    parts = [inverse_distance(c) for c in ([1.0, 0.0, 0.0], [0.0, 1.5, 0.0], [-0.5, -0.5, 1.0])]
    for models in (parts, [_callable_copy(p) for p in parts]):
        s = superpose(models)
        pts = _random_points(3, 100, 6)
        h = s.h(pts)
        ident = h[:, None] * sum(p.grad_ln_h(pts) / p.h(pts)[:, None] for p in parts)
        g = s.grad_ln_h(pts)
        assert np.max(np.abs(g - ident) / np.maximum(np.abs(g), 1e-300)) <= 1e-13
        for y in pts[h > 0.1][:30]:
            assert np.allclose(s.grad_ln_h(y), _fd_grad_ln_h(s, y), rtol=0, atol=1e-5)


def test_superpose_callable_route_agrees_with_terms():
    parts = [inverse_distance(c) for c in ([1.0, 0.0, 0.0], [0.0, 1.5, 0.0])]
    fast, slow = superpose(parts), superpose([_callable_copy(p) for p in parts])
    assert fast.terms is not None and slow.terms is None
    pts = _random_points(3, 100, 7)
    assert np.allclose(fast.h(pts), slow.h(pts), rtol=1e-14)
    assert np.allclose(fast.grad_ln_h(pts), slow.grad_ln_h(pts), rtol=1e-12)
    assert np.allclose(fast.zero_set_distance(pts), slow.zero_set_distance(pts), rtol=1e-14)
    on = np.array([[1.0, 0.0, 0.0]])
    assert fast.h(on)[0] == 0.0 and slow.h(on)[0] == 0.0


def test_superpose_order_invariant():
    parts = [inverse_distance(c) for c in ([1.0, 0.0, 0.0], [0.0, 1.5, 0.0], [-0.5, -0.5, 1.0])]
    pts = _random_points(3, 50, 8)
    ref = superpose(parts)
    for perm in itertools.permutations(parts):
        s = superpose(list(perm))
        assert np.allclose(s.h(pts), ref.h(pts), rtol=1e-15)
        assert np.allclose(s.grad_ln_h(pts), ref.grad_ln_h(pts), rtol=1e-14)
        assert np.array_equal(s.zero_set_distance(pts), ref.zero_set_distance(pts))


def test_superpose_errors():
    with pytest.raises(ValueError):
        superpose([])
    with pytest.raises(ValueError):
        superpose([inverse_bessel3(), embedded_bessel4(1.0, 1.0)])


# --- harmonicity check ---------------------------------------------------------------


def test_check_harmonic_detects_non_harmonic_reciprocal():
    def h(y):
        return np.sum(np.asarray(y) ** 2, axis=-1)

    def g(y):
        y = np.asarray(y)
        return 2 * y / np.sum(y**2, axis=-1)[..., None]

    m = HarmonicReciprocalModel(3, h, g, lambda y: np.linalg.norm(y, axis=-1), "square")
    # Laplacian of 1/|y|^2 in R^3 is 2/|y|^4
    assert check_harmonic(m, (1.0, 0.0, 0.0), 1e-3) == pytest.approx(2.0, rel=1e-5)


def test_check_harmonic_reports_rank_two_terms():
    line = inverse_distance(np.zeros(3), np.diag([1.0, 1.0, 0.0]))
    assert abs(check_harmonic(line, (1.0, 0.5, 2.0))) > 0.1


def test_check_harmonic_near_zero_set():
    with pytest.raises(ModelDomainError):
        check_harmonic(inverse_bessel3(), (1e-4, 0.0, 0.0), 1e-3)
    with pytest.raises(ModelDomainError):
        check_harmonic(inverse_bessel3(), (0.0, 0.0, 0.0), 1e-3)


def test_terms_validation():
    with pytest.raises(ValueError):
        InverseDistanceTerms(np.array([-1.0]), np.zeros((1, 3)), np.eye(3)[None])
    with pytest.raises(ValueError):
        InverseDistanceTerms(np.array([1.0]), np.zeros((1, 3)), np.ones((1, 3, 3)))
    with pytest.raises(ValueError):
        InverseDistanceTerms(np.array([1.0]), np.zeros((2, 3)), np.eye(3)[None])
    t = inverse_bessel3().terms
    with pytest.raises(ValueError):
        t.weights[0] = 2.0
    assert np.array_equal(t.diagonal, np.ones((1, 3)))
