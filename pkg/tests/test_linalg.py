import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from normsoftmax import linalg
from normsoftmax.errors import ContextMismatch, DimensionTooSmall, NotNormalized, ZeroVector
from oracles import central_diff, max_rel_err

# tiny magnitudes would underflow the squared norms used in the bounds
finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False).map(
    lambda x: 0.0 if abs(x) < 1e-100 else x
)
vectors = arrays(np.float64, st.integers(2, 12), elements=finite).filter(
    lambda v: np.linalg.norm(v) > 1e-3
)


class TestL2Normalize:
    @pytest.mark.parametrize("v, expected", [
        ([3, 4], [0.6, 0.8]),
        ([0, 0, 5], [0, 0, 1]),
        ([1, 1, 1, 1], [0.5, 0.5, 0.5, 0.5]),
    ])
    def test_examples(self, v, expected):
        unit, ctx = linalg.l2_normalize(v)
        np.testing.assert_allclose(unit, expected, atol=1e-15)
        assert ctx.input_norm == pytest.approx(np.linalg.norm(v))

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            linalg.l2_normalize([0.0, 0.0])
        with pytest.raises(ZeroVector):
            linalg.l2_normalize([1e-31, 0.0])

    @given(vectors)
    def test_unit_norm(self, v):
        unit, _ = linalg.l2_normalize(v)
        assert abs(np.linalg.norm(unit) - 1.0) <= 1e-12

    @given(vectors, st.floats(1e-3, 1e3))
    def test_scale_invariance(self, v, c):
        np.testing.assert_allclose(linalg.l2_normalize(c * v)[0], linalg.l2_normalize(v)[0],
                                   atol=1e-12)


class TestL2Backward:
    def test_tangential_passes(self):
        _, ctx = linalg.l2_normalize([1.0, 0.0])
        np.testing.assert_allclose(linalg.l2_normalize_backward([1, 0], [0, 1], ctx), [0, 1])

    def test_radial_annihilated(self):
        _, ctx = linalg.l2_normalize([2.0, 0.0])
        np.testing.assert_allclose(linalg.l2_normalize_backward([2, 0], [1, 0], ctx), [0, 0])

    def test_finite_difference_example(self):
        v = np.array([3.0, 4.0])
        g = np.array([1.0, 1.0])
        _, ctx = linalg.l2_normalize(v)
        numeric = central_diff(lambda x: g @ (x / np.sqrt(x @ x)), v)
        assert max_rel_err(linalg.l2_normalize_backward(v, g, ctx), numeric) < 1e-6

    def test_context_mismatch(self):
        _, ctx = linalg.l2_normalize([3.0, 4.0])
        with pytest.raises(ContextMismatch):
            linalg.l2_normalize_backward([6.0, 8.0], [1.0, 0.0], ctx)

    @given(vectors, st.data())
    def test_orthogonal_to_input(self, v, data):
        g = data.draw(arrays(np.float64, v.shape, elements=finite))
        _, ctx = linalg.l2_normalize(v)
        out = linalg.l2_normalize_backward(v, g, ctx)
        assert abs(out @ v) <= 1e-9 * max(np.linalg.norm(g) * np.linalg.norm(v), 1e-300)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        v = r.standard_normal(r.integers(2, 10))
        g = r.standard_normal(v.shape)
        _, ctx = linalg.l2_normalize(v)
        numeric = central_diff(lambda x: g @ (x / np.sqrt(x @ x)), v)
        assert max_rel_err(linalg.l2_normalize_backward(v, g, ctx), numeric) < 1e-6


def _layer_norm_ref(x, eps):
    c = x - x.mean()
    return c / np.sqrt(np.mean(c * c) + eps)


class TestLayerNorm:
    def test_constant_input(self):
        out, _ = linalg.layer_norm([5, 5, 5, 5], 1e-5)
        np.testing.assert_array_equal(out, 0.0)

    def test_hand_example(self):
        # mean 2, population variance 2/3 -> +-1/sqrt(2/3)
        out, ctx = linalg.layer_norm([1, 2, 3], 0.0)
        np.testing.assert_allclose(out, [-1.224744871391589, 0.0, 1.224744871391589], atol=1e-14)
        assert ctx.mean == 2.0 and ctx.variance == pytest.approx(2 / 3)

    def test_already_standard(self):
        np.testing.assert_allclose(linalg.layer_norm([-1, 1], 0.0)[0], [-1, 1])

    def test_too_small(self):
        with pytest.raises(DimensionTooSmall):
            linalg.layer_norm([1.0])

    @given(vectors)
    def test_moments(self, v):
        out, ctx = linalg.layer_norm(v, 0.0)
        assert abs(out.mean()) <= 1e-10
        if ctx.variance > 1e-6:
            assert abs(np.mean(out ** 2) - 1.0) <= 1e-9


class TestLayerNormBackward:
    def test_constant_input_gradient_sums_to_zero(self, rng):
        v = np.full(6, 3.0)
        g = rng.standard_normal(6)
        _, ctx = linalg.layer_norm(v, 1e-5)
        out = linalg.layer_norm_backward(v, g, ctx)
        assert abs(out.sum()) < 1e-9
        numeric = central_diff(lambda x: g @ _layer_norm_ref(x, 1e-5), v)
        assert max_rel_err(out, numeric) < 1e-6

    def test_zero_cotangent(self, rng):
        v = rng.standard_normal(5)
        _, ctx = linalg.layer_norm(v)
        np.testing.assert_array_equal(linalg.layer_norm_backward(v, np.zeros(5), ctx), 0.0)

    def test_context_mismatch(self):
        _, ctx = linalg.layer_norm([1.0, 2.0, 3.0])
        with pytest.raises(ContextMismatch):
            linalg.layer_norm_backward([1.0, 2.0, 4.0], [1.0, 0.0, 0.0], ctx)
        with pytest.raises(ContextMismatch):
            linalg.layer_norm_backward([1.0, 2.0], [1.0, 0.0], linalg.l2_normalize([1.0, 2.0])[1])

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        v = r.standard_normal(8)
        g = r.standard_normal(8)
        eps = [0.0, 1e-5, 0.1][seed % 3]
        _, ctx = linalg.layer_norm(v, eps)
        numeric = central_diff(lambda x: g @ _layer_norm_ref(x, eps), v)
        assert max_rel_err(linalg.layer_norm_backward(v, g, ctx), numeric) < 1e-6


class TestRows:
    def test_rows_match_single(self, rng):
        X = rng.standard_normal((7, 5))
        G = rng.standard_normal((7, 5))
        U, norms = linalg.l2_normalize_rows(X)
        Y, denom = linalg.layer_norm_rows(X, 1e-5)
        gU = linalg.l2_normalize_rows_backward(U, norms, G)
        gY = linalg.layer_norm_rows_backward(Y, denom, G)
        for i in range(7):
            u, c = linalg.l2_normalize(X[i])
            np.testing.assert_allclose(U[i], u, atol=1e-15)
            np.testing.assert_allclose(gU[i], linalg.l2_normalize_backward(X[i], G[i], c),
                                       atol=1e-13)
            y, c = linalg.layer_norm(X[i], 1e-5)
            np.testing.assert_allclose(Y[i], y, atol=1e-14)
            np.testing.assert_allclose(gY[i], linalg.layer_norm_backward(X[i], G[i], c),
                                       atol=1e-13)

    def test_zero_row(self):
        with pytest.raises(ZeroVector):
            linalg.l2_normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))


class TestCosineDistance:
    @pytest.mark.parametrize("a, b, d", [
        ([1, 0], [1, 0], 0.0),
        ([1, 0], [-1, 0], 2.0),
        ([1, 0], [0, 1], 1.0),
    ])
    def test_examples(self, a, b, d):
        assert linalg.cosine_distance(a, b) == d

    def test_not_normalized(self):
        with pytest.raises(NotNormalized):
            linalg.cosine_distance([1, 1], [1, 0])

    @given(vectors, st.data())
    @settings(max_examples=50)
    def test_symmetric_and_bounded(self, v, data):
        w = data.draw(vectors.filter(lambda w: w.shape == v.shape))
        a = linalg.l2_normalize(v)[0]
        b = linalg.l2_normalize(w)[0]
        d = linalg.cosine_distance(a, b)
        assert d == linalg.cosine_distance(b, a)
        assert -1e-9 <= d <= 2 + 1e-9
        assert abs(linalg.cosine_distance(a, a)) < 1e-12
