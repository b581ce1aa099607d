import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from micacl.errors import ShapeError
from micacl.geiim import GeiimParams, build_adjacency, diffuse, geiim_forward
from micacl.rng import Xoshiro256
from micacl.tensor import Tensor, grad_check


def make_params(n1, n2, alpha_raw=0.0):
    return GeiimParams(Tensor(n1, requires_grad=True), Tensor(n2, requires_grad=True),
                       Tensor(alpha_raw, requires_grad=True))


def adjacency_oracle(n1, n2):
    """Row softmax of relu(N1 N2) evaluated element by element."""
    t = len(n1)
    logits = [[max(0.0, sum(n1[i][p] * n2[p][j] for p in range(len(n2)))) for j in range(t)] for i in range(t)]
    rows = []
    for row in logits:
        z = [math.exp(v) for v in row]
        rows.append([v / sum(z) for v in z])
    return rows


class TestBuildAdjacency:
    def test_zero_embeddings_give_uniform(self):
        a = build_adjacency(make_params(np.zeros((5, 3)), np.ones((3, 5))))
        np.testing.assert_allclose(a.data, np.full((5, 5), 0.2), atol=1e-15)

    def test_two_instance_case(self):
        n1, n2 = [[1.0], [0.0]], [[1.0, 0.0]]
        expected = adjacency_oracle(n1, n2)
        np.testing.assert_allclose(expected, [[0.73106, 0.26894], [0.5, 0.5]], atol=1e-5)
        np.testing.assert_allclose(build_adjacency(make_params(n1, n2)).data, expected, atol=1e-14)

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(4)
        n1, n2 = rng.normal(size=(4, 3)), rng.normal(size=(3, 4))
        np.testing.assert_allclose(build_adjacency(make_params(n1, n2)).data,
                                   adjacency_oracle(n1.tolist(), n2.tolist()), atol=1e-14)

    def test_inconsistent_shapes(self):
        with pytest.raises(ShapeError):
            build_adjacency(make_params(np.zeros((4, 2)), np.zeros((3, 4))))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
    def test_row_stochastic(self, t, d, seed, scale):
        rng = np.random.default_rng(seed)
        a = build_adjacency(make_params(scale * rng.normal(size=(t, d)), scale * rng.normal(size=(d, t)))).data
        assert ((a >= 0) & (a <= 1)).all()
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)


class TestDiffuse:
    def setup_method(self):
        self.x = np.random.default_rng(0).normal(size=(2, 4, 3))
        self.a = build_adjacency(make_params(np.random.default_rng(1).normal(size=(4, 2)),
                                             np.random.default_rng(2).normal(size=(2, 4))))

    def test_alpha_one_is_identity(self):
        np.testing.assert_array_equal(diffuse(self.x, self.a, 1.0).data, self.x)

    def test_alpha_zero_uniform_is_temporal_mean(self):
        out = diffuse(self.x, np.full((4, 4), 0.25), 0.0).data
        np.testing.assert_allclose(out, np.broadcast_to(self.x.mean(axis=1, keepdims=True), out.shape), atol=1e-15)

    @pytest.mark.parametrize("alpha", [0.0, 0.3, 1.0])
    def test_identity_adjacency(self, alpha):
        np.testing.assert_allclose(diffuse(self.x, np.eye(4), alpha).data, self.x, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            diffuse(self.x, np.eye(3), 0.5)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
    def test_constant_sequence_is_fixed_point(self, seed, alpha):
        rng = np.random.default_rng(seed)
        x = np.repeat(rng.normal(size=(2, 1, 3)), 5, axis=1)
        a = build_adjacency(make_params(rng.normal(size=(5, 2)), rng.normal(size=(2, 5))))
        np.testing.assert_allclose(diffuse(x, a, alpha).data, x, atol=1e-12)


class TestGeiimForward:
    def test_saturated_gate_passes_input(self):
        x = np.random.default_rng(5).normal(size=(2, 4, 3))
        params = GeiimParams.init(4, 2, Xoshiro256(1))
        params.alpha_raw.data[...] = 20.0
        h, _ = geiim_forward(Tensor(x), params)
        np.testing.assert_allclose(h.data, x, atol=1e-6)

    def test_hand_case(self):
        params = make_params(np.zeros((2, 1)), np.zeros((1, 2)), alpha_raw=0.0)
        h, a = geiim_forward(Tensor([[[1.0], [3.0]]]), params)
        np.testing.assert_allclose(a.data, 0.5, atol=1e-15)
        np.testing.assert_allclose(h.data, [[[1.5], [2.5]]], atol=1e-15)

    def test_alpha_in_unit_interval(self):
        params = GeiimParams.init(3, 2, Xoshiro256(0))
        for raw in (-50.0, 0.0, 50.0):
            params.alpha_raw.data[...] = raw
            assert 0.0 <= params.alpha().item() <= 1.0
        params.alpha_raw.data[...] = 0.0
        assert params.alpha().item() == 0.5

    def test_init_bounds(self):
        params = GeiimParams.init(16, 8, Xoshiro256(3))
        bound = 1 / math.sqrt(8)
        assert params.n1.shape == (16, 8) and params.n2.shape == (8, 16)
        assert np.abs(params.n1.data).max() <= bound and np.abs(params.n2.data).max() <= bound

    def test_gradients(self):
        params = GeiimParams.init(4, 3, Xoshiro256(9))
        x = Tensor(np.random.default_rng(6).normal(size=(2, 4, 5)), requires_grad=True)
        err = grad_check(lambda: geiim_forward(x, params)[0].sum(), [params.n1, params.n2, params.alpha_raw, x])
        assert err < 1e-4
