import math

import numpy as np
import pytest

from micacl.errors import NonFiniteError
from micacl.optim import OptimState, adamw_step, cosine_lr
from micacl.tensor import Tensor


class TestCosine:
    def test_endpoints(self):
        assert cosine_lr(0, 100, 4e-4, 3e-6) == 4e-4
        assert cosine_lr(100, 100, 4e-4, 3e-6) == 3e-6

    def test_midpoint(self):
        assert abs(cosine_lr(50, 100, 4e-4, 3e-6) - (4e-4 + 3e-6) / 2) < 1e-18

    def test_clamped_after_end(self):
        assert cosine_lr(250, 100, 1.0, 0.1) == 0.1

    def test_monotone(self):
        lrs = [cosine_lr(s, 40, 1.0, 0.0) for s in range(41)]
        assert all(a > b for a, b in zip(lrs, lrs[1:]))

    @pytest.mark.parametrize("step,total", [(-1, 10), (0, 0)])
    def test_invalid(self, step, total):
        with pytest.raises(ValueError):
            cosine_lr(step, total, 1.0, 0.0)


def reference_adamw(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar-by-scalar transcription of decoupled-decay Adam."""
    p = p.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        for i in range(p.size):
            m.flat[i] = b1 * m.flat[i] + (1 - b1) * g.flat[i]
            v.flat[i] = b2 * v.flat[i] + (1 - b2) * g.flat[i] ** 2
            p.flat[i] -= lr * wd * p.flat[i]
            p.flat[i] -= lr * (m.flat[i] / (1 - b1 ** t)) / (math.sqrt(v.flat[i] / (1 - b2 ** t)) + eps)
    return p


class TestAdamW:
    def run(self, p0, grads, lr=1e-2, wd=0.05):
        p = Tensor(p0, requires_grad=True)
        state = OptimState(weight_decay=wd)
        for g in grads:
            p.grad = g.copy()
            adamw_step([("p", p)], state, lr)
        return p.data, state

    def test_matches_transcription(self):
        rng = np.random.default_rng(0)
        p0 = rng.normal(size=(3, 2))
        grads = [rng.normal(size=(3, 2)) for _ in range(5)]
        got, state = self.run(p0, grads)
        np.testing.assert_allclose(got, reference_adamw(p0, grads, 1e-2, 0.05), atol=1e-15)
        assert state.step == 5 and state.t["p"] == 5

    def test_matches_torch(self):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(1)
        p0 = rng.normal(size=(4,))
        grads = [rng.normal(size=(4,)) for _ in range(6)]
        tp = torch.tensor(p0, dtype=torch.float64, requires_grad=True)
        opt = torch.optim.AdamW([tp], lr=3e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05)
        for g in grads:
            tp.grad = torch.tensor(g, dtype=torch.float64)
            opt.step()
        got, _ = self.run(p0, grads, lr=3e-3)
        np.testing.assert_allclose(got, tp.detach().numpy(), atol=1e-14)

    def test_first_step_size_is_lr(self):
        got, _ = self.run(np.zeros(3), [np.array([5.0, -0.1, 2e-3])], lr=1e-3, wd=0.0)
        np.testing.assert_allclose(got, [-1e-3, 1e-3, -1e-3], rtol=1e-4)

    def test_constant_gradient_steps_approach_lr(self):
        p0 = np.zeros(1)
        got, _ = self.run(p0, [np.ones(1)] * 50, lr=1e-3, wd=0.0)
        np.testing.assert_allclose(got, [-0.05], rtol=1e-6)

    def test_zero_gradient_only_decays(self):
        got, _ = self.run(np.array([2.0]), [np.zeros(1)], lr=0.1, wd=0.5)
        np.testing.assert_allclose(got, [2.0 * (1 - 0.05)], atol=1e-15)

    def test_missing_gradient_skipped(self):
        a, b = Tensor([1.0], requires_grad=True), Tensor([1.0], requires_grad=True)
        a.grad = np.array([1.0])
        state = OptimState()
        adamw_step([("a", a), ("b", b)], state, 1e-2)
        assert b.data[0] == 1.0 and "b" not in state.m
        assert a.data[0] < 1.0

    def test_non_finite_gradient(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([np.inf])
        with pytest.raises(NonFiniteError, match="enc_w1"):
            adamw_step([("enc_w1", p)], OptimState(), 1e-3)
