"""Finite-difference gradient checks for each model component.

Every check builds a small random configuration from a fixed seed, reduces
the component output to a scalar through a fixed random projection (so no
gradient cancels by symmetry) and compares autodiff against central
differences.
"""

from __future__ import annotations

import time

import numpy as np

from .geiim import GeiimParams, geiim_forward
from .mccl import ClassStats, ScaleSet, cet_loss, mccl_loss, total_loss
from .model import ModelConfig, ModelParams, forward_model
from .rng import Xoshiro256
from .tensor import Tensor, grad_check
from .wian import WianParams, aggregate, instance_weights, mhsa, wian_forward

TOLERANCE = 1e-4

# toy sizes: batch, instances, GEIIM width, cell width
B, T, C, C_H = 2, 4, 6, 8


def _inputs(seed: int, *shape):
    return np.random.default_rng(seed).normal(size=shape)


def check_geiim(eps: float = 1e-5) -> float:
    rng = Xoshiro256(11)
    params = GeiimParams.init(T, 3, rng)
    params.alpha_raw.data[...] = 0.3
    x = Tensor(_inputs(1, B, T, C), requires_grad=True)
    r = _inputs(2, B, T, C)
    return grad_check(lambda: (geiim_forward(x, params)[0] * r).sum(),
                      [params.n1, params.n2, params.alpha_raw, x], eps)


def check_wian(eps: float = 1e-5) -> float:
    """GEIIM -> weights -> gated recurrence -> attention -> pooling."""
    rng = Xoshiro256(12)
    geiim = GeiimParams.init(T, 3, rng)
    wian = WianParams.init(C, C_H, 2, rng)
    x = Tensor(_inputs(3, B, T, C), requires_grad=True)
    r = _inputs(4, B, C_H)

    def f():
        h, _ = geiim_forward(x, geiim)
        seq = wian_forward(h, instance_weights(h), wian)
        return (aggregate(mhsa(seq, wian)) * r).sum()

    params = [x, geiim.n1, geiim.n2, geiim.alpha_raw] + [p for _, p in wian.named_parameters()]
    return grad_check(f, params, eps)


def check_attention(eps: float = 1e-5) -> float:
    rng = Xoshiro256(13)
    wian = WianParams.init(C_H, C_H, 2, rng)
    seq = Tensor(_inputs(5, B, T, C_H), requires_grad=True)
    r = _inputs(6, B, T, C_H)
    return grad_check(lambda: (mhsa(seq, wian) * r).sum(), [seq] + [p for _, p in wian.attn.named_parameters()], eps)


def check_mccl(eps: float = 1e-5) -> float:
    """Multiscale projections, contrastive term and cross-entropy term."""
    rng = Xoshiro256(14)
    batch, k = 6, 3
    scale_set = ScaleSet.init([1, 4, C_H], C_H, 4, rng)
    stats = ClassStats(np.array([9, 4, 2]), tau0=0.1)
    labels = np.array([0, 0, 1, 1, 2, 0])
    x_bag = Tensor(_inputs(7, batch, C_H), requires_grad=True)
    logits = Tensor(_inputs(8, batch, k), requires_grad=True)
    y_p = logits.data.copy()

    def f():
        l_mc = mccl_loss(x_bag, labels, stats, y_p, scale_set)
        return total_loss(l_mc, cet_loss(logits, labels))

    err = grad_check(f, [x_bag, logits] + list(scale_set.proj), eps)
    err_log = grad_check(lambda: mccl_loss(x_bag, labels, stats, y_p, scale_set, log_form=True),
                         [x_bag] + list(scale_set.proj), eps)
    return max(err, err_log)


def check_model(eps: float = 1e-5) -> float:
    """End-to-end total loss; sample weights use logits frozen at the base point."""
    config = ModelConfig(c_in=5, enc_hidden=6, c=C, d=3, c_h=C_H, e=4, n_heads=2, k=3, t=T,
                         scales=(1, 4, 8))
    params = ModelParams.init(config, seed=15)
    stats = ClassStats(np.array([5, 3, 2]), tau0=0.1)
    bags = _inputs(9, 4, T, config.c_in)
    labels = np.array([0, 1, 0, 2])
    y_p = forward_model(bags, params, config)[0].data.copy()

    def f():
        logits, x_bag = forward_model(bags, params, config)
        return total_loss(mccl_loss(x_bag, labels, stats, y_p, params.scale_set), cet_loss(logits, labels))

    return grad_check(f, params.parameters(), eps)


CHECKS = {
    "geiim": [("geiim", check_geiim)],
    "wian": [("wian", check_wian), ("attention", check_attention)],
    "mccl": [("mccl", check_mccl)],
}
CHECKS["all"] = CHECKS["geiim"] + CHECKS["wian"] + CHECKS["mccl"] + [("model", check_model)]


def run_checks(module: str = "all", eps: float = 1e-5) -> list:
    """Return ``(name, max relative error, seconds)`` for each selected check."""
    out = []
    for name, fn in CHECKS[module]:
        start = time.perf_counter()
        err = fn(eps)
        out.append((name, err, time.perf_counter() - start))
    return out
