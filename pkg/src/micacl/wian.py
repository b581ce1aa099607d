"""Weighted instance aggregation.

An LSTM whose candidate cell contribution is scaled by a dynamic weight gate

    d_t = sigmoid(W_s x_t + U_s h_{t-1}) * w_t
    c_t = f_t * c_{t-1} + i_t * g_t * d_t
    h_t = o_t * tanh(c_t)

where ``w_t`` is the softmax of the GEIIM features over channels. The hidden
sequence then passes through residual multi-head self-attention and is
mean-pooled over time into one bag embedding.

Weight matrices follow the ``[out, in]`` convention and act on row vectors
as ``x @ W.T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import Xoshiro256
from .tensor import Tensor, concat, matmul, sigmoid, softmax, stack, tanh

GATES = ("f", "i", "o", "g")


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    n_heads: int

    @classmethod
    def init(cls, width: int, n_heads: int, rng: Xoshiro256) -> "AttentionParams":
        if n_heads < 1 or width % n_heads:
            raise ConfigError(f"model width {width} is not divisible by n_heads={n_heads}")
        bound = 1.0 / math.sqrt(width)
        mats = [Tensor(rng.uniform_array((width, width), -bound, bound), requires_grad=True)
                for _ in range(4)]
        return cls(*mats, n_heads=n_heads)

    def named_parameters(self, prefix: str = "attn."):
        return [(prefix + k, getattr(self, k)) for k in ("wq", "wk", "wv", "wo")]


@dataclass
class WianParams:
    w_s: Tensor  # [C_h, C]
    u_s: Tensor  # [C_h, C_h]
    w: dict  # gate -> [C_h, C]
    u: dict  # gate -> [C_h, C_h]
    b: dict  # gate -> [C_h]
    attn: AttentionParams
    w_proj: Optional[Tensor] = None  # [C_h, C], only when C != C_h

    @classmethod
    def init(cls, in_width: int, hidden: int, n_heads: int, rng: Xoshiro256) -> "WianParams":
        bound = 1.0 / math.sqrt(hidden)

        def mat(rows, cols):
            return Tensor(rng.uniform_array((rows, cols), -bound, bound), requires_grad=True)

        w = {k: mat(hidden, in_width) for k in GATES}
        u = {k: mat(hidden, hidden) for k in GATES}
        b = {k: Tensor(np.full(hidden, 1.0 if k == "f" else 0.0), requires_grad=True) for k in GATES}
        w_s, u_s = mat(hidden, in_width), mat(hidden, hidden)
        w_proj = None
        if in_width != hidden:
            pb = 1.0 / math.sqrt(in_width)
            w_proj = Tensor(rng.uniform_array((hidden, in_width), -pb, pb), requires_grad=True)
        attn = AttentionParams.init(hidden, n_heads, rng)
        return cls(w_s=w_s, u_s=u_s, w=w, u=u, b=b, attn=attn, w_proj=w_proj)

    @property
    def hidden(self) -> int:
        return self.u_s.shape[0]

    def named_parameters(self, prefix: str = "wian."):
        out = [(prefix + "w_s", self.w_s), (prefix + "u_s", self.u_s)]
        for k in GATES:
            out += [(f"{prefix}w_{k}", self.w[k]), (f"{prefix}u_{k}", self.u[k]), (f"{prefix}b_{k}", self.b[k])]
        if self.w_proj is not None:
            out.append((prefix + "w_proj", self.w_proj))
        return out + self.attn.named_parameters(prefix + "attn.")


@dataclass
class RecurrentState:
    h: Tensor  # [B, C_h]
    c: Tensor  # [B, C_h]

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "RecurrentState":
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


def instance_weights(h_geiim: Tensor) -> Tensor:
    """Softmax of the GEIIM features over the channel axis."""
    return softmax(h_geiim, axis=-1)


def project_weights(w: Tensor, params: WianParams) -> Tensor:
    """Map instance weights of width C to the cell width C_h (identity if equal)."""
    return w if params.w_proj is None else matmul(w, params.w_proj.T)


def dwg(x_t: Tensor, h_prev: Tensor, w_t: Tensor, params: WianParams) -> Tensor:
    """Dynamic weight gate ``sigmoid(W_s x_t + U_s h_prev) * w_t``."""
    if w_t.shape != h_prev.shape:
        raise ShapeError(f"instance weights {w_t.shape} must match hidden state {h_prev.shape}")
    return sigmoid(matmul(x_t, params.w_s.T) + matmul(h_prev, params.u_s.T)) * w_t


def _update(z: Tensor, state: RecurrentState, d_t: Optional[Tensor]) -> RecurrentState:
    """Cell update from packed ``[f, i, o, g]`` pre-activations."""
    n = state.c.shape[-1]
    f = sigmoid(z[:, :n])
    i = sigmoid(z[:, n:2 * n])
    o = sigmoid(z[:, 2 * n:3 * n])
    g = tanh(z[:, 3 * n:4 * n])
    write = i * g if d_t is None else i * g * d_t
    c = f * state.c + write
    return RecurrentState(h=o * tanh(c), c=c)


def wian_cell(x_t: Tensor, state: RecurrentState, d_t: Optional[Tensor], params: WianParams) -> RecurrentState:
    """One recurrent step. ``d_t=None`` leaves the candidate unscaled (plain LSTM)."""
    w_x = concat([params.w[k] for k in GATES], axis=0)
    u_h = concat([params.u[k] for k in GATES], axis=0)
    bias = concat([params.b[k] for k in GATES], axis=0)
    z = matmul(x_t, w_x.T) + bias + matmul(state.h, u_h.T)
    return _update(z, state, d_t)


def wian_forward(h_geiim: Tensor, w: Tensor, params: WianParams, gate: bool = True) -> Tensor:
    """Unroll the gated cell over all instances from a zero state.

    Returns the hidden states ``[B, T, C_h]``. With ``gate=False`` the weight
    gate is bypassed and the recurrence is a plain LSTM.
    """
    batch, steps, _ = h_geiim.shape
    n = params.hidden
    # all input-side projections for every step in one product: [f, i, o, g, s]
    w_x = concat([params.w[k] for k in GATES] + [params.w_s], axis=0)
    u_h = concat([params.u[k] for k in GATES] + [params.u_s], axis=0).T
    bias = concat([params.b[k] for k in GATES] + [Tensor(np.zeros(n))], axis=0)
    xz = matmul(h_geiim, w_x.T) + bias
    wp = project_weights(w, params) if gate else None

    state = RecurrentState.zeros(batch, n)
    hidden = []
    for t in range(steps):
        z = xz[:, t, :] + matmul(state.h, u_h)
        d_t = sigmoid(z[:, 4 * n:]) * wp[:, t, :] if gate else None
        state = _update(z, state, d_t)
        hidden.append(state.h)
    return stack(hidden, axis=1)


def _attend(seq: Tensor, attn: AttentionParams) -> tuple[Tensor, Tensor]:
    batch, steps, width = seq.shape
    if width % attn.n_heads:
        raise ConfigError(f"model width {width} is not divisible by n_heads={attn.n_heads}")
    dh = width // attn.n_heads

    def heads(wmat):
        return matmul(seq, wmat.T).reshape(batch, steps, attn.n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads(attn.wq), heads(attn.wk), heads(attn.wv)
    weights = softmax(matmul(q, k.T) * (1.0 / math.sqrt(dh)), axis=-1)
    mixed = matmul(weights, v).transpose(0, 2, 1, 3).reshape(batch, steps, width)
    return seq + matmul(mixed, attn.wo.T), weights


def mhsa(seq: Tensor, params) -> Tensor:
    """Residual multi-head scaled dot-product self-attention over time."""
    attn = params.attn if isinstance(params, WianParams) else params
    return _attend(seq, attn)[0]


def attention_weights(seq: Tensor, params) -> Tensor:
    """Attention distributions ``[B, heads, T, T]`` (rows over keys)."""
    attn = params.attn if isinstance(params, WianParams) else params
    return _attend(seq, attn)[1]


def aggregate(seq: Tensor) -> Tensor:
    """Temporal mean of ``[B, T, C_h]`` into ``[B, C_h]``."""
    return seq.mean(axis=1)
