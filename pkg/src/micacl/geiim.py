"""Graph-enhanced instance interaction.

A learnable adjacency over the T instances of a bag,
``A = softmax(relu(N1 @ N2))`` (row-wise), diffuses instance features one
step: ``H = alpha * X + (1 - alpha) * A @ X``. The adjacency depends only on
the node embeddings, so it is shared by every bag in a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ShapeError
from .rng import Xoshiro256
from .tensor import Tensor, as_tensor, matmul, relu, sigmoid, softmax


@dataclass
class GeiimParams:
    n1: Tensor  # [T, d]
    n2: Tensor  # [d, T]
    alpha_raw: Tensor  # scalar; alpha = sigmoid(alpha_raw)

    @classmethod
    def init(cls, n_instances: int, embed_dim: int, rng: Xoshiro256) -> "GeiimParams":
        bound = 1.0 / math.sqrt(embed_dim)
        return cls(
            n1=Tensor(rng.uniform_array((n_instances, embed_dim), -bound, bound), requires_grad=True),
            n2=Tensor(rng.uniform_array((embed_dim, n_instances), -bound, bound), requires_grad=True),
            alpha_raw=Tensor(0.0, requires_grad=True),
        )

    @property
    def n_instances(self) -> int:
        return self.n1.shape[0]

    def alpha(self) -> Tensor:
        return sigmoid(self.alpha_raw)

    def named_parameters(self, prefix: str = "geiim."):
        return [(prefix + "n1", self.n1), (prefix + "n2", self.n2), (prefix + "alpha_raw", self.alpha_raw)]


def build_adjacency(params: GeiimParams) -> Tensor:
    """Row-stochastic ``[T, T]`` adjacency from the node embeddings."""
    if params.n1.shape[1] != params.n2.shape[0] or params.n1.shape[0] != params.n2.shape[1]:
        raise ShapeError(f"node embeddings disagree: N1 {params.n1.shape}, N2 {params.n2.shape}")
    return softmax(relu(matmul(params.n1, params.n2)), axis=-1)


def diffuse(x: Tensor, a: Tensor, alpha) -> Tensor:
    """One diffusion step ``alpha * x + (1 - alpha) * a @ x`` per bag.

    ``x`` is ``[B, T, C]`` and ``a`` is ``[T, T]``; ``alpha`` may be a float or
    a scalar tensor.
    """
    x, a = as_tensor(x), as_tensor(a)
    if x.ndim != 3 or a.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"diffuse expects x [B, T, C] and a [T, T], got {x.shape} and {a.shape}")
    return alpha * x + (1.0 - alpha) * matmul(a, x)


def geiim_forward(x: Tensor, params: GeiimParams) -> tuple[Tensor, Tensor]:
    """Return the diffused features ``h`` and the adjacency used."""
    a = build_adjacency(params)
    return diffuse(x, a, params.alpha()), a
