"""Small layer library shared by the encoder and the decoder.

Every layer exposes ``params()`` returning a (possibly nested) dict of
named leaf tensors; ``flatten_params`` turns the nesting into dotted
names for the optimizer and checkpoints.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .tensor import Tensor

INIT_STD = 0.02


def flatten_params(tree, prefix: str = "") -> dict[str, Tensor]:
    flat: dict[str, Tensor] = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_params(value, prefix=name + "."))
        else:
            flat[name] = value
    return flat


def set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag
        if not flag:
            p.grad = None


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        if zero_init:
            w = np.zeros((d_in, d_out))
        else:
            w = rng.normal(0.0, INIT_STD, size=(d_in, d_out))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.w + self.b

    def params(self):
        return {"w": self.w, "b": self.b}


class LayerNorm:
    """Last-axis layer norm with learnable affine."""

    def __init__(self, dim: int, eps: float = 1e-6):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return x.layer_norm(self.eps) * self.gamma + self.beta

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


class Mlp:
    """Two-layer MLP with GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, rng: np.random.Generator,
                 d_out: int | None = None, zero_init_out: bool = False):
        d_out = d_in if d_out is None else d_out
        self.fc1 = Linear(d_in, d_hidden, rng)
        self.fc2 = Linear(d_hidden, d_out, rng, zero_init=zero_init_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(self.fc1(x).gelu())

    def params(self):
        return {"fc1": self.fc1.params(), "fc2": self.fc2.params()}


class SelfAttention:
    """Multi-head self-attention over a tokens x dim matrix.

    Returns the projected output together with the post-softmax
    attention (heads x tokens x tokens) and the scaled pre-softmax
    logits, which downstream target construction re-softmaxes with a
    temperature.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.proj = Linear(dim, dim, rng)

    def _split_heads(self, x: Tensor, tokens: int) -> Tensor:
        return x.reshape(tokens, self.heads, self.head_dim).transpose(1, 0, 2)

    def __call__(self, x: Tensor):
        tokens = x.shape[0]
        q = self._split_heads(self.q(x), tokens)
        k = self._split_heads(self.k(x), tokens)
        v = self._split_heads(self.v(x), tokens)
        logits = (q @ k.transpose(0, 2, 1)) * self.scale
        attn = logits.softmax(axis=-1)
        out = (attn @ v).transpose(1, 0, 2).reshape(tokens, self.dim)
        return self.proj(out), attn, logits

    def params(self):
        return {"q": self.q.params(), "k": self.k.params(),
                "v": self.v.params(), "proj": self.proj.params()}


class Block:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float,
                 rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = SelfAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng)

    def __call__(self, x: Tensor):
        attn_out, attn, logits = self.attn(self.norm1(x))
        x = x + attn_out
        x = x + self.mlp(self.norm2(x))
        return x, attn, logits

    def params(self):
        return {"norm1": self.norm1.params(), "attn": self.attn.params(),
                "norm2": self.norm2.params(), "mlp": self.mlp.params()}
