"""Minimal ViT encoder with per-block feature capture.

The encoder is deliberately small: patch embedding, a learnable class
token and positional embeddings, ``depth`` pre-norm blocks, and a final
layer norm that only head paths (e.g. the pixel decoder) use. Forward
passes record every block output and every post-softmax attention map,
plus the scaled query-key logits of the last block so that attention
targets can be re-softmaxed under a different temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import INIT_STD, Block, LayerNorm, Linear, flatten_params
from .tensor import Tensor, concat


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 6
    heads: int = 4
    embed_dim: int = 128
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.image_size % self.patch_size != 0:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ConfigError("embed_dim must be divisible by heads")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def token_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """(C, H, W) image -> (L, P*P*C) tokens, patches in row-major order.

    Within a token the layout is (row, col, channel) with channel
    varying fastest, so ``unpatchify`` is an exact inverse.
    """
    c, h, w = image.shape
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = image.reshape(c, gh, patch_size, gw, patch_size)
    x = x.transpose(1, 3, 2, 4, 0)  # gh, gw, p, p, c
    return np.ascontiguousarray(x.reshape(gh * gw, patch_size * patch_size * c))


def unpatchify(tokens: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Exact inverse of ``patchify`` for a square patch grid."""
    n_patches = tokens.shape[0]
    grid = int(round(n_patches ** 0.5))
    if grid * grid != n_patches:
        raise ShapeError(f"{n_patches} patches do not form a square grid")
    x = tokens.reshape(grid, grid, patch_size, patch_size, channels)
    x = x.transpose(4, 0, 2, 1, 3)
    return np.ascontiguousarray(
        x.reshape(channels, grid * patch_size, grid * patch_size))


@dataclass
class EncodeResult:
    """Per-block outputs plus attention records of one forward pass."""

    x_blocks: list[Tensor] = field(default_factory=list)
    attention: list[Tensor] = field(default_factory=list)
    last_logits: Tensor | None = None  # scaled QK logits of the last block

    @property
    def last(self) -> Tensor:
        return self.x_blocks[-1]


class ViT:
    def __init__(self, cfg: ViTConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.token_dim, cfg.embed_dim, rng)
        self.cls_token = Tensor(
            rng.normal(0.0, INIT_STD, size=(1, cfg.embed_dim)), requires_grad=True)
        self.pos_embed = Tensor(
            rng.normal(0.0, INIT_STD, size=(cfg.num_patches + 1, cfg.embed_dim)),
            requires_grad=True)
        self.blocks = [Block(cfg.embed_dim, cfg.heads, cfg.mlp_ratio, rng)
                       for _ in range(cfg.depth)]
        self.norm = LayerNorm(cfg.embed_dim)

    def params(self):
        tree = {"patch_embed": self.patch_embed.params(),
                "cls_token": self.cls_token,
                "pos_embed": self.pos_embed,
                "norm": self.norm.params()}
        for i, blk in enumerate(self.blocks):
            tree[f"block{i}"] = blk.params()
        return tree

    def named_params(self) -> dict[str, Tensor]:
        return flatten_params(self.params())

    def encode(self, tokens, class_token: Tensor | None = None,
               visible_index=None) -> EncodeResult:
        """Run the block stack over (possibly masked) patch tokens.

        ``tokens`` holds raw patch vectors: all L rows when
        ``visible_index`` is None, otherwise exactly the visible rows in
        original order. Positional embeddings are gathered accordingly;
        the class token sits at position 0.
        """
        if not isinstance(tokens, Tensor):
            tokens = Tensor(tokens)
        L = self.cfg.num_patches
        if visible_index is None:
            patch_pos = self.pos_embed.gather_rows(np.arange(1, L + 1))
            if tokens.shape[0] != L:
                raise ShapeError(f"expected {L} patch tokens, got {tokens.shape[0]}")
        else:
            visible_index = np.asarray(visible_index, dtype=np.int64)
            if visible_index.size == 0 or visible_index.min() < 0 or visible_index.max() >= L:
                raise ShapeError("visible_index out of range")
            if tokens.shape[0] != visible_index.size:
                raise ShapeError("tokens do not match visible_index")
            patch_pos = self.pos_embed.gather_rows(visible_index + 1)

        cls = self.cls_token if class_token is None else class_token
        if cls.shape != (1, self.cfg.embed_dim):
            raise ShapeError(f"class token must be 1x{self.cfg.embed_dim}")
        x = concat([cls + self.pos_embed.gather_rows([0]),
                    self.patch_embed(tokens) + patch_pos], axis=0)

        result = EncodeResult()
        for blk in self.blocks:
            x, attn, logits = blk(x)
            result.x_blocks.append(x)
            result.attention.append(attn)
            result.last_logits = logits
        return result


def class_attention_last_block(model: ViT, image: np.ndarray) -> np.ndarray:
    """Class-to-patch attention of the last block on a full image.

    The class-to-class entry is dropped and each head row is
    renormalised to a distribution over the L patches. Returns a
    (heads, L) array.
    """
    tokens = patchify(image, model.cfg.patch_size)
    result = model.encode(tokens)
    attn = result.attention[-1].data  # heads x (L+1) x (L+1)
    rows = attn[:, 0, 1:]
    return rows / rows.sum(axis=-1, keepdims=True)
