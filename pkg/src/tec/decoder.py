"""Shared two-block decoder with target-specific inputs and heads.

One decoder serves both reconstruction targets. Each target path owns
its input projection and its learnable mask token; the transformer
blocks in between are shared. The feature path ends in a linear head
back to encoder width; the attention path projects to query/key
matrices and softmaxes their per-head products into predicted attention
rows that mirror the target layout (k selected patch queries plus the
class query, over all L patch keys).
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ParameterError, ShapeError
from .masking import MaskSpec
from .nn import INIT_STD, Block, Linear
from .tensor import Tensor, concat

DECODER_DEPTH = 2  # a shallow decoder is enough when targets live in feature space

FEATURE = "feature"
ATTENTION = "attention"


class MultiTargetDecoder:
    def __init__(self, encoder_dim: int, num_patches: int,
                 rng: np.random.Generator, dec_dim: int | None = None,
                 dec_heads: int = 4, mlp_ratio: float = 4.0):
        dec_dim = encoder_dim // 2 if dec_dim is None else dec_dim
        if dec_dim % dec_heads != 0:
            raise ParameterError(
                f"decoder dim {dec_dim} not divisible by {dec_heads} heads")
        self.dim = dec_dim
        self.num_patches = num_patches
        self.proj = {
            FEATURE: Linear(encoder_dim, dec_dim, rng),
            ATTENTION: Linear(encoder_dim, dec_dim, rng),
        }
        self.mask_token = {
            FEATURE: Tensor(rng.normal(0.0, INIT_STD, size=dec_dim),
                            requires_grad=True),
            ATTENTION: Tensor(rng.normal(0.0, INIT_STD, size=dec_dim),
                              requires_grad=True),
        }
        self.pos_embed = Tensor(
            rng.normal(0.0, INIT_STD, size=(num_patches + 1, dec_dim)),
            requires_grad=True)
        self.blocks = [Block(dec_dim, dec_heads, mlp_ratio, rng)
                       for _ in range(DECODER_DEPTH)]
        self.feature_head = Linear(dec_dim, encoder_dim, rng)
        self.query_head = Linear(dec_dim, dec_dim, rng)
        self.key_head = Linear(dec_dim, dec_dim, rng)

    def prepare_input(self, adapted: Tensor, mask: MaskSpec | None,
                      path: str) -> Tensor:
        """Project, scatter to full length, fill masked slots, add positions.

        ``adapted`` covers the class token (row 0) plus the visible
        patches in original order. With ``mask=None`` every patch is
        treated as visible (diagnostic mode).
        """
        if path not in self.proj:
            raise ParameterError(f"unknown decoder path {path!r}")
        L = self.num_patches
        visible = np.arange(L) if mask is None else mask.visible_index
        if adapted.shape[0] != visible.size + 1:
            raise ShapeError(
                f"adapted feature has {adapted.shape[0]} rows, expected "
                f"{visible.size + 1} (class + visible)")
        z = self.proj[path](adapted)
        placed = z.scatter_rows(np.concatenate([[0], visible + 1]), L + 1)
        if mask is not None and mask.masked_count:
            fill = Tensor(np.zeros((mask.masked_count, self.dim))) + self.mask_token[path]
            placed = placed + fill.scatter_rows(mask.masked_index + 1, L + 1)
        return placed + self.pos_embed

    def decode(self, z: Tensor) -> Tensor:
        for blk in self.blocks:
            z, _, _ = blk(z)
        return z

    def predict_features(self, decoded: Tensor) -> Tensor:
        """Drop the class row and map back to encoder width."""
        patches = decoded.gather_rows(np.arange(1, self.num_patches + 1))
        return self.feature_head(patches)

    def predict_attention(self, decoded: Tensor, selected_index, heads: int,
                          tau: float = 1.0) -> "AttentionPrediction":
        """Predicted attention rows matching the target layout.

        Queries are the decoded rows at ``selected_index`` plus the
        decoded class row (last); keys are all L decoded patch rows.
        Per head, row ``softmax(q k^T / sqrt(d_head) / tau)`` over the
        L keys.
        """
        selected = np.asarray(selected_index, dtype=np.int64)
        L = self.num_patches
        if selected.size and (selected.min() < 0 or selected.max() >= L):
            raise ShapeError("selected_index out of range")
        if self.dim % heads != 0:
            raise ParameterError(
                f"decoder dim {self.dim} not divisible by {heads} target heads")
        head_dim = self.dim // heads

        q_all = self.query_head(decoded)            # (L+1) x dim
        k_patches = self.key_head(
            decoded.gather_rows(np.arange(1, L + 1)))  # L x dim
        q_sel = q_all.gather_rows(selected + 1)
        cls_q = q_all.gather_rows([0])
        queries = concat([q_sel, cls_q], axis=0)     # (k+1) x dim

        k1 = selected.size + 1
        q = queries.reshape(k1, heads, head_dim).transpose(1, 0, 2)
        k = k_patches.reshape(L, heads, head_dim).transpose(1, 0, 2)
        logits = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(head_dim))
        rows = logits.softmax(axis=-1, tau=tau)
        return AttentionPrediction(rows=rows, queries=q_all, keys=k_patches,
                                   selected_queries=q_sel, class_query=cls_q)

    def params(self):
        tree = {
            "proj_feature": self.proj[FEATURE].params(),
            "proj_attention": self.proj[ATTENTION].params(),
            "mask_token_feature": self.mask_token[FEATURE],
            "mask_token_attention": self.mask_token[ATTENTION],
            "pos_embed": self.pos_embed,
            "feature_head": self.feature_head.params(),
            "query_head": self.query_head.params(),
            "key_head": self.key_head.params(),
        }
        for i, blk in enumerate(self.blocks):
            tree[f"block{i}"] = blk.params()
        return tree


class AttentionPrediction:
    """Predicted attention rows plus the intermediates behind them."""

    def __init__(self, rows: Tensor, queries: Tensor, keys: Tensor,
                 selected_queries: Tensor, class_query: Tensor):
        self.rows = rows                      # heads x (k+1) x L
        self.queries = queries                # (L+1) x dim, query projection
        self.keys = keys                      # L x dim, key projection
        self.selected_queries = selected_queries
        self.class_query = class_query
