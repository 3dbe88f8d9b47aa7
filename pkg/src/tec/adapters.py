"""Conditional adapters used only during pretraining.

The input adapter rewrites the class token through a two-layer MLP (no
residual). The encoder adapter bank groups the block outputs, merges
each group with a linear projection, pushes the merged feature through
a residual MLP, and sums the groups into the single feature the decoder
consumes. Both only branch off the encoder: block outputs never depend
on adapter weights, so stripping the adapters after pretraining leaves
the encoder bitwise unchanged.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ParameterError
from .nn import Linear, Mlp, flatten_params
from .tensor import Tensor, concat
from .vit import ViT, EncodeResult


class InputAdapter:
    """Two-layer MLP on the class token, output layer zero-initialised.

    With a zero output layer the enhanced token starts as a constant
    (the output bias), which keeps early training stable despite the
    formula having no residual path.
    """

    def __init__(self, dim: int, rng: np.random.Generator,
                 hidden: int | None = None):
        hidden = dim // 2 if hidden is None else hidden
        self.mlp = Mlp(dim, hidden, rng, zero_init_out=True)

    def __call__(self, class_token: Tensor) -> Tensor:
        return self.mlp(class_token)

    def fold(self, class_token: Tensor) -> Tensor:
        """Precompute the enhanced token as a constant.

        The result is a snapshot: later adapter updates do not affect
        it, and forwards that use it match adapter-applied forwards
        exactly.
        """
        return Tensor(self.mlp(class_token).data.copy())

    def params(self):
        return {"mlp": self.mlp.params()}


def group_partition(depth: int, group_size: int) -> list[tuple[int, int]]:
    """Contiguous block groups; the last group absorbs any remainder."""
    if group_size < 1:
        raise ParameterError(f"group_size must be >= 1, got {group_size}")
    n_groups = max(1, -(-depth // group_size))
    bounds = []
    for n in range(n_groups):
        lo = n * group_size
        hi = depth if n == n_groups - 1 else (n + 1) * group_size
        bounds.append((lo, hi))
    return bounds


class EncoderAdapterBank:
    """Per-group merge projection plus residual MLP over block outputs."""

    def __init__(self, dim: int, depth: int, rng: np.random.Generator,
                 group_size: int = 3):
        self.dim = dim
        self.depth = depth
        self.groups = group_partition(depth, group_size)
        self.merges = [Linear((hi - lo) * dim, dim, rng) for lo, hi in self.groups]
        self.mlps = [Mlp(dim, dim // 2, rng, zero_init_out=True)
                     for _ in self.groups]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    def merge_group(self, n: int, block_outputs: list[Tensor]) -> Tensor:
        lo, hi = self.groups[n]
        members = block_outputs[lo:hi]
        return self.merges[n](concat(members, axis=1))

    def adapt(self, block_outputs: list[Tensor]):
        """Return (summed adapted feature, per-group adapted features)."""
        if len(block_outputs) != self.depth:
            raise ConfigError(
                f"bank built for depth {self.depth}, got {len(block_outputs)} blocks")
        adapted = []
        for n in range(self.n_groups):
            z = self.merge_group(n, block_outputs)
            adapted.append(z + self.mlps[n](z))
        total = adapted[0]
        for z in adapted[1:]:
            total = total + z
        return total, adapted

    def params(self):
        tree = {}
        for n in range(self.n_groups):
            tree[f"group{n}"] = {"merge": self.merges[n].params(),
                                 "mlp": self.mlps[n].params()}
        return tree


def contribution_profile(adapted_groups):
    """Mean share of each group in the summed feature, by token L2 norm.

    Tokens where every group is exactly zero are skipped; returns
    (per-group proportions summing to 1, skipped token count).
    """
    if not adapted_groups:
        raise ParameterError("need at least one adapter group")
    norms = np.stack([np.linalg.norm(_data(z), axis=1) for z in adapted_groups])
    totals = norms.sum(axis=0)
    keep = totals > 0.0
    skipped = int((~keep).sum())
    if not keep.any():
        raise ParameterError("all tokens have zero adapted features")
    shares = norms[:, keep] / totals[keep]
    return shares.mean(axis=1), skipped


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


class AdaptedEncoder:
    """The trainable encoder assembly: ViT + input adapter + adapter bank."""

    def __init__(self, encoder: ViT, rng: np.random.Generator,
                 group_size: int = 3):
        self.encoder = encoder
        self.input_adapter = InputAdapter(encoder.cfg.embed_dim, rng)
        self.bank = EncoderAdapterBank(encoder.cfg.embed_dim, encoder.cfg.depth,
                                       rng, group_size=group_size)

    def forward(self, tokens, visible_index=None, class_token: Tensor | None = None):
        """Encode with the enhanced class token, then adapt.

        Returns (adapted feature, per-group features, EncodeResult).
        ``class_token`` overrides the adapter path with a folded token.
        """
        if class_token is None:
            class_token = self.input_adapter(self.encoder.cls_token)
        result: EncodeResult = self.encoder.encode(
            tokens, class_token=class_token, visible_index=visible_index)
        merged, groups = self.bank.adapt(result.x_blocks)
        return merged, groups, result

    def params(self):
        return {"encoder": self.encoder.params(),
                "input_adapter": self.input_adapter.params(),
                "adapters": self.bank.params()}

    def named_params(self) -> dict[str, Tensor]:
        return flatten_params(self.params())


def strip_adapters(adapted: AdaptedEncoder) -> ViT:
    """Keep only the plain encoder; adapters never feed back into it."""
    return adapted.encoder
