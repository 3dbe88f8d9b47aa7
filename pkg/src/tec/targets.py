"""Patch-relation enhanced reconstruction targets from a frozen base encoder.

Two complementary targets are built from one full-image forward pass of
the base model:

* a feature target: the mean of the configured block outputs (class
  token dropped), standardised per channel across the patch axis, so
  that values within each channel spread apart and inter-patch relations
  survive into the regression target;
* a semantic attention target: the last block's scaled query-key logits,
  restricted to the k most class-salient patch queries plus the class
  query itself, re-softmaxed over all L patch keys under a temperature.

Both are plain numpy arrays: the base side is frozen, so no gradients
ever flow through target construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .vit import ViT, class_attention_last_block, patchify

SIGMA_EPS = 1e-6
HIST_BINS = 50


@dataclass(frozen=True)
class TargetConfig:
    tau: float = 1.8          # temperature on the base-side attention rows
    k: int = 15               # class-salient patches kept per image
    feature_blocks: tuple[int, ...] | None = None  # None = last two blocks

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if self.k < 1:
            raise ParameterError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class FeatureTarget:
    raw: np.ndarray          # L x C block-average features
    normalized: np.ndarray   # L x C, standardised per channel over patches
    mu: np.ndarray           # per-channel mean, length C
    sigma: np.ndarray        # per-channel population std, length C


@dataclass(frozen=True)
class AttentionTarget:
    class_attention: np.ndarray  # head-averaged class-to-patch attention, length L
    selected_index: np.ndarray   # sorted indices of the k most salient patches
    rows: np.ndarray             # H x (k+1) x L, class row last


def resolve_feature_blocks(depth: int,
                           feature_blocks: tuple[int, ...] | None) -> tuple[int, ...]:
    if feature_blocks is None:
        return (depth - 1,) if depth == 1 else (depth - 2, depth - 1)
    blocks = tuple(int(b) for b in feature_blocks)
    if not blocks or any(b < 0 or b >= depth for b in blocks):
        raise ParameterError(f"feature_blocks {blocks} out of range for depth {depth}")
    return blocks


def base_features(model: ViT, image: np.ndarray,
                  feature_blocks: tuple[int, ...] | None = None) -> np.ndarray:
    """Mean of the configured block outputs over a full image, class token dropped."""
    blocks = resolve_feature_blocks(model.cfg.depth, feature_blocks)
    result = model.encode(patchify(image, model.cfg.patch_size))
    stacked = np.stack([result.x_blocks[b].data[1:] for b in blocks])
    return stacked.mean(axis=0)


def patch_dim_normalize(features: np.ndarray) -> FeatureTarget:
    """Standardise each channel across the patch axis.

    Per channel the mean over patches is subtracted and the population
    std (plus a small epsilon) divides, so constant channels map to
    zero instead of blowing up.
    """
    if features.shape[0] < 2:
        raise ParameterError("patch-dim normalization needs at least 2 patches")
    mu = features.mean(axis=0)
    sigma = features.std(axis=0)
    normalized = (features - mu) / (sigma + SIGMA_EPS)
    return FeatureTarget(raw=features, normalized=normalized, mu=mu, sigma=sigma)


def channel_dim_normalize(features: np.ndarray) -> np.ndarray:
    """Comparison mode: standardise each patch row across channels."""
    if features.shape[1] < 2:
        raise ParameterError("channel-dim normalization needs at least 2 channels")
    mu = features.mean(axis=1, keepdims=True)
    sigma = features.std(axis=1, keepdims=True)
    return (features - mu) / (sigma + SIGMA_EPS)


def mean_pairwise_cosine(features: np.ndarray):
    """Mean cosine similarity over all unordered patch pairs.

    Pairs involving a zero-norm row are skipped and counted. Returns
    (mean, histogram counts over HIST_BINS bins spanning [-1, 1],
    bin edges, skipped pair count).
    """
    L = features.shape[0]
    if L < 2:
        raise ParameterError("need at least 2 patches for pairwise similarity")
    norms = np.linalg.norm(features, axis=1)
    valid = norms > 0.0
    unit = np.zeros_like(features)
    unit[valid] = features[valid] / norms[valid, None]
    gram = unit @ unit.T
    iu, ju = np.triu_indices(L, k=1)
    pair_ok = valid[iu] & valid[ju]
    values = np.clip(gram[iu, ju][pair_ok], -1.0, 1.0)
    skipped = int((~pair_ok).sum())
    if values.size == 0:
        raise ParameterError("all patch pairs involve zero-norm rows")
    hist, edges = np.histogram(values, bins=HIST_BINS, range=(-1.0, 1.0))
    return float(values.mean()), hist, edges, skipped


def select_semantic_patches(class_attention: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest entries of the head-averaged class attention.

    Ties break toward the lower index; the result is sorted ascending.
    """
    a = np.asarray(class_attention, dtype=np.float64)
    if a.ndim == 2:
        a = a.mean(axis=0)
    L = a.shape[0]
    if k >= L:
        raise ParameterError(f"k={k} must be smaller than L={L}")
    order = np.argsort(-a, kind="stable")
    return np.sort(order[:k])


def _softmax_rows(logits: np.ndarray, tau: float) -> np.ndarray:
    z = (logits - logits.max(axis=-1, keepdims=True)) / tau
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def build_attention_target(model: ViT, image: np.ndarray,
                           cfg: TargetConfig) -> AttentionTarget:
    """Semantic attention rows for the k selected patch queries plus the class query.

    Rows are recomputed from the last block's scaled query-key logits
    (class-key column excluded) and softmaxed with temperature
    ``cfg.tau``, so tau=1 recovers the block's own attention over patch
    keys. The class-query row is placed last.
    """
    tokens = patchify(image, model.cfg.patch_size)
    result = model.encode(tokens)
    attn = result.attention[-1].data
    class_rows = attn[:, 0, 1:]
    a_c = (class_rows / class_rows.sum(axis=-1, keepdims=True)).mean(axis=0)
    selected = select_semantic_patches(a_c, cfg.k)

    logits = result.last_logits.data  # H x (L+1) x (L+1), already 1/sqrt(dh) scaled
    patch_query_rows = logits[:, selected + 1, 1:]
    class_query_row = logits[:, 0:1, 1:]
    stacked = np.concatenate([patch_query_rows, class_query_row], axis=1)
    return AttentionTarget(class_attention=a_c, selected_index=selected,
                           rows=_softmax_rows(stacked, cfg.tau))


def class_attention_entropy(model: ViT, image: np.ndarray) -> float:
    """Entropy of the head-averaged class-to-patch attention (nats)."""
    a = class_attention_last_block(model, image).mean(axis=0)
    a = a / a.sum()
    return float(-(a * np.log(a + 1e-12)).sum())
