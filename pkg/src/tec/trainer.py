"""Training loops: the conditional pretraining run, the pixel-MIM toy
base pretrainer that bootstraps a frozen base from scratch, and the
chaining of rounds where a finished run becomes the next base.

All randomness is derived from the run seed through fixed streams, so a
run is reproducible bit for bit: stream 1 seeds model init (keyed by
round), stream 2 per-image masks, stream 3 per-image augmentation.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_io
from .adapters import AdaptedEncoder, strip_adapters
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .decoder import ATTENTION, FEATURE, MultiTargetDecoder
from .errors import ConfigError, IngestionError, NumericError, ParameterError
from .losses import LossReport, attention_loss, feature_loss, total_loss
from .masking import MaskSpec, derived_seed, sample_mask, split_tokens
from .nn import INIT_STD, Block, Linear, flatten_params, set_requires_grad
from .optim import AdamW, lr_at
from .targets import TargetConfig, base_features, build_attention_target, \
    patch_dim_normalize
from .tensor import Tensor
from .vit import ViT, ViTConfig, patchify

STREAM_MODEL = 1
STREAM_MASK = 2
STREAM_AUG = 3


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    base_lr: float = 1.5e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    batch_size: int = 64
    warmup_epochs: int = 2
    total_epochs: int = 20
    seed: int = 0
    # task
    lambda_att: float = 1.0
    mask_ratio: float = 0.75
    augment: bool = True
    # model (desk-scale defaults)
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    depth: int = 6
    heads: int = 4
    embed_dim: int = 128
    mlp_ratio: float = 4.0
    dec_dim: int = 64
    dec_heads: int = 4
    group_size: int = 3

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")

    @property
    def effective_lr(self) -> float:
        # linear batch-size scaling against a 256 reference
        return self.base_lr * self.batch_size / 256.0

    def vit_config(self) -> ViTConfig:
        return ViTConfig(image_size=self.image_size, patch_size=self.patch_size,
                         channels=self.channels, depth=self.depth,
                         heads=self.heads, embed_dim=self.embed_dim,
                         mlp_ratio=self.mlp_ratio)


@dataclass
class RunResult:
    history: list[LossReport] = field(default_factory=list)
    encoder: ViT | None = None
    adapted: AdaptedEncoder | None = None
    decoder: object | None = None

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.total for r in self.history])


def worker_count() -> int:
    """Worker cap for target precomputation, from TEC_THREADS."""
    try:
        return max(1, int(os.environ.get("TEC_THREADS", "1")))
    except ValueError:
        return 1


def _schedule(cfg: TrainConfig, total_steps: int):
    warmup = max(1, round(total_steps * cfg.warmup_epochs / cfg.total_epochs))
    warmup = min(warmup, total_steps - 1)

    def at(step: int) -> float:
        return lr_at(step, base_lr=cfg.effective_lr, warmup_steps=warmup,
                     total_steps=total_steps, min_lr=cfg.min_lr)
    return at


def _check_finite_loss(value: float, step: int, batch_index: int, image_id: str):
    if not np.isfinite(value):
        raise NumericError(
            f"non-finite loss at step {step}, batch index {batch_index} "
            f"(image {image_id})")


# -- conditional pretraining ------------------------------------------------------


def build_new_model(cfg: TrainConfig, round_index: int = 0):
    """Fresh encoder + adapters + decoder, seeded independently per round."""
    rng = np.random.default_rng(derived_seed(cfg.seed, STREAM_MODEL, round_index))
    encoder = ViT(cfg.vit_config(), rng)
    adapted = AdaptedEncoder(encoder, rng, group_size=cfg.group_size)
    decoder = MultiTargetDecoder(cfg.embed_dim, cfg.vit_config().num_patches, rng,
                                 dec_dim=cfg.dec_dim, dec_heads=cfg.dec_heads,
                                 mlp_ratio=cfg.mlp_ratio)
    return adapted, decoder


def trainable_params(adapted: AdaptedEncoder, decoder: MultiTargetDecoder):
    params = adapted.named_params()
    params.update(flatten_params(decoder.params(), prefix="decoder."))
    return params


def compute_targets(base: ViT, image: np.ndarray, tcfg: TargetConfig):
    """Both reconstruction targets from one frozen-base image."""
    feats = patch_dim_normalize(base_features(base, image, tcfg.feature_blocks))
    att_target = build_attention_target(base, image, tcfg)
    return feats, att_target


def student_loss(adapted: AdaptedEncoder, decoder: MultiTargetDecoder,
                 image: np.ndarray, mask: MaskSpec, feats, att_target,
                 heads: int, lambda_att: float):
    """Masked student forward against precomputed targets."""
    tokens = patchify(image, adapted.encoder.cfg.patch_size)
    visible, visible_index = split_tokens(tokens, mask)
    z_e, _, _ = adapted.forward(visible, visible_index)

    dec_f = decoder.decode(decoder.prepare_input(z_e, mask, FEATURE))
    dec_a = decoder.decode(decoder.prepare_input(z_e, mask, ATTENTION))
    z_f = decoder.predict_features(dec_f)
    pred = decoder.predict_attention(dec_a, att_target.selected_index, heads)

    l_fea = feature_loss(feats.normalized, z_f, mask)
    l_att = attention_loss(att_target.rows, pred.rows)
    total = total_loss(l_fea, l_att, lambda_att)
    return total, l_fea.item(), l_att.item()


def tec_image_loss(base: ViT, adapted: AdaptedEncoder,
                   decoder: MultiTargetDecoder, image: np.ndarray,
                   mask: MaskSpec, tcfg: TargetConfig, lambda_att: float):
    """Full loss for one image; returns (total tensor, report floats)."""
    feats, att_target = compute_targets(base, image, tcfg)
    return student_loss(adapted, decoder, image, mask, feats, att_target,
                        base.cfg.heads, lambda_att)


def _prepare_image(cfg: TrainConfig, corpus, item: int, step: int,
                   slot: int) -> tuple[np.ndarray, MaskSpec]:
    image = corpus[item].pixels
    if cfg.augment:
        rng = np.random.default_rng(derived_seed(cfg.seed, STREAM_AUG, step, slot))
        image = data_io.random_resized_crop(image, rng)
    L = cfg.vit_config().num_patches
    mask = sample_mask(L, cfg.mask_ratio,
                       derived_seed(cfg.seed, STREAM_MASK, step, slot))
    return image, mask


def train_step(base: ViT, adapted: AdaptedEncoder, decoder: MultiTargetDecoder,
               opt: AdamW, batch: "_Batch", cfg: TrainConfig, tcfg: TargetConfig,
               step: int, lr: float) -> LossReport:
    """One optimizer update over a batch of corpus indices.

    Target computation against the frozen base is pure, so it may fan
    out over TEC_THREADS workers; gradients are then accumulated in
    fixed slot order, keeping the step deterministic.
    """
    opt.zero_grad()
    prepared = [_prepare_image(cfg, batch.corpus, item, step, slot)
                for slot, item in enumerate(batch.items)]

    workers = worker_count()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            targets = list(pool.map(
                lambda im: compute_targets(base, im[0], tcfg), prepared))
    else:
        targets = [compute_targets(base, image, tcfg)
                   for image, _ in prepared]

    fea = att = tot = 0.0
    masked_total = 0
    for slot, ((image, mask), (feats, att_target)) in enumerate(
            zip(prepared, targets)):
        total, l_fea, l_att = student_loss(
            adapted, decoder, image, mask, feats, att_target,
            base.cfg.heads, cfg.lambda_att)
        _check_finite_loss(total.item(), step, slot,
                           batch.corpus[batch.items[slot]].id)
        total.backward()
        fea += l_fea
        att += l_att
        tot += total.item()
        masked_total += mask.masked_count
    n = len(batch.items)
    opt.scale_grads(1.0 / n)
    opt.step(lr)
    return LossReport(feature=fea / n, attention=att / n, total=tot / n,
                      lambda_attention=cfg.lambda_att,
                      masked_count=masked_total // n)


@dataclass
class _Batch:
    corpus: list
    items: list[int]


def train_tec(base: ViT, corpus, cfg: TrainConfig, tcfg: TargetConfig,
              steps: int | None = None, round_index: int = 0,
              metrics_path=None, log=None) -> RunResult:
    """Run conditional pretraining against a frozen base encoder."""
    if base.cfg.num_patches != cfg.vit_config().num_patches:
        raise ConfigError("base and new model must share the patch grid")
    if tcfg.k >= base.cfg.num_patches:
        raise ParameterError(
            f"k={tcfg.k} must be < L={base.cfg.num_patches}")
    set_requires_grad(base.named_params(), False)

    adapted, decoder = build_new_model(cfg, round_index)
    params = trainable_params(adapted, decoder)
    opt = AdamW(params, betas=cfg.betas, weight_decay=cfg.weight_decay)

    steps_per_epoch = max(1, len(corpus) // cfg.batch_size)
    total_steps = steps if steps is not None else steps_per_epoch * cfg.total_epochs
    schedule = _schedule(cfg, total_steps)

    result = RunResult(encoder=adapted.encoder, adapted=adapted, decoder=decoder)
    writer = _MetricsWriter(metrics_path)
    try:
        step = 0
        epoch = 0
        while step < total_steps:
            for items in data_io.epoch_batches(len(corpus), cfg.batch_size,
                                               cfg.seed, epoch):
                if step >= total_steps:
                    break
                lr = schedule(step)
                report = train_step(base, adapted, decoder, opt,
                                    _Batch(corpus, list(items)), cfg, tcfg,
                                    step, lr)
                result.history.append(report)
                writer.write(report, step, lr)
                if log:
                    log(step, report, lr)
                step += 1
            epoch += 1
    finally:
        writer.close()
    return result


class _MetricsWriter:
    def __init__(self, path):
        self._fh = None
        if path is not None:
            self._fh = open(path, "w")
            self._fh.write(LossReport.csv_header() + "\n")

    def write(self, report: LossReport, step: int, lr: float):
        if self._fh:
            self._fh.write(report.csv_row(step, lr) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


# -- pixel-MIM base pretraining -----------------------------------------------------


class PixelDecoder:
    """Small mask-filling decoder reconstructing normalised patch pixels."""

    def __init__(self, encoder_dim: int, num_patches: int, token_dim: int,
                 rng: np.random.Generator, dim: int = 64, heads: int = 4,
                 mlp_ratio: float = 4.0):
        self.dim = dim
        self.num_patches = num_patches
        self.embed = Linear(encoder_dim, dim, rng)
        self.mask_token = Tensor(rng.normal(0.0, INIT_STD, size=dim),
                                 requires_grad=True)
        self.pos_embed = Tensor(
            rng.normal(0.0, INIT_STD, size=(num_patches + 1, dim)),
            requires_grad=True)
        self.blocks = [Block(dim, heads, mlp_ratio, rng) for _ in range(2)]
        self.head = Linear(dim, token_dim, rng)

    def __call__(self, latent: Tensor, mask: MaskSpec) -> Tensor:
        L = self.num_patches
        z = self.embed(latent)
        placed = z.scatter_rows(np.concatenate([[0], mask.visible_index + 1]),
                                L + 1)
        fill = Tensor(np.zeros((mask.masked_count, self.dim))) + self.mask_token
        z = placed + fill.scatter_rows(mask.masked_index + 1, L + 1)
        z = z + self.pos_embed
        for blk in self.blocks:
            z, _, _ = blk(z)
        return self.head(z.gather_rows(np.arange(1, L + 1)))

    def params(self):
        tree = {"embed": self.embed.params(), "mask_token": self.mask_token,
                "pos_embed": self.pos_embed, "head": self.head.params()}
        for i, blk in enumerate(self.blocks):
            tree[f"block{i}"] = blk.params()
        return tree


def normalized_pixel_target(tokens: np.ndarray) -> np.ndarray:
    """Per-patch standardisation of raw pixel tokens (biased variance)."""
    mu = tokens.mean(axis=1, keepdims=True)
    var = tokens.var(axis=1, keepdims=True)
    return (tokens - mu) / np.sqrt(var + 1e-6)


def mim_image_loss(encoder: ViT, pix_decoder: PixelDecoder, image: np.ndarray,
                   mask: MaskSpec) -> Tensor:
    tokens = patchify(image, encoder.cfg.patch_size)
    target = normalized_pixel_target(tokens)
    visible, visible_index = split_tokens(tokens, mask)
    enc = encoder.encode(visible, visible_index=visible_index)
    latent = encoder.norm(enc.last)
    pred = pix_decoder(latent, mask)
    return feature_loss(target, pred, mask)


def pretrain_base_mim(cfg: TrainConfig, corpus, steps: int | None = None,
                      metrics_path=None, log=None) -> RunResult:
    """Train a toy pixel-MIM base encoder from scratch."""
    rng = np.random.default_rng(derived_seed(cfg.seed, STREAM_MODEL, 0))
    encoder = ViT(cfg.vit_config(), rng)
    pix = PixelDecoder(cfg.embed_dim, cfg.vit_config().num_patches,
                       cfg.vit_config().token_dim, rng, dim=cfg.dec_dim,
                       heads=cfg.dec_heads, mlp_ratio=cfg.mlp_ratio)
    params = flatten_params(encoder.params(), prefix="encoder.")
    params.update(flatten_params(pix.params(), prefix="pixel_decoder."))
    opt = AdamW(params, betas=cfg.betas, weight_decay=cfg.weight_decay)

    steps_per_epoch = max(1, len(corpus) // cfg.batch_size)
    total_steps = steps if steps is not None else steps_per_epoch * cfg.total_epochs
    schedule = _schedule(cfg, total_steps)

    result = RunResult(encoder=encoder)
    writer = _MetricsWriter(metrics_path)
    try:
        step = 0
        epoch = 0
        while step < total_steps:
            for items in data_io.epoch_batches(len(corpus), cfg.batch_size,
                                               cfg.seed, epoch):
                if step >= total_steps:
                    break
                lr = schedule(step)
                opt.zero_grad()
                running = 0.0
                for slot, item in enumerate(items):
                    image, mask = _prepare_image(cfg, corpus, int(item), step,
                                                 slot)
                    loss = mim_image_loss(encoder, pix, image, mask)
                    _check_finite_loss(loss.item(), step, slot,
                                       corpus[int(item)].id)
                    loss.backward()
                    running += loss.item()
                opt.scale_grads(1.0 / len(items))
                opt.step(lr)
                report = LossReport(feature=running / len(items), attention=0.0,
                                    total=running / len(items),
                                    lambda_attention=0.0, masked_count=0)
                result.history.append(report)
                writer.write(report, step, lr)
                if log:
                    log(step, report, lr)
                step += 1
            epoch += 1
    finally:
        writer.close()
    return result


# -- checkpointing glue ---------------------------------------------------------------


def encoder_arrays(encoder: ViT) -> dict[str, np.ndarray]:
    return {f"encoder.{n}": p.data for n, p in encoder.named_params().items()}


def save_encoder(path, encoder: ViT, step: int = 0, extra_config: dict | None = None,
                 dtype: str = "f64") -> None:
    config = {"kind": "encoder", "model": asdict(encoder.cfg)}
    if extra_config:
        config.update(extra_config)
    save_checkpoint(path, encoder_arrays(encoder), config, step=step, dtype=dtype)


def save_full_state(path, adapted: AdaptedEncoder, decoder: MultiTargetDecoder,
                    cfg: TrainConfig, step: int = 0, dtype: str = "f64") -> None:
    arrays = {n: p.data for n, p in trainable_params(adapted, decoder).items()}
    config = {"kind": "tec_full", "model": asdict(adapted.encoder.cfg),
              "train": _config_dict(cfg)}
    save_checkpoint(path, arrays, config, step=step, dtype=dtype)


def _config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["betas"] = list(d["betas"])
    return d


def load_encoder(path, frozen: bool = True) -> ViT:
    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") not in ("encoder", "tec_full"):
        raise IngestionError(f"{path} does not hold an encoder checkpoint")
    encoder = ViT(ViTConfig(**ckpt.config["model"]), np.random.default_rng(0))
    named = encoder.named_params()
    wanted = {f"encoder.{n}" for n in named}
    have = {n for n in ckpt.arrays if n.startswith("encoder.")}
    if wanted - have:
        raise IngestionError(f"{path} is missing arrays: {sorted(wanted - have)[:3]}")
    for name, p in named.items():
        arr = ckpt.arrays[f"encoder.{name}"]
        if tuple(arr.shape) != p.data.shape:
            raise IngestionError(f"{path}: shape mismatch for {name}")
        p.data = arr.copy()
    set_requires_grad(named, not frozen)
    return encoder


def load_full_state(path, cfg: TrainConfig | None = None):
    """Rebuild (adapted, decoder) from a full-state checkpoint."""
    ckpt = load_checkpoint(path)
    if ckpt.config.get("kind") != "tec_full":
        raise IngestionError(f"{path} does not hold a full training state")
    train_cfg = ckpt.config.get("train", {})
    if cfg is None:
        train_cfg = dict(train_cfg)
        train_cfg["betas"] = tuple(train_cfg.get("betas", (0.9, 0.95)))
        cfg = TrainConfig(**train_cfg)
    adapted, decoder = build_new_model(cfg)
    params = trainable_params(adapted, decoder)
    for name, p in params.items():
        if name not in ckpt.arrays:
            raise IngestionError(f"{path} is missing array {name}")
        if tuple(ckpt.arrays[name].shape) != p.data.shape:
            raise IngestionError(f"{path}: shape mismatch for {name}")
        p.data = ckpt.arrays[name].copy()
    return adapted, decoder, cfg


def chain_round(prev_encoder_path, corpus, cfg: TrainConfig, tcfg: TargetConfig,
                round_index: int, steps: int | None = None,
                metrics_path=None, log=None) -> RunResult:
    """A further round: the previous stripped encoder becomes the frozen base."""
    base = load_encoder(prev_encoder_path, frozen=True)
    return train_tec(base, corpus, cfg, tcfg, steps=steps,
                     round_index=round_index, metrics_path=metrics_path, log=log)
