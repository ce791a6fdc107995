"""Two-stage training: category network first, then the instance network."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .fileio import save_model
from .net import ModelParams, NetConfig, build_model, forward_category, forward_instance
from .synth import Sample, encode_sample
from .tensor import NonFiniteError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr_pretrained: float = 0.001
    lr_new: float = 0.01
    lr_decay: float = 0.1
    decay_every: int = 20
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lam: float = 10.0
    seed: int = 0
    # global L2 cap on the data gradient; None disables clipping
    max_grad_norm: Optional[float] = 10.0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.lr_pretrained < 0 or self.lr_new < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be nonnegative")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    def lr_scale(self, epoch: int) -> float:
        if self.decay_every <= 0:
            return 1.0
        return self.lr_decay ** (epoch // self.decay_every)


@dataclass
class RunManifest:
    stage: str
    config: dict
    epoch_losses: list[float] = field(default_factory=list)
    initial_loss: Optional[float] = None
    checkpoints: list[str] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


class SGD:
    """Momentum SGD with L2 weight decay and per-parameter learning rates.

    ``v <- momentum * v - lr * (grad + weight_decay * w);  w <- w + v``
    """

    def __init__(
        self,
        params: Sequence[T.Param],
        lrs: Sequence[float],
        momentum: float,
        weight_decay: float,
        max_grad_norm: Optional[float] = None,
    ):
        self.params = list(params)
        self.max_grad_norm = max_grad_norm
        self.lrs = list(lrs)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in self.params))

    def step(self, scale: float = 1.0) -> None:
        clip = 1.0
        if self.max_grad_norm is not None:
            norm = self.grad_norm()
            if norm > self.max_grad_norm:
                clip = self.max_grad_norm / norm
        for p, lr, v in zip(self.params, self.lrs, self.velocity):
            g = clip * p.grad + self.weight_decay * p.data
            v *= self.momentum
            v -= (lr * scale) * g
            p.data += v

    def zero_grad(self) -> None:
        T.zero_grads(self.params)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(samples: Sequence[Sample], idx) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([samples[i].image for i in idx])
    labels = np.stack([samples[i].labels.astype(np.int64) for i in idx])
    return images, labels


def category_batch_loss(model: ModelParams, images: np.ndarray, labels: np.ndarray) -> Tensor:
    logits = forward_category(model, Tensor(images))
    lab = L.resample_nearest(labels, *logits.shape[-2:])
    return L.cross_entropy_segmentation(logits, lab)


def instance_batch_loss(
    model: ModelParams,
    images: np.ndarray,
    labels: np.ndarray,
    targets: np.ndarray,
    counts: np.ndarray,
    lam: float,
) -> tuple[Tensor, float, float]:
    """Batch-mean joint loss ``lam * L_o + L_n``; also returns both parts."""
    out = forward_instance(model, Tensor(images))
    n = images.shape[0]
    fh, fw = out.fused_pred.shape[-2:]
    omegas = np.array([L.foreground_count(labels[i], fh, fw) for i in range(n)], dtype=np.float64)
    active = omegas > 0
    weights = np.where(active, 1.0 / np.maximum(omegas, 1.0), 0.0) / n
    parts = [L.masked_location_loss(p, targets, labels, weights) for p in out.stream_preds]
    parts.append(L.masked_location_loss(out.fused_pred, targets, labels, weights))
    loc = parts[0]
    for p in parts[1:]:
        loc = T.add(loc, p)
    # count_loss sums per-image losses over the batch
    num = T.mul(L.count_loss(out.counts, counts), 1.0 / n)
    total = L.joint_loss(loc, num, lam)
    return total, float(loc.item()), float(num.item())


def _param_lrs(model: ModelParams, groups_pretrained: Sequence[str], cfg: TrainConfig, trainable: Sequence[str]):
    params, lrs = [], []
    for g in trainable:
        for p in model.group(g):
            params.append(p)
            lrs.append(cfg.lr_pretrained if g in groups_pretrained else cfg.lr_new)
    return params, lrs


def _save(model: ModelParams, out_dir: Optional[Path], stage: str, epoch: int, manifest: RunManifest) -> None:
    if out_dir is None:
        return
    path = Path(out_dir) / f"{stage}_epoch{epoch + 1:03d}.pfnm"
    save_model(model, path)
    manifest.checkpoints.append(str(path))


def train_category(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    net_config: Optional[NetConfig] = None,
    model: Optional[ModelParams] = None,
    out_dir: Optional[Path] = None,
) -> tuple[ModelParams, RunManifest]:
    """Stage 1: cross-entropy on the category head (backbone trained from scratch)."""
    cfg.validate()
    if not samples:
        raise ValueError("empty dataset")
    if model is None:
        if net_config is None:
            net_config = NetConfig(num_categories=samples[0].num_categories)
        model = build_model(net_config, cfg.seed)
    params, lrs = _param_lrs(model, (), cfg, ("backbone", "category_head"))
    opt = SGD(params, lrs, cfg.momentum, cfg.weight_decay, cfg.max_grad_norm)
    rng = np.random.default_rng(cfg.seed)
    manifest = RunManifest("category", asdict(cfg))
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        scale = cfg.lr_scale(epoch)
        total, seen = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            images, labels = _stack(samples, idx)
            opt.zero_grad()
            loss = category_batch_loss(model, images, labels)
            _guard(loss, "category", epoch)
            T.backward(loss)
            opt.step(scale)
            if manifest.initial_loss is None:
                manifest.initial_loss = loss.item()
            total += loss.item() * len(idx)
            seen += len(idx)
        manifest.epoch_losses.append(total / seen)
        logger.info("category epoch %d loss %.5f", epoch + 1, total / seen)
        _save(model, out_dir, "category", epoch, manifest)
    manifest.wall_clock = time.perf_counter() - t0
    return model, manifest


def init_instance_model(init: ModelParams, seed: int, net_config: Optional[NetConfig] = None) -> ModelParams:
    """Fresh instance heads on top of a copy of the stage-1 backbone."""
    cfg = net_config or init.config
    model = build_model(cfg, seed + 1)
    try:
        model.load_state({n: init[n].data for n in init.names() if n.startswith("backbone.")})
    except (KeyError, ValueError) as exc:
        raise ValueError(f"incompatible stage-1 initialisation: {exc}") from exc
    return model


def encode_all(samples: Sequence[Sample], layout: str = "full") -> tuple[np.ndarray, np.ndarray]:
    recs = [encode_sample(s, layout=layout) for s in samples]
    return np.stack([r[2] for r in recs]), np.stack([r[3] for r in recs])


def train_instance(
    samples: Sequence[Sample],
    cfg: TrainConfig,
    init: ModelParams,
    out_dir: Optional[Path] = None,
    net_config: Optional[NetConfig] = None,
) -> tuple[ModelParams, RunManifest]:
    """Stage 2: joint location/count objective; backbone starts from ``init``."""
    cfg.validate()
    if not samples:
        raise ValueError("empty dataset")
    model = init_instance_model(init, cfg.seed, net_config)
    params, lrs = _param_lrs(
        model, ("backbone",), cfg, ("backbone", "streams", "fusion", "count_head")
    )
    opt = SGD(params, lrs, cfg.momentum, cfg.weight_decay, cfg.max_grad_norm)
    targets, counts = encode_all(samples, L.layout_for_dims(model.config.location_dims))
    rng = np.random.default_rng(cfg.seed)
    manifest = RunManifest("instance", asdict(cfg))
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        scale = cfg.lr_scale(epoch)
        total, seen = 0.0, 0
        for idx in _batches(len(samples), cfg.batch_size, rng):
            images, labels = _stack(samples, idx)
            opt.zero_grad()
            loss, loc, num = instance_batch_loss(model, images, labels, targets[idx], counts[idx], cfg.lam)
            _guard(loss, "instance", epoch)
            T.backward(loss)
            opt.step(scale)
            if manifest.initial_loss is None:
                manifest.initial_loss = loss.item()
            total += loss.item() * len(idx)
            seen += len(idx)
        manifest.epoch_losses.append(total / seen)
        logger.info("instance epoch %d loss %.5f (last batch loc %.4f num %.4f)", epoch + 1, total / seen, loc, num)
        _save(model, out_dir, "instance", epoch, manifest)
    manifest.wall_clock = time.perf_counter() - t0
    return model, manifest


def _guard(loss: Tensor, stage: str, epoch: int) -> None:
    v = loss.item()
    if not math.isfinite(v):
        raise NonFiniteError(f"{stage} training: non-finite loss at epoch {epoch + 1}")
