"""The toy proposal-free network.

Layout (defaults in brackets)::

    image (3 x H x W)
      conv3x3 [16] -> relu ------------------- f1 (H)
      maxpool 2 ------------------------------ p1 (H/2)
      conv3x3 [32] -> relu -> maxpool 2 ------ p2 (H/4)
      conv3x3 [64] -> relu ------------------- f3 (H/4)
      conv3x3 [64] -> relu ------------------- f4 (H/4)

    category head: 1x1 conv over [f1, upsampled f4] -> C+1 logits
    stream m:      conv3x3 -> relu -> [., x-map, y-map] -> conv3x3 -> dims
                   attached to the last M of (image, p1, p2, f3, f4)
    fusion:        window-average every stream to the coarsest one,
                   concatenate, 1x1 conv -> dims
    count head:    [f4, fused] -> conv3x3/2 -> relu -> global mean
                   -> linear [64] -> relu -> linear -> C
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .losses import LAYOUTS
from .tensor import Param, Tensor

GROUPS = ("backbone", "category_head", "streams", "fusion", "count_head")
ATTACH_POINTS = ("image", "pool1", "pool2", "block3", "final")
_ATTACH_STRIDE = {"image": 1, "pool1": 2, "pool2": 4, "block3": 4, "final": 4}


@dataclass
class NetConfig:
    num_categories: int = 3
    input_channels: int = 3
    backbone_widths: tuple[int, int, int] = (16, 32, 64)
    num_streams: int = 5
    stream_hidden: int = 16
    location_dims: int = 6
    category_downsample: int = 1
    count_hidden: int = 64
    count_conv: int = 32
    init_std: float = 0.01
    # std of backbone and category-head weights; None means init_std
    backbone_init_std: float | None = None
    # "raw": literal pixel indices; "unit": indices divided by the map extent
    coord_mode: str = "unit"

    def validate(self) -> None:
        if self.num_categories < 1 or self.input_channels < 1:
            raise ValueError("num_categories and input_channels must be positive")
        if len(self.backbone_widths) != 3 or min(self.backbone_widths) < 1:
            raise ValueError("backbone_widths must list three positive channel counts")
        if not 1 <= self.num_streams <= len(ATTACH_POINTS):
            raise ValueError(f"num_streams must be in 1..{len(ATTACH_POINTS)}")
        if self.location_dims not in {v for v in LAYOUTS.values()}:
            raise ValueError("location_dims must be one of 2, 4, 6, 10")
        d = self.category_downsample
        if d < 1 or d & (d - 1):
            raise ValueError("category_downsample must be a power of two")
        if self.stream_hidden < 1 or self.count_hidden < 1 or self.count_conv < 1:
            raise ValueError("head widths must be positive")
        if self.coord_mode not in ("raw", "unit"):
            raise ValueError("coord_mode must be 'raw' or 'unit'")

    @property
    def attach_points(self) -> tuple[str, ...]:
        return ATTACH_POINTS[len(ATTACH_POINTS) - self.num_streams :]

    @property
    def min_input_multiple(self) -> int:
        return max(4, self.category_downsample)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        d["backbone_widths"] = tuple(d["backbone_widths"])
        return cls(**d)


class ModelParams:
    """Ordered, uniquely named collection of :class:`Param` tensors."""

    def __init__(self, config: NetConfig, params: "OrderedDict[str, Param] | None" = None):
        self.config = config
        self.params: OrderedDict[str, Param] = params if params is not None else OrderedDict()

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Param(value, name=name)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def group(self, group: str) -> list[Param]:
        if group not in GROUPS:
            raise KeyError(group)
        return [p for n, p in self.params.items() if n.split(".", 1)[0] == group]

    def zero_grad(self) -> None:
        T.zero_grads(self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state(self, state: dict, strict: bool = True) -> None:
        for name, value in state.items():
            if name not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {name!r}")
                continue
            p = self.params[name]
            if p.shape != tuple(value.shape):
                raise ValueError(f"shape mismatch for {name}: {p.shape} vs {value.shape}")
            p.data[...] = value

    def copy(self) -> "ModelParams":
        out = ModelParams(self.config)
        for n, p in self.params.items():
            out.add(n, p.data.copy())
        return out


class InstanceForward(NamedTuple):
    stream_preds: list[Tensor]
    fused_pred: Tensor
    counts: Tensor
    features: Tensor


def build_model(config: NetConfig, rng_seed: int = 0) -> ModelParams:
    """Weights drawn from N(0, std^2) by a seeded generator, biases zero."""
    config.validate()
    rng = np.random.default_rng(rng_seed)
    model = ModelParams(config)
    bstd = config.backbone_init_std if config.backbone_init_std is not None else config.init_std

    def conv(name, cout, cin, k, std):
        model.add(f"{name}.w", (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32))
        model.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    def fc(name, cout, cin, std):
        model.add(f"{name}.w", (rng.standard_normal((cout, cin)) * std).astype(np.float32))
        model.add(f"{name}.b", np.zeros(cout, dtype=np.float32))

    w1, w2, w3 = config.backbone_widths
    cin = config.input_channels
    conv("backbone.conv1", w1, cin, 3, bstd)
    conv("backbone.conv2", w2, w1, 3, bstd)
    conv("backbone.conv3", w3, w2, 3, bstd)
    conv("backbone.conv4", w3, w3, 3, bstd)
    conv("category_head.conv", config.num_categories + 1, w1 + w3, 1, bstd)

    std = config.init_std
    in_ch = {"image": cin, "pool1": w1, "pool2": w2, "block3": w3, "final": w3}
    for m, point in enumerate(config.attach_points):
        conv(f"streams.{m}.conv1", config.stream_hidden, in_ch[point], 3, std)
        conv(f"streams.{m}.conv2", config.location_dims, config.stream_hidden + 2, 3, std)
    conv("fusion.conv", config.location_dims, config.num_streams * config.location_dims, 1, std)
    conv("count_head.conv", config.count_conv, w3 + config.location_dims, 3, std)
    fc("count_head.fc1", config.count_hidden, config.count_conv, std)
    fc("count_head.fc2", config.num_categories, config.count_hidden, std)
    return model


def make_coordinate_maps(height: int, width: int) -> np.ndarray:
    """2 x H x W raw pixel indices: channel 0 is x (column), channel 1 is y (row)."""
    if height < 1 or width < 1:
        raise ValueError("coordinate maps need positive extents")
    ys, xs = np.mgrid[0:height, 0:width]
    return np.stack([xs, ys]).astype(np.float32)


def _conv(model: ModelParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = model[f"{name}.w"]
    pad = w.shape[-1] // 2
    return T.conv2d(x, w, model[f"{name}.b"], stride=stride, pad=pad)


def _check_image(model: ModelParams, image: Tensor) -> None:
    cfg = model.config
    if image.ndim not in (3, 4):
        raise ValueError(f"image must be C x H x W or N x C x H x W, got {image.shape}")
    if image.shape[-3] != cfg.input_channels:
        raise ValueError(f"image has {image.shape[-3]} channels, model expects {cfg.input_channels}")
    h, w = image.shape[-2:]
    k = cfg.min_input_multiple
    if h < 8 or w < 8 or h % k or w % k:
        raise ValueError(f"spatial extent {h}x{w} must be at least 8 and divisible by {k}")


def backbone(model: ModelParams, image: Tensor) -> dict[str, Tensor]:
    _check_image(model, image)
    f1 = T.relu(_conv(model, "backbone.conv1", image))
    p1 = T.max_pool2d(f1, 2, 2)
    f2 = T.relu(_conv(model, "backbone.conv2", p1))
    p2 = T.max_pool2d(f2, 2, 2)
    f3 = T.relu(_conv(model, "backbone.conv3", p2))
    f4 = T.relu(_conv(model, "backbone.conv4", f3))
    return {"image": image, "conv1": f1, "pool1": p1, "pool2": p2, "block3": f3, "final": f4}


def _to_stride(x: Tensor, have: int, want: int) -> Tensor:
    if want == have:
        return x
    if want > have:
        return T.avg_pool2d(x, want // have)
    return T.upsample_nearest(x, have // want)


def forward_category(model: ModelParams, image) -> Tensor:
    """Per-pixel logits over C+1 classes at ``1 / category_downsample`` resolution."""
    image = image if isinstance(image, Tensor) else Tensor(image)
    feats = backbone(model, image)
    return category_logits(model, feats)


def category_logits(model: ModelParams, feats: dict[str, Tensor]) -> Tensor:
    d = model.config.category_downsample
    low = _to_stride(feats["conv1"], 1, d)
    high = _to_stride(feats["final"], 4, d)
    return _conv(model, "category_head.conv", T.concat_channels([low, high]))


def _coords_like(x: Tensor, mode: str) -> Tensor:
    h, w = x.shape[-2:]
    cm = make_coordinate_maps(h, w)
    if mode == "unit":
        cm = cm / np.array([w, h], dtype=np.float32)[:, None, None]
    if x.ndim == 4:
        cm = np.broadcast_to(cm, (x.shape[0],) + cm.shape)
    return Tensor(cm, dtype=x.dtype)


def stream_forward(model: ModelParams, m: int, x: Tensor, coordinate_maps: bool = True) -> Tensor:
    h = T.relu(_conv(model, f"streams.{m}.conv1", x))
    if coordinate_maps:
        h = T.concat_channels([h, _coords_like(h, model.config.coord_mode)])
    else:
        h = T.concat_channels([h, Tensor(np.zeros((h.shape[:-3]) + (2,) + h.shape[-2:]), dtype=h.dtype)])
    return _conv(model, f"streams.{m}.conv2", h)


def fuse_streams(stream_preds: list[Tensor], model: ModelParams) -> Tensor:
    """Window-average every stream to the coarsest resolution, concat, 1x1 conv."""
    if not stream_preds:
        raise ValueError("need at least one stream")
    target_h = min(p.shape[-2] for p in stream_preds)
    target_w = min(p.shape[-1] for p in stream_preds)
    resampled = []
    for p in stream_preds:
        fh, fw = p.shape[-2] // target_h, p.shape[-1] // target_w
        if fh != fw or fh * target_h != p.shape[-2] or fw * target_w != p.shape[-1]:
            raise ValueError(f"stream of size {p.shape[-2:]} not reducible to {target_h}x{target_w}")
        resampled.append(T.avg_pool2d(p, fh))
    return _conv(model, "fusion.conv", T.concat_channels(resampled))


def count_head(model: ModelParams, features: Tensor, fused_pred: Tensor) -> Tensor:
    fh, fw = features.shape[-2:]
    if fused_pred.shape[-2:] != (fh, fw):
        factor = fused_pred.shape[-2] // fh
        fused_pred = T.avg_pool2d(fused_pred, factor) if factor > 1 else T.upsample_nearest(fused_pred, fh // fused_pred.shape[-2])
    x = T.concat_channels([features, fused_pred])
    x = T.relu(_conv(model, "count_head.conv", x, stride=2))
    x = T.global_avg_pool(x)
    x = T.relu(T.linear(x, model["count_head.fc1.w"], model["count_head.fc1.b"]))
    return T.linear(x, model["count_head.fc2.w"], model["count_head.fc2.b"])


def forward_instance(model: ModelParams, image, coordinate_maps: bool = True) -> InstanceForward:
    image = image if isinstance(image, Tensor) else Tensor(image)
    feats = backbone(model, image)
    preds = [
        stream_forward(model, m, feats[point], coordinate_maps)
        for m, point in enumerate(model.config.attach_points)
    ]
    fused = fuse_streams(preds, model)
    counts = count_head(model, feats["final"], fused)
    return InstanceForward(preds, fused, counts, feats["final"])


def stream_strides(config: NetConfig) -> list[int]:
    return [_ATTACH_STRIDE[p] for p in config.attach_points]
