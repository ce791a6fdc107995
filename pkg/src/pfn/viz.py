"""Binary PPM (P6) dumps of images, label maps and instance masks."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence, Union

import numpy as np

# fixed 16-colour palette; instance k is drawn with PALETTE[k % 16]
PALETTE = np.array(
    [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
        (210, 245, 60),
        (250, 190, 190),
        (0, 128, 128),
        (230, 190, 255),
        (170, 110, 40),
        (255, 250, 200),
        (128, 0, 0),
        (170, 255, 195),
    ],
    dtype=np.uint8,
)


def ppm_bytes(rgb: np.ndarray) -> bytes:
    """Encode an ``H x W x 3`` uint8 array as P6."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"expected H x W x 3 uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(rgb).tobytes()


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def render_masks(masks: Sequence[np.ndarray], shape=None) -> np.ndarray:
    """Paint masks in order over a black canvas, later masks on top."""
    if shape is None:
        if not masks:
            raise ValueError("need a shape for an empty mask list")
        shape = np.asarray(masks[0]).shape
    out = np.zeros(tuple(shape) + (3,), dtype=np.uint8)
    for k, m in enumerate(masks):
        out[np.asarray(m, dtype=bool)] = PALETTE[k % len(PALETTE)]
    return out


def render_label_map(labels: np.ndarray) -> np.ndarray:
    """Label 0 is black; label ``c > 0`` uses ``PALETTE[(c - 1) % 16]``."""
    labels = np.asarray(labels).astype(np.int64)
    out = np.zeros(labels.shape + (3,), dtype=np.uint8)
    fg = labels > 0
    out[fg] = PALETTE[(labels[fg] - 1) % len(PALETTE)]
    return out


def to_rgb(obj: Union[np.ndarray, Sequence[np.ndarray]]) -> np.ndarray:
    """Best-effort conversion to an ``H x W x 3`` uint8 picture.

    * list of boolean masks: palette rendering by instance index
    * ``3 x H x W`` float array: RGB in [0, 1]
    * ``H x W`` float array: grey levels in [0, 1]
    * ``H x W`` integer/bool array: palette rendering by label value
    """
    if isinstance(obj, (list, tuple)):
        return render_masks(obj)
    arr = np.asarray(obj)
    if arr.ndim == 3 and arr.shape[0] == 3:
        return _to_u8(np.moveaxis(arr.astype(np.float64), 0, -1))
    if arr.ndim == 2:
        if arr.dtype.kind in "biu":
            return render_label_map(arr)
        g = _to_u8(arr.astype(np.float64))
        return np.repeat(g[:, :, None], 3, axis=2)
    raise ValueError(f"cannot render array of shape {arr.shape}")


def export_ppm(obj, path) -> None:
    """Write ``obj`` (see :func:`to_rgb`) as a P6 file."""
    Path(path).write_bytes(ppm_bytes(to_rgb(obj)))
