"""Inference with both trained networks and the decoding modes."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .decoder import DecodeParams, Instance, decode_instances
from .fileio import Prediction
from .losses import layout_for_dims
from .net import ModelParams, forward_category, forward_instance
from .synth import Sample, encode_sample
from .tensor import Tensor

MODES = ("full", "upperbound_instnum", "upperbound_instloc")


def _upsample_to(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    fh, fw = h // arr.shape[-2], w // arr.shape[-1]
    if fh * arr.shape[-2] != h or fw * arr.shape[-1] != w:
        raise ValueError(f"cannot upsample {arr.shape[-2:]} to {h}x{w} by an integer factor")
    return np.repeat(np.repeat(arr, fh, axis=-2), fw, axis=-1)


def infer(
    category_model: ModelParams,
    instance_model: ModelParams,
    samples: Sequence[Sample],
    batch_size: int = 8,
) -> list[Prediction]:
    """Labels, softmax probabilities, full-resolution location maps and counts."""
    out: list[Prediction] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        h, w = images.shape[-2:]
        logits = forward_category(category_model, Tensor(images))
        probs = T.softmax_channels(logits).data
        probs = _upsample_to(probs, h, w)
        labels = probs.argmax(axis=1)
        inst = forward_instance(instance_model, Tensor(images))
        locs = _upsample_to(inst.fused_pred.data, h, w)
        counts = inst.counts.data
        for i in range(len(chunk)):
            out.append(
                Prediction(
                    labels[i].astype(np.float32),
                    locs[i].astype(np.float32),
                    counts[i].astype(np.float32),
                    probs[i].astype(np.float32),
                )
            )
    return out


def run_pipeline(
    mode: str,
    preds: Optional[Sequence[Prediction]] = None,
    gts: Optional[Sequence[Sample]] = None,
    params: Optional[DecodeParams] = None,
) -> list[list[Instance]]:
    """Decode every image under one of the evaluation modes.

    ``full`` uses predictions only; ``upperbound_instnum`` swaps in the true
    counts; ``upperbound_instloc`` clusters the true location targets on the
    true label map with the true counts.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    params = params or DecodeParams()
    if mode != "full" and gts is None:
        raise ValueError(f"mode {mode} needs ground truth")
    if mode != "upperbound_instloc" and preds is None:
        raise ValueError(f"mode {mode} needs predictions")
    n = len(gts) if preds is None else len(preds)
    if gts is not None and len(gts) != n:
        raise ValueError("predictions and ground truth differ in length")
    results = []
    for i in range(n):
        if mode == "upperbound_instloc":
            g = gts[i]
            dims = preds[i].locations.shape[0] if preds is not None else 6
            _img, labels, targets, counts = encode_sample(g, layout=layout_for_dims(dims))
            insts = decode_instances(labels, targets, counts, None, params)
        else:
            p = preds[i]
            counts = gts[i].counts if mode == "upperbound_instnum" else p.counts
            insts = decode_instances(p.labels, p.locations, counts, p.probs, params)
        results.append(insts)
    return results


def ground_truth_instances(samples: Sequence[Sample]) -> list[list[tuple[int, np.ndarray]]]:
    return [s.instances() for s in samples]
