import struct

import numpy as np
import pytest

from pfn import fileio as F
from pfn.decoder import Instance
from pfn.fileio import FormatError, Prediction
from pfn.net import NetConfig, build_model
from pfn.synth import GenConfig, generate_dataset


def _samples_equal(a, b):
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert np.array_equal(x.labels, y.labels) and x.labels.dtype == y.labels.dtype
        assert np.array_equal(x.instance_ids, y.instance_ids)
        assert x.boxes == y.boxes
        assert x.counts.tobytes() == y.counts.tobytes()
    assert len(a) == len(b)


def test_tensor_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(), (3,), (2, 3, 4), (1, 0, 2)]:
        arr = rng.normal(size=shape).astype(np.float32)
        F.save_tensor(arr, tmp_path / "t.pfnt")
        back = F.load_tensor(tmp_path / "t.pfnt")
        assert back.shape == arr.shape and back.tobytes() == arr.tobytes()
    special = np.array([np.nan, -0.0, np.inf, 1e-45], dtype=np.float32)
    assert F.tensor_from_bytes(F.tensor_to_bytes(special)).tobytes() == special.tobytes()


def test_tensor_layout():
    raw = F.tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
    assert raw[:4] == b"PFNT" and raw[4] == 1 and raw[5] == 2
    assert struct.unpack("<2I", raw[6:14]) == (1, 2)
    assert struct.unpack("<2f", raw[14:]) == (1.0, 2.0)


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XFNT" + b[4:],
        lambda b: b[:4] + b"\x09" + b[5:],
        lambda b: b[:-1],
        lambda b: b + b"\x00",
    ],
    ids=["magic", "version", "truncated", "trailing"],
)
def test_tensor_rejects_corruption(mutate):
    raw = F.tensor_to_bytes(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(FormatError):
        F.tensor_from_bytes(mutate(raw))


def test_model_roundtrip(tmp_path):
    cfg = NetConfig(num_streams=2)
    model = build_model(cfg, rng_seed=3)
    F.save_model(model, tmp_path / "m.pfnm")
    back = F.load_model(tmp_path / "m.pfnm")
    assert back.names() == model.names()
    for name in model.names():
        assert back[name].data.tobytes() == model[name].data.tobytes()
    assert back.config.to_dict() == cfg.to_dict()
    assert F.model_to_bytes(back) == F.model_to_bytes(model)
    with pytest.raises(FormatError):
        F.model_from_bytes(b"PFNT" + F.model_to_bytes(model)[4:])


def test_dataset_roundtrip(tmp_path):
    samples = generate_dataset(GenConfig(seed=1), 6)
    F.save_dataset(samples, tmp_path / "d.pfnd")
    _samples_equal(F.load_dataset(tmp_path / "d.pfnd"), samples)
    assert F.dataset_to_bytes(F.load_dataset(tmp_path / "d.pfnd")) == F.dataset_to_bytes(samples)


def test_empty_dataset(tmp_path):
    F.save_dataset([], tmp_path / "e.pfnd", num_categories=3)
    assert F.load_dataset(tmp_path / "e.pfnd") == []


def test_dataset_rejects_bad_magic_and_truncation():
    raw = F.dataset_to_bytes(generate_dataset(GenConfig(seed=1), 2))
    with pytest.raises(FormatError):
        F.dataset_from_bytes(b"PFNX" + raw[4:])
    with pytest.raises(FormatError):
        F.dataset_from_bytes(raw[: len(raw) // 2])


def test_predictions_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    preds = [
        Prediction(rng.integers(0, 4, (4, 4)).astype(np.float32), rng.normal(size=(6, 4, 4)).astype(np.float32),
                   rng.random(3).astype(np.float32), rng.random((4, 4, 4)).astype(np.float32)),
        Prediction(np.zeros((4, 4), np.float32), np.zeros((6, 4, 4), np.float32), np.zeros(3, np.float32)),
    ]
    F.save_predictions(preds, tmp_path / "p.pfnp")
    back = F.load_predictions(tmp_path / "p.pfnp")
    for a, b in zip(preds, back):
        for x, y in zip(a, b):
            assert (x is None and y is None) or x.tobytes() == y.tobytes()
    raw = F.predictions_to_bytes(preds)
    with pytest.raises(FormatError):
        F.predictions_from_bytes(b"PFNQ" + raw[4:])


def test_instances_roundtrip(tmp_path):
    m = np.zeros((3, 3), dtype=bool)
    m[1, 1:] = True
    per_image = [[Instance(2, m, 0.75)], []]
    F.save_instances(per_image, tmp_path / "i.pfni")
    back = F.load_instances(tmp_path / "i.pfni")
    assert len(back) == 2 and back[1] == []
    assert back[0][0].category == 2 and back[0][0].score == 0.75
    assert np.array_equal(back[0][0].mask, m)


def test_missing_file_is_format_error(tmp_path):
    with pytest.raises(FormatError):
        F.load_dataset(tmp_path / "nope.pfnd")
