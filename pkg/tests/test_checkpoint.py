import struct

import numpy as np
import pytest

from stseg.checkpoint import MAGIC, Checkpoint
from stseg.config import DecoderConfig
from stseg.errors import CheckpointError
from stseg.model import SegmentationModel, forward
from stseg.optim import OptimizerState, adam_step


def small_model(kind="sptcn", seed=0):
    cfg = DecoderConfig(num_layers=2, kernel_t=3, feature_size=4, temporal_window=4, num_classes=3, encoder_channels=(4, 4))
    return SegmentationModel.create(cfg, kind, seed=seed)


def test_save_load_save_is_byte_identical(tmp_path, rng):
    m = small_model()
    opt = OptimizerState(lr=1e-3)
    adam_step(m.params, {k: rng.normal(size=p.shape).astype(np.float32) for k, p in m.params.items()}, opt)
    Checkpoint.from_model(m, opt, {"epoch": 1, "note": "x"}).save(tmp_path / "a.ckpt")
    Checkpoint.load(tmp_path / "a.ckpt").save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = Checkpoint.load(tmp_path / "b.ckpt")
    assert back.optimizer.step == 1 and back.meta == {"epoch": 1, "note": "x"}
    assert set(back.optimizer.m) == set(m.params)


@pytest.mark.parametrize("kind", ["sptcn", "single_frame"])
def test_loaded_model_predicts_identically(tmp_path, rng, kind):
    m = small_model(kind, seed=3)
    m.buffers[next(iter(m.buffers))][...] += 0.25
    Checkpoint.from_model(m).save(tmp_path / "m.ckpt")
    m2 = Checkpoint.load(tmp_path / "m.ckpt").to_model()
    clip = rng.integers(0, 256, size=(4, 16, 16, 3)).astype(np.uint8)
    assert forward(clip, m).tobytes() == forward(clip, m2).tobytes()
    assert m2.kind == kind and m2.config == m.config


def test_bad_magic_rejected():
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOPE" + b"\x00" * 20)


def test_truncated_checkpoint_rejected():
    raw = Checkpoint.from_model(small_model()).to_bytes()
    for cut in (6, 20, len(raw) - 3):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(raw[:cut])


def test_wrong_version_rejected():
    raw = Checkpoint.from_model(small_model()).to_bytes()
    bad = MAGIC + struct.pack("<I", 99) + raw[8:]
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bad)


def test_missing_file_is_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "absent.ckpt")


def test_header_is_json_after_magic():
    raw = Checkpoint.from_model(small_model()).to_bytes()
    version, n = struct.unpack_from("<II", raw, 4)
    import json

    header = json.loads(raw[12 : 12 + n])
    assert version == 1 and header["kind"] == "sptcn" and header["model"]["num_classes"] == 3
