import numpy as np
import pytest

from fofa import checkpoint as ck
from fofa.backbone import BackboneConfig
from fofa.data import SplitDataset
from fofa.model import ModelConfig
from fofa.training import TrainConfig, fit
from oracles import random_batch, small_model


def _trained():
    gen = np.random.default_rng(0)
    data = SplitDataset([gen.integers(0, 20, size=9) for _ in range(6)], gen.integers(0, 20, size=6), 20,
                        np.arange(6), np.arange(20))
    cfg = TrainConfig(epochs=1, batch_size=3)
    state = fit(data, ModelConfig(BackboneConfig(n_blocks=2, d=8, n_items=20, max_seq_len=8)), cfg)
    return state, cfg


def test_roundtrip_is_byte_identical_and_restores_the_model(tmp_path, gen):
    state, cfg = _trained()
    c = ck.capture(state.model, cfg, state.rng, state.optimizer, {"note": "x"})
    path = tmp_path / "m.ckpt"
    n = ck.save(path, c)
    assert n == path.stat().st_size
    back = ck.load(path)
    assert ck.to_bytes(back) == path.read_bytes()
    assert back.train_config == cfg.to_dict() and back.meta == {"note": "x"}
    assert back.rng_state() == state.rng
    model = back.model()
    inputs, mask = random_batch(gen, 20, 3, 8)
    np.testing.assert_array_equal(model.forward(inputs, mask).rep.data, state.model.forward(inputs, mask).rep.data)


def test_writing_twice_gives_the_same_bytes():
    model = small_model()
    assert ck.to_bytes(ck.capture(model)) == ck.to_bytes(ck.capture(model))


def test_corruption_and_truncation_are_rejected():
    blob = bytearray(ck.to_bytes(ck.capture(small_model())))
    with pytest.raises(ck.CheckpointError):
        ck.from_bytes(bytes(blob[:10]))
    with pytest.raises(ck.CheckpointError):
        ck.from_bytes(b"NOTACKPT" + bytes(blob[8:]))
    for pos in (20, len(blob) // 2, len(blob) - 5):
        bad = bytearray(blob)
        bad[pos] ^= 0x40
        with pytest.raises(ck.CheckpointError):
            ck.from_bytes(bytes(bad))


def test_unknown_version_is_rejected():
    import struct
    import zlib

    blob = ck.to_bytes(ck.capture(small_model()))
    body = bytearray(blob[:-4])
    body[8:10] = struct.pack("<H", 99)
    with pytest.raises(ck.CheckpointError, match="version"):
        ck.from_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
