import numpy as np
import pytest

from plat import checkpoint as ck
from plat.data import question_ids
from plat.errors import CheckpointError
from plat.planner import roll_trajectory
from plat.training.grpo import prepare_rl

from conftest import make_bundle


def test_round_trip_is_bitwise(tmp_path, vocab, corpus):
    b = make_bundle(vocab, n_latent=2)
    rng = np.random.default_rng(5)
    rng.random(3)
    path = tmp_path / "m.ckpt"
    ck.save(ck.from_bundle(b, "plat", rng=rng, optimizer={"t": np.array([3.0])}, meta={"x": 1}), path)
    loaded = ck.load(path)
    b2 = ck.to_bundle(loaded)
    for k, v in b.parameters().items():
        assert b2.parameters()[k].data.tobytes() == v.data.tobytes()
    assert loaded.meta == {"x": 1} and loaded.optimizer["t"][0] == 3.0
    assert ck.restore_rng(loaded).random() == rng.random()
    q = question_ids(corpus[0], vocab)
    _, a1 = roll_trajectory(b, q, 2)
    _, a2 = roll_trajectory(b2, q, 2)
    assert a1[1].slots.tobytes() == a2[1].slots.tobytes()


def test_split_bundle_round_trip(tmp_path, vocab):
    b = make_bundle(vocab)
    part = prepare_rl(b)
    path = tmp_path / "rl.ckpt"
    ck.save(ck.from_bundle(b, "rl", partition=part.to_dict()), path)
    loaded = ck.load(path)
    b2 = ck.to_bundle(loaded)
    assert not b2.shared
    assert loaded.partition["frozen"] == part.frozen


@pytest.mark.parametrize("damage", ["truncate", "flip", "magic", "empty"])
def test_corrupt_files_are_rejected(tmp_path, vocab, damage):
    blob = bytearray(ck.to_bytes(ck.from_bundle(make_bundle(vocab), "plat")))
    if damage == "truncate":
        blob = blob[:len(blob) // 2]
    elif damage == "flip":
        blob[len(blob) // 2] ^= 0xFF
    elif damage == "magic":
        blob[:8] = b"NOTACKPT"
    else:
        blob = bytearray()
    with pytest.raises(CheckpointError):
        ck.from_bytes(bytes(blob))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        ck.load(tmp_path / "nope.ckpt")


def test_save_load_save_is_byte_identical(tmp_path, vocab):
    b = make_bundle(vocab)
    first = ck.to_bytes(ck.from_bundle(b, "plat", meta={"k": [1, 2]}))
    assert ck.to_bytes(ck.from_bytes(first)) == first


def test_version_mismatch_is_rejected(vocab):
    import struct
    blob = bytearray(ck.to_bytes(ck.from_bundle(make_bundle(vocab), "plat")))
    blob[8:12] = struct.pack("<I", ck.VERSION + 1)
    with pytest.raises(CheckpointError, match="version"):
        ck.from_bytes(bytes(blob))
