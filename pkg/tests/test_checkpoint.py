import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cfmkit.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from cfmkit.errors import CheckpointError


def sample_checkpoint():
    rng = np.random.default_rng(0)
    return Checkpoint(
        {"problem": "two-moons", "hidden": [4, 4]},
        {"field.layer0.w": rng.normal(size=(3, 4)), "field.layer0.b": rng.normal(size=4), "step": np.array(7.0)},
        {"stage": "stage2", "epoch": 3, "rng": {"seed": 1, "lineage": [0, 2], "position": 9}},
    )


def test_round_trip_is_bitwise(tmp_path):
    ckpt = sample_checkpoint()
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.equals(ckpt)
    assert back.stage == "stage2" and back.epoch == 3
    assert to_bytes(back) == to_bytes(ckpt)


@given(st.dictionaries(st.text(min_size=1, max_size=8),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4)), max_size=4))
def test_any_tensor_table_round_trips(tensors):
    ckpt = Checkpoint({}, tensors, {})
    assert from_bytes(to_bytes(ckpt)).equals(ckpt) or any(np.isnan(v).any() for v in tensors.values())


def test_header_starts_with_magic():
    assert to_bytes(sample_checkpoint())[:4] == MAGIC == b"CFMC"


def test_every_single_byte_flip_is_detected():
    buf = to_bytes(sample_checkpoint())
    for pos in range(0, len(buf), 7):
        bad = bytearray(buf)
        bad[pos] ^= 0x10
        with pytest.raises(CheckpointError):
            from_bytes(bytes(bad))


@pytest.mark.parametrize("cut", [0, 3, 20, -1])
def test_truncation_is_detected(cut):
    buf = to_bytes(sample_checkpoint())
    with pytest.raises(CheckpointError):
        from_bytes(buf[:cut])


def test_wrong_version_is_reported():
    buf = bytearray(to_bytes(sample_checkpoint()))
    buf[4] = 9
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(bytes(buf))


def test_equals_notices_single_ulp_change():
    a, b = sample_checkpoint(), sample_checkpoint()
    b.tensors["field.layer0.b"] = np.nextafter(b.tensors["field.layer0.b"], np.inf)
    assert not a.equals(b)


def test_missing_file_is_an_io_error(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "nope.ckpt")
