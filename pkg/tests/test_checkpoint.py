import struct

import numpy as np
import pytest

from noisycorr.checkpoint import (
    check_compatible,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from noisycorr.exceptions import CheckpointError
from noisycorr.model import ModelDims, init_params

DIMS = ModelDims(d_img_in=5, d_word=3, d_joint=4, vocab_size=12, n_pseudo_classes=3)


def test_round_trip_is_float32_exact(tmp_path):
    p = init_params(DIMS, 0)
    path = tmp_path / "n.ckpt"
    save_checkpoint(path, p, {"seed": 0}, "A")
    back, header = load_checkpoint(path)
    assert header["name"] == "A" and header["config"] == {"seed": 0}
    for a, b in zip(p.arrays(), back.arrays()):
        np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))
    # re-encoding the loaded params reproduces the file byte for byte
    assert encode_checkpoint(back, {"seed": 0}, "A") == path.read_bytes()


def corruptions(blob):
    yield "magic", b"XXXX" + blob[4:]
    yield "version", blob[:4] + struct.pack("<I", 7) + blob[8:]
    yield "truncated", blob[:-9]
    yield "header", blob[:12] + b"#" + blob[13:]
    flipped = bytearray(blob)
    flipped[-20] ^= 0xFF
    yield "payload", bytes(flipped)
    yield "empty", b""


@pytest.mark.parametrize("kind", ["magic", "version", "truncated", "header", "payload", "empty"])
def test_corruption_is_detected(kind):
    blob = encode_checkpoint(init_params(DIMS, 1))
    bad = dict(corruptions(blob))[kind]
    with pytest.raises(CheckpointError):
        decode_checkpoint(bad)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_compatibility_check():
    p = init_params(DIMS, 0)
    check_compatible(p, {"feature_dim": 5, "vocab_size": 12})
    with pytest.raises(CheckpointError, match="feature_dim"):
        check_compatible(p, {"feature_dim": 6, "vocab_size": 12})
    with pytest.raises(CheckpointError, match="vocab_size"):
        check_compatible(p, {"feature_dim": 5, "vocab_size": 13})
