"""Binary checkpoint files, one per network.

Layout (all integers little-endian)::

    magic         4 bytes   b"NCKP"
    version       uint32
    header_len    uint32
    header        UTF-8 JSON: format version, network name, config echo,
                  array names and shapes in ``ModelParams.ORDER``
    payload       every array as little-endian float32, C order, in that order
    crc32         uint32 over header and payload
"""

import json
import struct
import zlib

import numpy as np

from .exceptions import CheckpointError
from .model import ModelParams

MAGIC = b"NCKP"
CHECKPOINT_VERSION = 1
_U32 = struct.Struct("<I")
_DTYPE = np.dtype("<f4")


def encode_checkpoint(params, config=None, name=""):
    shapes = [list(a.shape) for a in params.arrays()]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "name": name,
        "config": config or {},
        "arrays": [{"name": n, "shape": s} for n, s in zip(ModelParams.ORDER, shapes)],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype=_DTYPE).tobytes() for a in params.arrays())
    crc = zlib.crc32(head + payload)
    return MAGIC + _U32.pack(CHECKPOINT_VERSION) + _U32.pack(len(head)) + head + payload + _U32.pack(crc)


def decode_checkpoint(blob):
    """Parse checkpoint bytes into ``(ModelParams, header dict)``.

    Any structural problem raises ``CheckpointError``.
    """
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = _U32.unpack_from(blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})")
    (head_len,) = _U32.unpack_from(blob, 8)
    head_end = 12 + head_len
    if len(blob) < head_end + 4:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[12:head_end].decode("utf-8"))
        specs = header["arrays"]
        names = [s["name"] for s in specs]
        shapes = [tuple(int(d) for d in s["shape"]) for s in specs]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint header ({exc})") from None
    if tuple(names) != ModelParams.ORDER:
        raise CheckpointError(f"unexpected array list {names}")
    sizes = [int(np.prod(s)) * _DTYPE.itemsize for s in shapes]
    expected = head_end + sum(sizes) + 4
    if len(blob) != expected:
        raise CheckpointError(f"checkpoint has {len(blob)} bytes, expected {expected}")
    (crc,) = _U32.unpack_from(blob, expected - 4)
    if zlib.crc32(blob[12 : expected - 4]) != crc:
        raise CheckpointError("checksum mismatch (file corrupted)")
    arrays, pos = [], head_end
    for shape, size in zip(shapes, sizes):
        a = np.frombuffer(blob, dtype=_DTYPE, count=size // _DTYPE.itemsize, offset=pos)
        arrays.append(a.reshape(shape).astype(np.float64))
        pos += size
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise CheckpointError("checkpoint contains non-finite values")
    return ModelParams(*arrays), header


def save_checkpoint(path, params, config=None, name=""):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(params, config, name))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror}") from None
    return decode_checkpoint(blob)


def check_compatible(params, dataset_dims):
    """Raise ``CheckpointError`` unless ``params`` can encode this dataset."""
    d = params.dims
    if d.d_img_in != dataset_dims["feature_dim"]:
        raise CheckpointError(
            f"checkpoint expects feature_dim {d.d_img_in}, dataset has {dataset_dims['feature_dim']}"
        )
    if d.vocab_size != dataset_dims["vocab_size"]:
        raise CheckpointError(
            f"checkpoint expects vocab_size {d.vocab_size}, dataset has {dataset_dims['vocab_size']}"
        )
