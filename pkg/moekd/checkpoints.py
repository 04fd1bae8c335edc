"""
MOEKD1 checkpoint container.

Layout (bit-exact): the 6 magic bytes "MOEKD1", a little-endian uint32 length,
that many bytes of canonical JSON metadata {arch, loss, seed, version}, then the
w1, b1, w2, b2 blocks as little-endian IEEE-754 float64 in row-major order.
"""

import json
import struct

import numpy as np
from django.core.exceptions import ValidationError

from .nn import Architecture, ClassifierParams

MAGIC = b"MOEKD1"
VERSION = 1
_LENGTH = struct.Struct("<I")


def dumps_params(params, loss=None, seed=None):
    metadata = {
        "arch": params.arch.to_dict(),
        "loss": loss.to_dict() if loss is not None else None,
        "seed": seed,
        "version": VERSION,
    }
    header = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _LENGTH.pack(len(header)), header]
    parts.extend(np.ascontiguousarray(block, dtype="<f8").tobytes() for block in params.blocks())
    return b"".join(parts)


def loads_params(data):
    """
    Parse a checkpoint.

    Returns:
        (ClassifierParams, metadata dict)

    Raises:
        ValidationError: bad magic, truncated data or trailing bytes
    """
    if not data.startswith(MAGIC):
        raise ValidationError("Not a MOEKD1 checkpoint (bad magic).", code="bad_checkpoint")
    offset = len(MAGIC)
    try:
        (header_length,) = _LENGTH.unpack_from(data, offset)
        offset += _LENGTH.size
        metadata = json.loads(data[offset:offset + header_length].decode("utf-8"))
        offset += header_length
        arch = Architecture(**metadata["arch"])
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"Corrupted checkpoint header: {exc}", code="bad_checkpoint") from exc

    d, h, c = arch.input_dim, arch.hidden, arch.classes
    shapes = [(d, h), (h,), (h if h else d, c), (c,)]
    blocks = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(data):
            raise ValidationError("Truncated checkpoint.", code="bad_checkpoint")
        blocks.append(np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape))
        offset = end
    if offset != len(data):
        raise ValidationError("Trailing bytes after checkpoint blocks.", code="bad_checkpoint")
    return ClassifierParams(*blocks, arch=arch), metadata


def save_checkpoint(path, params, loss=None, seed=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(dumps_params(params, loss, seed))
    return path


def load_checkpoint(path):
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise ValidationError(f"Missing checkpoint: {path}", code="missing_file") from exc
    return loads_params(data)
