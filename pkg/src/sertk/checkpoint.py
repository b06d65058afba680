"""Binary model checkpoints.

Layout (little-endian)::

    b"SERC" | version u32 | json length u32 | JSON {"config": ..., "meta": ...}
    | parameters as float32, declaration order | CRC32 of everything before it
"""

import json
import struct
import zlib

import numpy as np

from .autodiff import Tensor
from .errors import BadMagic, CrcMismatch, VersionUnsupported
from .vit import ModelConfig, VisionTransformer, parameter_shapes

MAGIC = b"SERC"
VERSION = 1


def checkpoint_bytes(model, meta=None):
    blob = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name in parameter_shapes(model.config):
        parts.append(np.ascontiguousarray(model.params[name].data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def model_from_bytes(data):
    """Inverse of :func:`checkpoint_bytes`; returns ``(model, meta)``."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagic("not a SERC checkpoint")
    if len(data) < 16:
        raise CrcMismatch("checkpoint truncated")
    version, blob_len = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionUnsupported(f"checkpoint version {version}; this build reads {VERSION}")
    body, stored = data[:-4], struct.unpack_from("<I", data, len(data) - 4)[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored:
        raise CrcMismatch("checkpoint CRC32 does not match its contents")
    header = json.loads(body[12:12 + blob_len].decode())
    cfg = ModelConfig.from_dict(header["config"])
    pos = 12 + blob_len
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        n = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(shape)
        params[name] = Tensor(arr.astype(np.float32), requires_grad=True)
        pos += 4 * n
    if pos != len(body):
        raise CrcMismatch(f"checkpoint has {len(body) - pos} unexpected trailing bytes")
    return VisionTransformer(cfg, params), header.get("meta", {})


def save_checkpoint(model, path, meta=None):
    """Write ``model``; parameters are stored as float32."""
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def load_checkpoint(path, with_meta=False):
    with open(path, "rb") as fh:
        model, meta = model_from_bytes(fh.read())
    return (model, meta) if with_meta else model
