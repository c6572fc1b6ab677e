"""MCKP parameter container: ordered, named float64 blobs with shapes.

Layout (little-endian)::

    magic "MCKP" | u16 version | u32 count
    per entry: u16 name length | name (utf-8) | u8 ndim | ndim * u32 dims | f64 data
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import FormatError
from .encoders import EncoderSpec, PatchEncoder
from .tensor import DimensionError

MAGIC = b"MCKP"
VERSION = 1
_HEAD = struct.Struct("<4sHI")


def dumps(state: dict[str, np.ndarray]) -> bytes:
    parts = [_HEAD.pack(MAGIC, VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype="<f8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(raw: bytes) -> dict[str, np.ndarray]:
    if len(raw) < _HEAD.size:
        raise FormatError("checkpoint shorter than its header", len(raw))
    magic, version, count = _HEAD.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    pos, out = _HEAD.size, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + n].decode()
            pos += n
            (ndim,) = struct.unpack_from("<B", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 1)
            pos += 1 + 4 * ndim
            size = int(np.prod(shape, dtype=np.int64)) * 8
            if pos + size > len(raw):
                raise FormatError(f"blob {name!r} runs past end of file", pos)
            out[name] = np.frombuffer(raw, dtype="<f8", count=size // 8, offset=pos).reshape(shape).copy()
            pos += size
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint ({exc})", pos) from None
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after last blob", pos)
    return out


def save(path, state: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(state))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def spec_from_state(state: dict[str, np.ndarray], patch: int) -> EncoderSpec:
    """Recover an encoder's architecture from its parameter shapes."""
    channels, kernels = [], []
    i = 0
    while f"stages.{i}.kernels" in state:
        out_c, in_c, k, _ = state[f"stages.{i}.kernels"].shape
        if i == 0:
            in_ch = in_c
        channels.append(out_c)
        kernels.append(k)
        i += 1
    if not channels or "head.W" not in state:
        raise FormatError("checkpoint does not hold a patch encoder", 0)
    spec = EncoderSpec(tuple(channels), tuple(kernels), state["head.W"].shape[0], patch, in_ch)
    if min(spec.stage_sizes()) < 1 or spec.flat_dim() != state["head.W"].shape[1]:
        raise DimensionError(f"checkpoint encoder does not fit {patch}px patches")
    return spec


def save_encoder(path, enc: PatchEncoder) -> None:
    save(path, enc.state_dict())


def load_encoder(path, patch: int) -> PatchEncoder:
    """A frozen encoder rebuilt from a checkpoint."""
    state = load(path)
    enc = PatchEncoder(spec_from_state(state, patch), np.random.default_rng(0))
    enc.load_state_dict(state)
    enc.freeze()
    return enc
