"""Segmenter checkpoints in the ``DAMW`` container, version 2.

Layout (all integers little-endian)::

    b"DAMW"  u16 version=2  u32 section_count
    repeated: 4-byte tag, u64 payload length, payload

Sections:

    CONF  UTF-8 JSON of the :class:`SegConfig`
    MEMO  one per memory block, in block order: the version-1 memory body
          (u32 m, u32 d, xi rows, W_k rows as float64)
    TENS  every other parameter: u32 count, then per tensor
          u16 name length, name, u8 ndim, u32 extents, float64 data

Unknown tags are rejected rather than skipped so a truncated or foreign
file never half-loads.
"""

from __future__ import annotations

import io
import json
import struct
from typing import BinaryIO, Dict, List, Tuple, Union

import numpy as np

from ..dam import MAGIC, StaticMemory, decode_memory_body, encode_memory_body, read_header
from ..errors import FormatError
from ..numerics import Tensor
from .model import Params, SegConfig

CHECKPOINT_VERSION = 2
_TAGS = (b"CONF", b"MEMO", b"TENS")


def _section(tag: bytes, payload: bytes) -> bytes:
    return tag + struct.pack("<Q", len(payload)) + payload


def _encode_tensors(named: List[Tuple[str, np.ndarray]]) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named:
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def _decode_tensors(buf: bytes) -> Dict[str, np.ndarray]:
    fh = io.BytesIO(buf)

    def take(n: int) -> bytes:
        chunk = fh.read(n)
        if len(chunk) != n:
            raise FormatError("truncated tensor section")
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        name = take(n_name).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if fh.read(1):
        raise FormatError("trailing bytes in tensor section")
    return out


def _is_memory_param(name: str) -> bool:
    return name.startswith("mem") and name.endswith((".xi", ".W_k"))


def encode_checkpoint(cfg: SegConfig, params: Params) -> bytes:
    sections = [_section(b"CONF", json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8"))]
    if cfg.use_memory:
        for i in range(cfg.blocks):
            mem = StaticMemory(params[f"mem{i}.xi"], params[f"mem{i}.W_k"])
            sections.append(_section(b"MEMO", encode_memory_body(mem)))
    rest = [(k, v.data) for k, v in sorted(params.items()) if not _is_memory_param(k)]
    sections.append(_section(b"TENS", _encode_tensors(rest)))
    return MAGIC + struct.pack("<HI", CHECKPOINT_VERSION, len(sections)) + b"".join(sections)


def decode_checkpoint(data: bytes) -> Tuple[SegConfig, Params]:
    fh = io.BytesIO(data)
    read_header(fh, CHECKPOINT_VERSION)
    head = fh.read(4)
    if len(head) != 4:
        raise FormatError("truncated checkpoint header")
    (count,) = struct.unpack("<I", head)
    cfg = None
    memories: List[StaticMemory] = []
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        tag = fh.read(4)
        if tag not in _TAGS:
            raise FormatError(f"unknown section tag {tag!r}")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise FormatError("truncated section header")
        (length,) = struct.unpack("<Q", raw_len)
        payload = fh.read(length)
        if len(payload) != length:
            raise FormatError(f"section {tag!r} truncated")
        if tag == b"CONF":
            try:
                cfg = SegConfig(**json.loads(payload.decode("utf-8")))
            except (ValueError, TypeError) as exc:
                raise FormatError(f"bad config section: {exc}") from exc
        elif tag == b"MEMO":
            memories.append(decode_memory_body(payload))
        else:
            arrays.update(_decode_tensors(payload))
    if fh.read(1):
        raise FormatError("trailing bytes after last section")
    if cfg is None:
        raise FormatError("checkpoint has no config section")
    if len(memories) != (cfg.blocks if cfg.use_memory else 0):
        raise FormatError(f"expected {cfg.blocks if cfg.use_memory else 0} memory sections, found {len(memories)}")
    for i, mem in enumerate(memories):
        arrays[f"mem{i}.xi"] = mem.xi.data
        arrays[f"mem{i}.W_k"] = mem.W_k.data
    return cfg, {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def save_checkpoint(cfg: SegConfig, params: Params, target: Union[str, BinaryIO]) -> None:
    payload = encode_checkpoint(cfg, params)
    if isinstance(target, (str, bytes)) or hasattr(target, "__fspath__"):
        with open(target, "wb") as fh:
            fh.write(payload)
    else:
        target.write(payload)


def load_checkpoint(source: Union[str, BinaryIO]) -> Tuple[SegConfig, Params]:
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        with open(source, "rb") as fh:
            return decode_checkpoint(fh.read())
    return decode_checkpoint(source.read())
