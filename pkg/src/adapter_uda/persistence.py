"""Checkpoint container: full models and adapter-only bundles.

Layout (all integers little-endian)::

    b"ADUA"  u16 version
    u32 header length, header (UTF-8 JSON: model config, scope, fingerprint, meta)
    u32 tensor count, then per tensor (sorted by name):
        u16 name length, name (UTF-8), u8 group, u8 dtype, u8 ndim,
        ndim x u64 dims, u64 payload length, payload (row-major)
    u64 CRC-64/WE of every preceding byte

The checksum is verified on the raw bytes before any tensor is built.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

import crcmod.predefined
import numpy as np

from .errors import ChecksumError, ContractError, FingerprintMismatch, SchemaError
from .model import Group, ModelConfig, ParameterStore, param_shapes

MAGIC = b"ADUA"
FORMAT_VERSION = 1

_crc64 = crcmod.predefined.mkPredefinedCrcFun("crc-64-we")

_GROUP_CODES = {Group.FROZEN: 0, Group.ADAPTER: 1, Group.MLM_HEAD: 2, Group.TASK_HEAD: 3}
_GROUP_FROM_CODE = {v: k for k, v in _GROUP_CODES.items()}
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPE_FROM_CODE = {v: k for k, v in _DTYPE_CODES.items()}

BUNDLE_GROUPS = (Group.ADAPTER, Group.TASK_HEAD)


class Scope(str, enum.Enum):
    FULL = "FULL"
    ADAPTER_ONLY = "ADAPTER_ONLY"


def crc64(data: bytes) -> int:
    return _crc64(data)


def backbone_fingerprint(params: ParameterStore) -> str:
    """64-bit hash (hex) of the model config and every FROZEN tensor in name order."""
    h = hashlib.blake2b(digest_size=8)
    h.update(json.dumps(params.config.to_dict(), sort_keys=True).encode("utf-8"))
    for name in sorted(params.names([Group.FROZEN])):
        arr = np.ascontiguousarray(params[name].data)
        h.update(name.encode("utf-8"))
        h.update(arr.dtype.str.encode("ascii"))
        h.update(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        h.update(arr.tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    """Decoded container contents. ``tensors`` keeps file (name) order."""

    config: ModelConfig
    scope: Scope
    fingerprint: str
    tensors: Dict[str, Tuple[Group, np.ndarray]]
    meta: dict = field(default_factory=dict)


def _encode(params: ParameterStore, names: List[str], header: dict) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", FORMAT_VERSION)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(names))
    for name in names:
        arr = params[name].data
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise ContractError(f"cannot serialize {name!r} with dtype {arr.dtype}")
        raw = name.encode("utf-8")
        payload = np.ascontiguousarray(arr, dtype=dt).tobytes()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BBB", _GROUP_CODES[params.groups[name]], _DTYPE_CODES[dt], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<Q", len(payload)) + payload
    out += struct.pack("<Q", crc64(bytes(out)))
    return bytes(out)


def checkpoint_bytes(
    params: ParameterStore,
    scope: Scope = Scope.FULL,
    include_mlm_head: bool = False,
    meta: Optional[dict] = None,
) -> bytes:
    scope = Scope(scope)
    if scope is Scope.FULL:
        names = sorted(params.names())
    else:
        groups = BUNDLE_GROUPS + ((Group.MLM_HEAD,) if include_mlm_head else ())
        if not params.names([Group.ADAPTER]):
            raise ContractError("ADAPTER_ONLY scope needs a model with adapters (ADAPTER group is empty)")
        names = sorted(params.names(groups))
    header = {
        "model": params.config.to_dict(),
        "scope": scope.value,
        "backbone_fingerprint": backbone_fingerprint(params),
        "meta": meta or {},
    }
    return _encode(params, names, header)


def save_checkpoint(
    params: ParameterStore,
    path: str,
    scope: Scope = Scope.FULL,
    include_mlm_head: bool = False,
    meta: Optional[dict] = None,
) -> int:
    """Write ``params`` to ``path``; returns the byte count.

    ``ADAPTER_ONLY`` keeps the ADAPTER and TASK_HEAD groups (plus MLM_HEAD on
    request) and records the backbone fingerprint. Output bytes depend only on
    the parameter values, config and ``meta``.
    """
    data = checkpoint_bytes(params, scope, include_mlm_head, meta)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return len(data)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SchemaError("checkpoint truncated")
        chunk = self.data[self.pos: self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        s = struct.Struct("<" + fmt)
        return s.unpack(self.take(s.size))


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 2 + 8 or data[:4] != MAGIC:
        raise SchemaError("not an ADUA checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != FORMAT_VERSION:
        raise SchemaError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    actual = crc64(body)
    if actual != stored:
        raise ChecksumError(f"checksum mismatch: stored {stored:016x}, computed {actual:016x}")

    r = _Reader(body)
    r.take(6)
    (hlen,) = r.unpack("I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        config = ModelConfig.from_dict(header["model"])
        scope = Scope(header["scope"])
        fingerprint = str(header["backbone_fingerprint"])
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise SchemaError(f"malformed checkpoint header: {exc}") from exc
    (count,) = r.unpack("I")
    tensors: Dict[str, Tuple[Group, np.ndarray]] = {}
    for _ in range(count):
        (nlen,) = r.unpack("H")
        name = r.take(nlen).decode("utf-8")
        gcode, dcode, ndim = r.unpack("BBB")
        if gcode not in _GROUP_FROM_CODE or dcode not in _DTYPE_FROM_CODE:
            raise SchemaError(f"tensor {name!r}: unknown group/dtype code {gcode}/{dcode}")
        shape = r.unpack(f"{ndim}Q") if ndim else ()
        (nbytes,) = r.unpack("Q")
        dt = _DTYPE_FROM_CODE[dcode]
        if nbytes != int(np.prod(shape, dtype=np.int64)) * dt.itemsize:
            raise SchemaError(f"tensor {name!r}: payload size {nbytes} does not match shape {shape}")
        arr = np.frombuffer(r.take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if name in tensors:
            raise SchemaError(f"duplicate tensor {name!r}")
        tensors[name] = (_GROUP_FROM_CODE[gcode], arr)
    if r.pos != len(body):
        raise SchemaError(f"{len(body) - r.pos} trailing bytes after tensor table")
    return Checkpoint(config, scope, fingerprint, tensors, header.get("meta", {}))


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def _canonical_order(config: ModelConfig, names: Iterable[str]) -> List[str]:
    names = list(names)
    order = {n: i for i, n in enumerate(param_shapes(config))}
    return sorted(names, key=lambda n: (order.get(n, len(order)), n))


def store_from_checkpoint(ckpt: Checkpoint) -> ParameterStore:
    if ckpt.scope is not Scope.FULL:
        raise SchemaError("adapter bundle holds no backbone; use load_adapter_bundle")
    store = ParameterStore(ckpt.config)
    for name in _canonical_order(ckpt.config, ckpt.tensors):
        group, arr = ckpt.tensors[name]
        store.add(name, arr, group)
    expected = param_shapes(ckpt.config)
    missing = [n for n in expected if n not in store]
    if missing:
        raise SchemaError(f"checkpoint lacks tensors {missing[:5]}")
    for n, (shape, group) in expected.items():
        if store[n].shape != tuple(shape) or store.groups[n] is not Group(group):
            raise SchemaError(f"tensor {n!r} is {store[n].shape}/{store.groups[n].value}, "
                              f"expected {tuple(shape)}/{Group(group).value}")
    return store


def load_checkpoint(path: str) -> ParameterStore:
    return store_from_checkpoint(read_checkpoint(path))


def load_adapter_bundle(backbone: ParameterStore, path: str) -> ParameterStore:
    """Return a copy of ``backbone`` with the bundle's tensors swapped in.

    FROZEN tensors are never touched. Refuses bundles exported from a
    different backbone.
    """
    ckpt = read_checkpoint(path)
    if ckpt.scope is not Scope.ADAPTER_ONLY:
        raise SchemaError(f"expected an ADAPTER_ONLY bundle, got scope {ckpt.scope.value}")
    actual = backbone_fingerprint(backbone)
    if ckpt.fingerprint != actual:
        raise FingerprintMismatch(ckpt.fingerprint, actual)
    for name, (group, _) in ckpt.tensors.items():
        if group is Group.FROZEN:
            raise SchemaError(f"bundle contains FROZEN tensor {name!r}")
    required = backbone.names(BUNDLE_GROUPS)
    missing = [n for n in required if n not in ckpt.tensors]
    unknown = [n for n in ckpt.tensors if n not in backbone]
    if missing or unknown:
        raise SchemaError(f"bundle/model tensor names differ: missing {missing[:5]}, unexpected {unknown[:5]}")
    merged = backbone.copy()
    for name, (group, arr) in ckpt.tensors.items():
        t = merged[name]
        if group is not merged.groups[name]:
            raise SchemaError(f"tensor {name!r}: bundle group {group.value}, model group {merged.groups[name].value}")
        if arr.shape != t.shape or arr.dtype != t.dtype:
            raise SchemaError(f"tensor {name!r}: bundle {arr.shape}/{arr.dtype}, model {t.shape}/{t.dtype}")
        t.data = arr.copy()
    return merged
