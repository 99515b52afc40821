"""
Persistencia binaria de checkpoints y de la caché de preprocesado.

Sobre común (little-endian):
    magic b"G5CK" | uint32 versión | sha256(payload) | uint64 longitud | payload
Payload:
    uint32 len + metadata JSON | uint32 n_tensores |
    por tensor: uint16 len + nombre | 2 bytes dtype ("f8"/"i8") | uint8 ndim | ndim×uint64 | datos
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from hashlib import sha256
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from logger_config import logger
from src.errors import ContractError, IncompatibleVersionError, IntegrityError

MAGIC = b"G5CK"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI32sQ")
_DTYPES = {b"f8": (np.dtype("<f8"), np.float64), b"i8": (np.dtype("<i8"), np.int64)}


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def nbytes(self) -> int:
        return sum(int(t.nbytes) for t in self.tensors.values())


def _encode_tensor(buf: io.BytesIO, name: str, array: np.ndarray) -> None:
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.floating):
        code, data = b"f8", np.ascontiguousarray(array, dtype="<f8")
    elif np.issubdtype(array.dtype, np.integer) or array.dtype == np.bool_:
        code, data = b"i8", np.ascontiguousarray(array, dtype="<i8")
    else:
        raise ContractError(f"tensor '{name}' has unsupported dtype {array.dtype}")
    raw_name = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw_name)))
    buf.write(raw_name)
    buf.write(code)
    buf.write(struct.pack("<B", data.ndim))
    buf.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    buf.write(data.tobytes())


def encode_payload(metadata: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    meta = json.dumps(metadata, sort_keys=True, ensure_ascii=False).encode("utf-8")
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        _encode_tensor(buf, name, tensors[name])
    return buf.getvalue()


def _take(view: memoryview, offset: int, size: int) -> Tuple[memoryview, int]:
    if offset + size > len(view):
        raise IntegrityError("payload ends inside a record")
    return view[offset:offset + size], offset + size


def decode_payload(payload: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    view = memoryview(payload)
    chunk, off = _take(view, 0, 4)
    (meta_len,) = struct.unpack("<I", chunk)
    chunk, off = _take(view, off, meta_len)
    try:
        metadata = json.loads(bytes(chunk).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"metadata block unreadable: {exc}") from exc
    chunk, off = _take(view, off, 4)
    (count,) = struct.unpack("<I", chunk)
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        chunk, off = _take(view, off, 2)
        (name_len,) = struct.unpack("<H", chunk)
        chunk, off = _take(view, off, name_len)
        name = bytes(chunk).decode("utf-8")
        code, off = _take(view, off, 2)
        entry = _DTYPES.get(bytes(code))
        if entry is None:
            raise IntegrityError(f"unknown dtype code {bytes(code)!r} for '{name}'")
        dtype, native = entry
        chunk, off = _take(view, off, 1)
        (ndim,) = struct.unpack("<B", chunk)
        chunk, off = _take(view, off, 8 * ndim)
        shape = struct.unpack(f"<{ndim}Q", chunk)
        size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        chunk, off = _take(view, off, size)
        tensors[name] = np.frombuffer(bytes(chunk), dtype=dtype).reshape(shape).astype(native)
    if off != len(view):
        raise IntegrityError(f"{len(view) - off} trailing bytes after last tensor")
    return metadata, tensors


def write_envelope(path: str | os.PathLike, metadata: Mapping[str, Any], tensors: Mapping[str, np.ndarray]) -> Path:
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    payload = encode_payload(metadata, tensors)
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, sha256(payload).digest(), len(payload))
    tmp = target.with_name(f"{target.name}.{os.getpid()}.tmp")
    # 'xb' falla si otro escritor ya tiene el temporal
    with open(tmp, "xb") as handle:
        handle.write(header)
        handle.write(payload)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, target)
    return target


def read_envelope(path: str | os.PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    source = Path(path)
    blob = source.read_bytes()
    if len(blob) < _HEADER.size:
        raise IntegrityError(f"{source}: truncated header ({len(blob)} bytes)")
    magic, version, digest, length = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise IntegrityError(f"{source}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise IncompatibleVersionError(version, FORMAT_VERSION, str(source))
    payload = blob[_HEADER.size:]
    if len(payload) != length:
        raise IntegrityError(f"{source}: payload is {len(payload)} bytes, header says {length}")
    if sha256(payload).digest() != digest:
        raise IntegrityError(f"{source}: checksum mismatch")
    return decode_payload(payload)


def save_checkpoint(checkpoint: Checkpoint, path: str | os.PathLike) -> Path:
    meta = dict(checkpoint.metadata)
    meta["kind"] = "checkpoint"
    target = write_envelope(path, meta, checkpoint.tensors)
    logger.info("Checkpoint saved: %s (%d tensors, %d bytes of parameters)", target, len(checkpoint.tensors), checkpoint.nbytes())
    return target


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    metadata, tensors = read_envelope(path)
    if metadata.get("kind") != "checkpoint":
        raise IntegrityError(f"{path}: not a checkpoint (kind={metadata.get('kind')!r})")
    return Checkpoint(tensors=tensors, metadata=metadata, version=FORMAT_VERSION)


def save_preprocess_cache(path: str | os.PathLike, metadata: Mapping[str, Any], arrays: Mapping[str, np.ndarray]) -> Path:
    meta = dict(metadata)
    meta["kind"] = "preprocess"
    return write_envelope(path, meta, arrays)


def load_preprocess_cache(path: str | os.PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    metadata, arrays = read_envelope(path)
    if metadata.get("kind") != "preprocess":
        raise IntegrityError(f"{path}: not a preprocess cache (kind={metadata.get('kind')!r})")
    return metadata, arrays
