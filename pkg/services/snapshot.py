"""
Snapshot files: an 8-byte little-endian header length, a JSON header, then
named tensors as little-endian float32 in header order.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np

from config import ConfigError
from services.gradcore import ParamStore

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
_LENGTH = struct.Struct("<Q")


class SnapshotError(ConfigError):
    """Raised for malformed snapshots or snapshots built on another dataset."""
    pass


def encode_header(header: Dict[str, object]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_snapshot(path: Union[str, Path], params: ParamStore, header: Dict[str, object],
                  names: Optional[Iterable[str]] = None) -> Path:
    """
    Write ``params`` (or the tensors in ``names``) with ``header`` metadata.

    Values are stored as float32; round the store with
    ``ParamStore.to_storage_precision`` first for an exact round-trip.
    """
    names = list(params.names() if names is None else names)
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = [{"name": n, "shape": list(params[n].shape)} for n in names]
    raw_header = encode_header(header)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_LENGTH.pack(len(raw_header)))
        f.write(raw_header)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype="<f4").tobytes())
    logger.info(f"Saved snapshot with {len(names)} tensors to {path}")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, object]:
    with open(path, "rb") as f:
        return _read_header(f.read(), path)[0]


def _read_header(data: bytes, path) -> Tuple[Dict[str, object], int]:
    if len(data) < _LENGTH.size:
        raise SnapshotError(f"{path}: truncated snapshot")
    (length,) = _LENGTH.unpack_from(data)
    end = _LENGTH.size + length
    if end > len(data):
        raise SnapshotError(f"{path}: header length {length} exceeds file size")
    try:
        header = json.loads(data[_LENGTH.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SnapshotError(f"{path}: unreadable header: {e}") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise SnapshotError(f"{path}: unsupported format version {header.get('format_version')}")
    return header, end


def load_snapshot(path: Union[str, Path], expected_checksum: Optional[str] = None) -> Tuple[Dict[str, object], ParamStore]:
    """
    Read a snapshot into a fresh ParamStore.

    Raises:
        SnapshotError: malformed file, or dataset checksum differs from ``expected_checksum``
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e}") from e
    header, offset = _read_header(data, path)

    if expected_checksum is not None and header.get("checksum") != expected_checksum:
        raise SnapshotError(f"{path}: built on dataset {header.get('checksum')}, "
                            f"current dataset is {expected_checksum}")

    params = ParamStore()
    for spec in header.get("tensors", []):
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        size = 4 * count
        if offset + size > len(data):
            raise SnapshotError(f"{path}: tensor {spec['name']} is truncated")
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        params.add(spec["name"], values.astype(np.float64))
        offset += size
    if offset != len(data):
        raise SnapshotError(f"{path}: {len(data) - offset} trailing bytes")
    return header, params
