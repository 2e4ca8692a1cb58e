"""
On-disk artifact formats.

Binary container (feature cache, standardization stats, checkpoints):

    b"SSNA" | u16 version | u32 header length | JSON header | raw array bytes

The JSON header lists every array (name, little-endian dtype, shape, offset)
plus the producing fingerprint and free-form metadata. Text tables carry the
same fingerprint as leading "# key: value" lines.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
import pandas as pd

from src.errors import CorruptFile, MissingArtifact, PipelineMismatch

MAGIC = b"SSNA"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


@dataclass
class Container:
    """Decoded binary container"""
    fingerprint: str
    meta: Dict[str, Any] = field(default_factory=dict)
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)


def write_container(path, arrays: Mapping[str, np.ndarray], fingerprint: str,
                    meta: Optional[Mapping[str, Any]] = None,
                    dtype: Optional[str] = None) -> Path:
    """Write arrays in order; `dtype` forces one little-endian dtype for all"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    entries = []
    blobs = []
    offset = 0
    for name, array in arrays.items():
        target = np.dtype(dtype) if dtype else np.asarray(array).dtype.newbyteorder("<")
        data = np.ascontiguousarray(array, dtype=target)
        blob = data.tobytes()
        entries.append({"name": name, "dtype": data.dtype.str, "shape": list(data.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)

    header = json.dumps({"fingerprint": fingerprint, "meta": dict(meta or {}), "arrays": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path) -> Container:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"artifact not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _PREFIX.size:
        raise CorruptFile(f"{path}: truncated container")

    magic, version, header_len = _PREFIX.unpack_from(raw, 0)
    if magic != MAGIC or version != VERSION:
        raise CorruptFile(f"{path}: not a scene-sense container")
    body_start = _PREFIX.size + header_len
    try:
        header = json.loads(raw[_PREFIX.size:body_start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"{path}: bad header ({e})") from e

    arrays = {}
    for entry in header["arrays"]:
        start = body_start + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(raw):
            raise CorruptFile(f"{path}: array {entry['name']!r} is truncated")
        data = np.frombuffer(raw[start:stop], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = data.reshape(entry["shape"]).copy()
    return Container(fingerprint=header["fingerprint"], meta=header.get("meta", {}), arrays=arrays)


def check_fingerprint(found: str, expected: str, what: str) -> None:
    if found != expected:
        raise PipelineMismatch(
            f"{what} was produced with fingerprint {found}, current config expects {expected}; "
            f"rerun the producing stage"
        )


def write_table(path, table: pd.DataFrame, fingerprint: str,
                header: Optional[Mapping[str, Any]] = None, write_columns: bool = True) -> Path:
    """Tab-separated table preceded by "# key: value" lines"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"# fingerprint: {fingerprint}"]
    lines += [f"# {key}: {value}" for key, value in (header or {}).items()]
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("\n".join(lines) + "\n")
        table.to_csv(f, sep="\t", index=False, header=write_columns, lineterminator="\n")
    return path


def read_table(path) -> Tuple[pd.DataFrame, Dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise MissingArtifact(f"artifact not found: {path}")
    header: Dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition(": ")
            header[key] = value
    if "fingerprint" not in header:
        raise CorruptFile(f"{path}: missing fingerprint header")
    table = pd.read_csv(path, sep="\t", skiprows=len(header), dtype={"id": str}, float_precision="round_trip")
    return table, header
