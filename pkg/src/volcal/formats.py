"""Versioned on-disk containers.

Every file written by volcal starts with the line ``# volcal-format v1``.
Binary containers follow it with one JSON header line and then the raw
array bytes, concatenated in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import VersionMismatch

FORMAT_VERSION = 1
FORMAT_LINE = f"# volcal-format v{FORMAT_VERSION}"


def check_format_line(line: str, source: Any = "") -> None:
    if line.rstrip("\r\n") != FORMAT_LINE:
        raise VersionMismatch(f"{source}: expected {FORMAT_LINE!r}, found {line.rstrip()!r}")


def write_container(path: str | os.PathLike, header: Mapping[str, Any],
                    arrays: Mapping[str, np.ndarray]) -> None:
    manifest = []
    chunks = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        manifest.append({"name": name, "dtype": arr.dtype.newbyteorder("<").str,
                         "shape": list(arr.shape), "nbytes": len(data)})
        chunks.append(data)
    meta = dict(header)
    meta["arrays"] = manifest
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write((FORMAT_LINE + "\n").encode())
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        for data in chunks:
            fh.write(data)
    os.replace(tmp, path)


def read_container(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        first = fh.readline()
        try:
            check_format_line(first.decode("utf-8"), path)
        except UnicodeDecodeError:
            raise VersionMismatch(f"{path}: unreadable header") from None
        try:
            meta = json.loads(fh.readline().decode("utf-8"))
            manifest = meta.pop("arrays")
        except (ValueError, KeyError, UnicodeDecodeError):
            raise VersionMismatch(f"{path}: corrupt header") from None
        arrays = {}
        for entry in manifest:
            data = fh.read(entry["nbytes"])
            if len(data) != entry["nbytes"]:
                raise VersionMismatch(f"{path}: truncated array {entry['name']!r}")
            arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
            arrays[entry["name"]] = arr.copy()
    return meta, arrays


def stable_hash(obj: Any) -> str:
    """Short sha256 of the canonical JSON encoding of ``obj``."""
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
