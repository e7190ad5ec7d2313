"""Binary weights container used for all network parameter files.

Layout: magic bytes ``DPEDW1\\0\\0``; u32 little-endian manifest length;
UTF-8 JSON manifest ``{format_version, network_kind, tensors: [{name,
dtype, shape, offset, byte_len}]}``; then the raw tensor payloads,
row-major little-endian, in manifest order. Offsets are relative to the
start of the payload section.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import IoError, SchemaError

MAGIC = b"DPEDW1\x00\x00"
FORMAT_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def save_tensors(path: str | os.PathLike, network_kind: str, tensors: dict[str, np.ndarray]) -> None:
    """Write named tensors to a container file. Order is preserved."""
    entries = []
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        # note: ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arr)
        shape = list(arr.shape)
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            dtype = "f64"
        else:
            dtype = "f32"
            arr = arr.astype("<f4", copy=False)
        raw = arr.astype(_DTYPES[dtype], copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": dtype,
                "shape": shape,
                "offset": offset,
                "byte_len": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"format_version": FORMAT_VERSION, "network_kind": network_kind, "tensors": entries}
    ).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(manifest)))
            f.write(manifest)
            for raw in payloads:
                f.write(raw)
    except OSError as e:
        raise IoError(f"cannot write container {path}: {e}") from e


def load_tensors(path: str | os.PathLike, expect_kind: str | None = None) -> tuple[str, dict[str, np.ndarray]]:
    """Read a container file; returns (network_kind, ordered name->tensor map).

    Raises SchemaError on bad magic, malformed manifest, or a
    network_kind mismatch with `expect_kind`; IoError on truncation.
    """
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise IoError(f"cannot read container {path}: {e}") from e

    if len(blob) < len(MAGIC) + 4:
        raise IoError(f"truncated container {path}")
    if blob[: len(MAGIC)] != MAGIC:
        raise SchemaError(f"bad magic in {path}")
    (mlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    mstart = len(MAGIC) + 4
    if len(blob) < mstart + mlen:
        raise IoError(f"truncated manifest in {path}")
    try:
        manifest = json.loads(blob[mstart : mstart + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SchemaError(f"malformed manifest in {path}: {e}") from e

    if manifest.get("format_version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported format_version in {path}")
    kind = manifest.get("network_kind")
    if expect_kind is not None and kind != expect_kind:
        raise SchemaError(f"expected network_kind {expect_kind!r}, found {kind!r} in {path}")

    payload = blob[mstart + mlen :]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        try:
            name, dtype, shape = entry["name"], entry["dtype"], entry["shape"]
            offset, byte_len = entry["offset"], entry["byte_len"]
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed tensor entry in {path}: {e}") from e
        if dtype not in _DTYPES:
            raise SchemaError(f"unknown dtype {dtype!r} in {path}")
        if offset + byte_len > len(payload):
            raise IoError(f"truncated payload for tensor {name!r} in {path}")
        arr = np.frombuffer(payload, dtype=_DTYPES[dtype], count=byte_len // _DTYPES[dtype].itemsize, offset=offset)
        if arr.size != int(np.prod(shape, dtype=np.int64)):
            raise SchemaError(f"shape/byte_len mismatch for tensor {name!r} in {path}")
        tensors[name] = arr.reshape(shape).copy()
    return kind, tensors
