"""Bit-exact adapter container files.

Layout (all integers little-endian):

    bytes 0-3   magic "PRLA"
    bytes 4-7   format version, uint32 (currently 1)
    bytes 8-11  header length in bytes, uint32
    header      UTF-8 JSON: config fields, h, o, dtype ("f32"/"f64"),
                merged flag, and the four chunk shapes
    payload     the four trainable chunks in fixed order
                a_unshared, a_shared, b_unshared, b_shared,
                row-major little-endian scalars

Only the stored chunks are written, never expanded factors, so file size
tracks the trainable parameter count exactly: 12 + header + itemsize *
trainable_count. The header is serialized with sorted keys and compact
separators, making save(load(path)) byte-identical. Unknown top-level
header fields are ignored on load but carried on the state and re-written
on save. f64 containers round-trip states bit-exactly; f32 containers
round-trip within one float32 ULP.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import adapter
from .adapter import AdapterConfig, AdapterState

__all__ = [
    "ContainerError",
    "ContainerFormatError",
    "ContainerShapeError",
    "ContainerTruncatedError",
    "ContainerVersionError",
    "MAGIC",
    "VERSION",
    "load",
    "save",
]

MAGIC = b"PRLA"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_CHUNK_ORDER = ("a_unshared", "a_shared", "b_unshared", "b_shared")
_KNOWN_FIELDS = {"config", "h", "o", "dtype", "merged", "shapes"}


class ContainerError(Exception):
    """Base class for container format problems."""


class ContainerFormatError(ContainerError):
    """Bad magic, malformed header, unsupported dtype, or oversized payload."""


class ContainerVersionError(ContainerError):
    """Format version not understood by this reader."""


class ContainerTruncatedError(ContainerError):
    """File ends before the declared header or payload is complete."""


class ContainerShapeError(ContainerError):
    """Header shapes disagree with the shapes the config implies."""


def _header_dict(state: AdapterState, dtype: str) -> dict:
    cfg = state.cfg
    header = dict(state.extra_header)
    header.update(
        {
            "config": {
                "r": cfg.r, "u": cfg.u, "m": cfg.m, "n": cfg.n,
                "stride_a": cfg.stride_a, "stride_b": cfg.stride_b,
                "alpha": cfg.alpha, "dropout_rate": cfg.dropout_rate,
                "share_axis": cfg.share_axis, "rotate_axis": cfg.rotate_axis,
            },
            "h": state.h,
            "o": state.o,
            "dtype": dtype,
            "merged": state.merged,
            "shapes": {name: list(arr.shape) for name, arr in state.chunks().items()},
        }
    )
    return header


def save(state: AdapterState, path: str | Path, dtype: str = "f64") -> int:
    """Write the container; returns the total number of bytes written."""
    if dtype not in _DTYPES:
        raise ContainerFormatError(f"unsupported dtype {dtype!r} (expected 'f32' or 'f64')")
    header_bytes = json.dumps(
        _header_dict(state, dtype), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    np_dtype = np.dtype(_DTYPES[dtype])
    payload = b"".join(
        np.ascontiguousarray(state.chunks()[name], dtype=np_dtype).tobytes()
        for name in _CHUNK_ORDER
    )
    blob = MAGIC + struct.pack("<II", VERSION, len(header_bytes)) + header_bytes + payload
    Path(path).write_bytes(blob)
    return len(blob)


def load(path: str | Path) -> AdapterState:
    """Read and validate a container; returns an unbound AdapterState.

    The header config is re-validated and the declared chunk shapes are
    cross-checked against what the config implies before any payload is
    interpreted. Distinct errors: bad magic / malformed header (format),
    unsupported version, truncated header or payload, shape inconsistency.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise ContainerTruncatedError(f"file is {len(blob)} bytes, shorter than the 12-byte prefix")
    if blob[:4] != MAGIC:
        raise ContainerFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise ContainerVersionError(f"unsupported version {version} (reader supports {VERSION})")
    if 12 + header_len > len(blob):
        raise ContainerTruncatedError(
            f"truncated header: declares {header_len} bytes, file has {len(blob) - 12}"
        )
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerFormatError("header must be a JSON object")

    missing = {"config", "h", "o", "dtype"} - header.keys()
    if missing:
        raise ContainerFormatError(f"header missing fields: {sorted(missing)}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise ContainerFormatError(f"unsupported dtype {dtype!r}")

    cfg = AdapterConfig(**header["config"])
    h, o = int(header["h"]), int(header["o"])
    cfg = adapter.validate(cfg, h, o)
    implied = adapter.chunk_shapes(cfg, h, o)
    declared = header.get("shapes", {})
    for name in _CHUNK_ORDER:
        if name in declared and tuple(declared[name]) != implied[name]:
            raise ContainerShapeError(
                f"shape inconsistency for field {name!r}: header says "
                f"{tuple(declared[name])}, config implies {implied[name]}"
            )

    np_dtype = np.dtype(_DTYPES[dtype])
    expected = sum(r * c for r, c in implied.values()) * np_dtype.itemsize
    actual = len(blob) - 12 - header_len
    if actual < expected:
        raise ContainerTruncatedError(
            f"truncated payload: expected {expected} bytes, found {actual}"
        )
    if actual > expected:
        raise ContainerFormatError(
            f"payload longer than expected: {actual} bytes for {expected} declared"
        )

    chunks = {}
    offset = 12 + header_len
    for name in _CHUNK_ORDER:
        rows, cols = implied[name]
        nbytes = rows * cols * np_dtype.itemsize
        flat = np.frombuffer(blob, dtype=np_dtype, count=rows * cols, offset=offset)
        chunks[name] = flat.astype(np.float64).reshape(rows, cols)
        offset += nbytes
    for name, arr in chunks.items():
        if arr.size and not np.all(np.isfinite(arr)):
            raise ContainerFormatError(f"non-finite values in chunk {name!r}")

    extra = {k: v for k, v in header.items() if k not in _KNOWN_FIELDS}
    return AdapterState(
        cfg=cfg,
        h=h,
        o=o,
        a_unshared=chunks["a_unshared"],
        a_shared=chunks["a_shared"],
        b_unshared=chunks["b_unshared"],
        b_shared=chunks["b_shared"],
        merged=bool(header.get("merged", False)),
        extra_header=extra,
    )
