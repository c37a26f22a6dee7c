"""Checkpoint persistence: a JSON manifest plus one little-endian float64
blob, checksummed whole-file.

The manifest records format version, a tensor name -> (shape, byte
offset, byte length) index, arbitrary metadata, and the blob's SHA-256.
Tensors must tile the blob exactly (no gaps, no overlaps); loads verify
everything before constructing a single array, so a truncated or edited
blob never yields a partial result. Sample banks are directories of
numbered checkpoints plus a small meta file.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint."""


class ChecksumError(CheckpointError):
    """Blob bytes do not match the manifest."""


def save_checkpoint(prefix, tensors: dict, meta: dict) -> None:
    """Write prefix.json (manifest) and prefix.bin (blob)."""
    prefix = Path(prefix)
    index = {}
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(data)}
        chunks.append(data)
        offset += len(data)
    blob = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "tensors": index,
        "meta": meta,
    }
    with open(prefix.with_suffix(".bin"), "wb") as fh:
        fh.write(blob)
    with open(prefix.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_checkpoint(prefix):
    """Read and verify a checkpoint; returns (tensors dict, meta dict)."""
    prefix = Path(prefix)
    try:
        with open(prefix.with_suffix(".json"), "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest {prefix}.json: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {manifest.get('format_version')} != {FORMAT_VERSION}"
        )
    index = manifest["tensors"]
    regions = sorted((spec["offset"], spec["nbytes"], name) for name, spec in index.items())
    cursor = 0
    for off, nbytes, name in regions:
        if off != cursor:
            raise CheckpointError(f"tensor {name!r} offset {off} overlaps or leaves a gap at {cursor}")
        if nbytes < 0 or nbytes % 8 != 0:
            raise CheckpointError(f"tensor {name!r} has invalid byte length {nbytes}")
        cursor = off + nbytes
    if cursor != manifest["blob_bytes"]:
        raise CheckpointError("tensor index does not cover the blob exactly")
    try:
        with open(prefix.with_suffix(".bin"), "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read blob {prefix}.bin: {exc}") from exc
    if len(blob) != manifest["blob_bytes"]:
        raise ChecksumError(f"blob is {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise ChecksumError("blob checksum mismatch")
    tensors = {}
    for name, spec in index.items():
        raw = np.frombuffer(blob, dtype="<f8", count=spec["nbytes"] // 8, offset=spec["offset"])
        expected = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if raw.size != expected:
            raise CheckpointError(f"tensor {name!r}: {raw.size} values for shape {spec['shape']}")
        tensors[name] = raw.reshape(spec["shape"]).copy()
    return tensors, manifest["meta"]


class DirectoryBankStore:
    """Sample-bank persistence: one numbered checkpoint per snapshot."""

    def __init__(self, dirpath):
        self.dir = Path(dirpath)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._count = len(sorted(self.dir.glob("sample_*.json")))

    def _prefix(self, idx: int) -> Path:
        return self.dir / f"sample_{idx:05d}"

    def append(self, values: np.ndarray, stamp: float = 0.0) -> int:
        idx = self._count
        save_checkpoint(
            self._prefix(idx),
            {"theta": values},
            {"kind": "bank-sample", "index": idx, "stamp": float(stamp)},
        )
        self._count += 1
        return idx

    def load(self, handle: int) -> np.ndarray:
        tensors, _ = load_checkpoint(self._prefix(handle))
        return tensors["theta"]

    def stamps(self) -> list:
        out = []
        for idx in range(self._count):
            _, meta = load_checkpoint(self._prefix(idx))
            out.append(float(meta.get("stamp", idx + 1)))
        return out

    def __len__(self) -> int:
        return self._count
