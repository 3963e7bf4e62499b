"""Versioned checkpoint container shared by the classifier and the agent.

Built on the npz archive format: named parameter blocks keep their shapes
natively, and a JSON metadata block records the kind, format version, and
whatever the writer needs to reconstruct configs (mask density, cached
lambda_max, reward settings, ...).
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, arrays: dict[str, np.ndarray], meta: dict) -> None:
    payload = dict(arrays)
    header = {"kind": kind, "format_version": FORMAT_VERSION, "meta": meta}
    payload["__meta__"] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **payload)


def load_checkpoint(path, expect_kind: str | None = None):
    """Returns (kind, arrays, meta)."""
    with np.load(path) as archive:
        if "__meta__" not in archive:
            raise ValueError(f"{path}: not a checkpoint container (no metadata block)")
        header = json.loads(archive["__meta__"].tobytes().decode("utf-8"))
        arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version "
                         f"{header.get('format_version')}")
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ValueError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
    return kind, arrays, header.get("meta", {})


def content_hash(path) -> str:
    """sha256 of a file's bytes, for run-directory provenance records."""
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
