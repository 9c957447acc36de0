"""Flat named-tensor binary checkpoints with a JSON manifest.

Layout: all arrays concatenated as little-endian raw bytes in one .bin file;
the manifest lists name, dtype, shape, and byte offset per tensor, plus any
extra metadata (model config, step counters).
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def manifest_path(bin_path: str | Path) -> Path:
    return Path(str(bin_path) + ".manifest.json")


def save_tensors(bin_path: str | Path, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    bin_path = Path(bin_path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(bin_path, "wb") as fh:
        for name in sorted(tensors):
            arr = np.asarray(tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()  # C order regardless of input layout
            entries.append(
                {
                    "name": name,
                    "dtype": arr.dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(raw),
                }
            )
            fh.write(raw)
            offset += len(raw)
    manifest = {"tensors": entries, "extra": extra or {}}
    with open(manifest_path(bin_path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_tensors(bin_path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    bin_path = Path(bin_path)
    with open(manifest_path(bin_path), encoding="utf-8") as fh:
        manifest = json.load(fh)
    raw = bin_path.read_bytes()
    tensors = {}
    for entry in manifest["tensors"]:
        start = entry["offset"]
        buf = raw[start : start + entry["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return tensors, manifest.get("extra", {})
