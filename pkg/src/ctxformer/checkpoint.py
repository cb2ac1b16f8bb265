"""Checkpoint persistence: a manifest plus one flat little-endian f64 blob.

A checkpoint is a directory holding

* ``manifest.json`` -- ``{"format_version": 1, "config": {...},
  "tensors": [{"name", "shape", "dtype": "f64", "offset", "len"}]}``
  with byte offsets/lengths into the weight blob, and
* ``weights.bin`` -- every tensor's row-major float64 bytes, concatenated
  in manifest order.

Writing is deterministic, so save -> load -> save round trips are
byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, ModelParams, init_params

FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, t in params.named().items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(t.shape),
                "dtype": "f64",
                "offset": offset,
                "len": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_json(),
        "tensors": entries,
    }
    with open(out / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "weights.bin", "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    root = Path(path)
    try:
        with open(root / "manifest.json", "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise CheckpointError(f"no manifest.json under {root}") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt manifest.json under {root}: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"format_version {version!r} unsupported (expected {FORMAT_VERSION})"
        )
    cfg = ModelConfig.from_json(manifest["config"])
    params = init_params(cfg)
    named = params.named()
    entries = manifest["tensors"]
    manifest_names = [e["name"] for e in entries]
    if set(manifest_names) != set(named) or len(manifest_names) != len(named):
        missing = sorted(set(named) - set(manifest_names))
        extra = sorted(set(manifest_names) - set(named))
        raise CheckpointError(
            f"tensor set mismatch: missing {missing or 'none'}, unexpected {extra or 'none'}"
        )
    blob = (root / "weights.bin").read_bytes()
    expected_bytes = sum(e["len"] for e in entries)
    if len(blob) != expected_bytes:
        raise CheckpointError(
            f"weights.bin holds {len(blob)} bytes, manifest expects {expected_bytes}"
        )
    for e in entries:
        t = named[e["name"]]
        shape = tuple(e["shape"])
        if e["dtype"] != "f64":
            raise CheckpointError(f"tensor {e['name']}: unsupported dtype {e['dtype']}")
        if shape != t.shape:
            raise CheckpointError(
                f"tensor {e['name']}: manifest shape {shape} vs model shape {t.shape}"
            )
        n_elems = int(np.prod(shape)) if shape else 1
        if e["len"] != n_elems * 8:
            raise CheckpointError(
                f"tensor {e['name']}: byte length {e['len']} does not match shape {shape}"
            )
        flat = np.frombuffer(blob, dtype="<f8", count=n_elems, offset=e["offset"])
        t.data = np.ascontiguousarray(flat.reshape(shape), dtype=np.float64)
    return params, cfg
