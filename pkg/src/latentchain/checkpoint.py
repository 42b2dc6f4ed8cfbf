"""Single-file binary checkpoints.

Layout: magic, a length-prefixed JSON header (format version, phase,
model kind + config, seed, step, parameter manifest) followed by raw
little-endian float32 tensor data in manifest order. The manifest is
sorted by name, so identical parameters always serialize to identical
bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"LCCKPT01"
FORMAT_VERSION = 1

PHASES = ("pretrain", "sst", "talker", "baseline")


@dataclass
class Checkpoint:
    phase: str
    kind: str                 # reasoner | mono_talker | dual_talker | baseline
    config: dict
    params: dict              # name -> float32 ndarray
    seed: int
    step: int


def save_checkpoint(path, model, config, kind: str, phase: str,
                    seed: int, step: int):
    if phase not in PHASES:
        raise CheckpointError(f"unknown phase {phase!r}")
    params = {p.name: p.data for p in model.all_params()}
    names = sorted(params)
    manifest = [{"name": n, "shape": list(params[n].shape)} for n in names]
    header = {
        "format_version": FORMAT_VERSION,
        "phase": phase,
        "kind": kind,
        "config": asdict(config) if not isinstance(config, dict) else config,
        "seed": int(seed),
        "step": int(step),
        "manifest": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(blob_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt header ({exc})") from None
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}"
            )
        params = {}
        for entry in header["manifest"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    return Checkpoint(phase=header["phase"], kind=header["kind"],
                      config=header["config"], params=params,
                      seed=header["seed"], step=header["step"])


def restore_into(model, checkpoint: Checkpoint):
    """Copy checkpoint tensors into the model, verifying the manifest."""
    for p in model.all_params():
        if p.name not in checkpoint.params:
            raise CheckpointError(f"checkpoint missing tensor {p.name}")
        value = checkpoint.params[p.name]
        if tuple(value.shape) != tuple(p.data.shape):
            raise CheckpointError(
                f"shape mismatch for {p.name}: checkpoint {value.shape} vs "
                f"model {p.data.shape}"
            )
        p.data[...] = value


def require_phase(checkpoint: Checkpoint, expected: str):
    from .errors import PhaseError

    if checkpoint.phase != expected:
        raise PhaseError(
            f"expected a {expected!r}-phase checkpoint, got {checkpoint.phase!r}"
        )
