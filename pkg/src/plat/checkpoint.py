"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    b"PLATCKPT"            8 bytes magic
    u32 version
    u64 header length
    header                 UTF-8 JSON (sorted keys): metadata + tensor table
    payload                raw float64 arrays, row-major, in table order
    sha256                 32-byte digest of everything above

The digest is verified before anything is parsed, so a truncated or edited
file never yields a partial load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from plat.backbone import Backbone, BackboneConfig, SpecialTokenTable
from plat.errors import CheckpointError
from plat.model import ModelBundle, PlannerConfig, Projector

MAGIC = b"PLATCKPT"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    phase: str
    backbone_cfg: dict
    planner_cfg: dict
    special: dict
    params: dict[str, np.ndarray]
    partition: dict = field(default_factory=dict)  # {"frozen": [...], "trainable": [...]}
    rng_state: dict | None = None
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def to_bytes(ckpt: Checkpoint) -> bytes:
    table = []
    chunks = []
    offset = 0
    arrays = [("param", k, v) for k, v in ckpt.params.items()]
    arrays += [("optim", k, v) for k, v in ckpt.optimizer.items()]
    for kind, name, arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        raw = a.tobytes()
        table.append({"kind": kind, "name": name, "shape": list(a.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "phase": ckpt.phase, "backbone_cfg": ckpt.backbone_cfg, "planner_cfg": ckpt.planner_cfg,
        "special": ckpt.special, "partition": ckpt.partition, "rng_state": ckpt.rng_state,
        "meta": ckpt.meta, "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = _HEAD.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < _HEAD.size + 32:
        raise CheckpointError("checkpoint truncated")
    body, digest = blob[:-32], blob[-32:]
    magic, version, hlen = _HEAD.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    start = _HEAD.size
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    payload = memoryview(body)[start + hlen:]
    params, optim = {}, {}
    for t in header["tensors"]:
        raw = payload[t["offset"]:t["offset"] + t["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(t["shape"])
        (params if t["kind"] == "param" else optim)[t["name"]] = arr
    return Checkpoint(
        phase=header["phase"], backbone_cfg=header["backbone_cfg"],
        planner_cfg=header["planner_cfg"], special=header["special"], params=params,
        partition=header["partition"], rng_state=header["rng_state"], optimizer=optim,
        meta=header["meta"])


def save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    return from_bytes(path.read_bytes())


# ---------------------------------------------------------------------------
# bundle <-> checkpoint
# ---------------------------------------------------------------------------
def from_bundle(bundle: ModelBundle, phase: str, partition: dict | None = None,
                rng: np.random.Generator | None = None, optimizer: dict | None = None,
                meta: dict | None = None) -> Checkpoint:
    return Checkpoint(
        phase=phase,
        backbone_cfg=bundle.backbone_cfg.to_dict(),
        planner_cfg=bundle.planner_cfg.to_dict(),
        special=dict(vars(bundle.special)),
        params={k: v.data.copy() for k, v in bundle.parameters().items()},
        partition=partition or {},
        rng_state=None if rng is None else rng.bit_generator.state,
        optimizer=dict(optimizer or {}),
        meta=dict(meta or {}),
    )


def to_bundle(ckpt: Checkpoint, planner_cfg: PlannerConfig | None = None) -> ModelBundle:
    """Rebuild a bundle; ``planner_cfg`` may override the stored planner settings."""
    bcfg = BackboneConfig(**ckpt.backbone_cfg)
    pcfg = planner_cfg or PlannerConfig(**ckpt.planner_cfg)
    special = SpecialTokenTable(**ckpt.special)
    split = any(k.startswith("planner_backbone.") for k in ckpt.params)
    bundle = ModelBundle.create(bcfg, pcfg, special, seed=0)
    if split:
        bundle.split_decoder()
    bundle.load_parameters(ckpt.params)
    return bundle


def restore_rng(ckpt: Checkpoint) -> np.random.Generator:
    rng = np.random.default_rng()
    if ckpt.rng_state is not None:
        rng.bit_generator.state = ckpt.rng_state
    return rng


def backbone_from_checkpoint(ckpt: Checkpoint) -> Backbone:
    """The (planner-view) backbone of any checkpoint, e.g. a CoT baseline."""
    bcfg = BackboneConfig(**ckpt.backbone_cfg)
    bb = Backbone(bcfg, seed=0)
    prefix = "planner_backbone." if any(k.startswith("planner_backbone.") for k in ckpt.params) else "backbone."
    for k, p in bb.params.items():
        p.data = np.array(ckpt.params[prefix + k], dtype=np.float64)
    return bb


__all__ = ["Checkpoint", "MAGIC", "VERSION", "Projector", "backbone_from_checkpoint", "from_bundle",
           "from_bytes", "load", "restore_rng", "save", "to_bundle", "to_bytes"]
