"""Checkpoint files: a JSON manifest followed by one little-endian float64 blob.

Layout::

    b"SDMPCKPT"            8 bytes magic
    version                uint32 LE
    manifest length        uint64 LE
    manifest               UTF-8 JSON, sorted keys
    blob                   concatenated float64 LE tensors

The manifest records the config hash, step, epoch, generator state and a
table of (name, shape, dtype, offset, count) entries; offsets and counts are
in float64 elements. The blob's byte length and sha256 are stored in the
manifest and checked on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
from pathlib import Path

import numpy as np

from .config import RunConfig, config_from_dict
from .models import EncoderParams, ForwardCounter, TeacherState
from .tensor import Tensor

MAGIC = b"SDMPCKPT"
VERSION = 1
_HEADER = struct.Struct("<IQ")
_BLOB_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Raised for malformed, truncated or mismatched checkpoint files."""


def checkpoint_path(out_dir, epoch: int) -> Path:
    return Path(out_dir) / f"ep{epoch}.ckpt"


def latest_checkpoint(out_dir) -> Path | None:
    best, best_epoch = None, -1
    for p in Path(out_dir).glob("ep*.ckpt"):
        m = re.fullmatch(r"ep(\d+)\.ckpt", p.name)
        if m and int(m.group(1)) > best_epoch:
            best, best_epoch = p, int(m.group(1))
    return best


def _state_tensors(state) -> list[tuple[str, np.ndarray]]:
    items = [(f"student/{k}", t.data) for k, t in state.student]
    items += [(f"teacher/{k}", t.data) for k, t in state.teacher.params]
    items += [(f"adam_m/{k}", v) for k, v in state.adam_m.items()]
    items += [(f"adam_v/{k}", v) for k, v in state.adam_v.items()]
    if state.teacher.center is not None:
        items.append(("teacher_center", state.teacher.center))
    items.append(("loss_history", np.asarray(state.loss_history, dtype=np.float64)))
    return items


def encode(state, cfg: RunConfig) -> bytes:
    table, chunks, offset = [], [], 0
    for name, arr in _state_tensors(state):
        arr = np.asarray(arr)
        flat = arr.astype(_BLOB_DTYPE).ravel()
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.name,
                      "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    blob = b"".join(chunks)
    manifest = {
        "format_version": VERSION,
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "rng_state": state.rng.bit_generator.state,
        "tensors": table,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _HEADER.pack(VERSION, len(text)) + text + blob


def save_checkpoint(path, state, cfg: RunConfig) -> Path:
    """Write atomically (temp file + rename) so readers only see complete files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(state, cfg))
    os.replace(tmp, path)
    return path


def read_manifest(raw: bytes, source: str = "<bytes>") -> tuple[dict, bytes]:
    head = len(MAGIC) + _HEADER.size
    if len(raw) < head or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint file (bad magic)")
    version, mlen = _HEADER.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    if len(raw) < head + mlen:
        raise CheckpointError(f"{source}: truncated manifest ({len(raw) - head} of {mlen} bytes)")
    try:
        manifest = json.loads(raw[head : head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt manifest: {e}") from None
    blob = raw[head + mlen :]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(
            f"{source}: corrupt blob: manifest declares {manifest['blob_bytes']} bytes, found {len(blob)}"
        )
    if hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"{source}: corrupt blob: sha256 mismatch")
    return manifest, blob


def decode(raw: bytes, source: str = "<bytes>", expect_config: RunConfig | None = None):
    from .trainer import TrainState

    manifest, blob = read_manifest(raw, source)
    cfg = config_from_dict(manifest["config"])
    if cfg.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{source}: config hash mismatch: manifest {manifest['config_hash']}, "
                              f"stored config hashes to {cfg.config_hash()}")
    if expect_config is not None and expect_config.config_hash() != manifest["config_hash"]:
        raise CheckpointError(f"{source}: checkpoint config hash {manifest['config_hash']} does not match "
                              f"run config hash {expect_config.config_hash()}")
    values = np.frombuffer(blob, dtype=_BLOB_DTYPE)
    groups: dict[str, dict] = {"student": {}, "teacher": {}, "adam_m": {}, "adam_v": {}}
    extra = {}
    for e in manifest["tensors"]:
        if e["offset"] + e["count"] > values.size:
            raise CheckpointError(f"{source}: tensor {e['name']} extends past the blob")
        arr = values[e["offset"] : e["offset"] + e["count"]].astype(e["dtype"]).reshape(e["shape"])
        prefix, _, key = e["name"].partition("/")
        if key:
            groups[prefix][key] = arr
        else:
            extra[prefix] = arr
    topo = cfg.topology()
    student = EncoderParams(topo, {k: Tensor(v, requires_grad=True) for k, v in groups["student"].items()})
    teacher = EncoderParams(topo, {k: Tensor(v, requires_grad=False) for k, v in groups["teacher"].items()})
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = manifest["rng_state"]
    state = TrainState(
        student=student,
        teacher=TeacherState(teacher, cfg.momentum, extra.get("teacher_center")),
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        rng=rng,
        step=int(manifest["step"]),
        epoch=int(manifest["epoch"]),
        loss_history=[float(x) for x in extra.get("loss_history", [])],
        forward_counter=ForwardCounter(),
    )
    return state, cfg


def load_checkpoint(path, expect_config: RunConfig | None = None):
    """Return ``(TrainState, RunConfig)``; raises :class:`CheckpointError` on any inconsistency."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes(), str(path), expect_config)


def load_manifest(path) -> dict:
    return read_manifest(Path(path).read_bytes(), str(path))[0]
