"""Binary model checkpoints.

Layout, all little-endian:

    b"BDIF" | u32 version | u32 meta_len | meta JSON | u32 tensor_count
    | tensor records ... | 16-byte blake2b digest of everything above

Tensor record: u16 name length, name utf-8, u8 dtype code (0 = f32, 1 = f64),
u8 rank, u32 dims, raw payload. Parameter values plus Adam moments
(name#m / name#v) are stored, so resumed training continues from the same
optimizer state; per-parameter step counters and freeze flags ride in the
metadata. Writes go to a temp file and os.replace so a crash cannot leave a
half-written checkpoint behind.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .diffusion import DdpmSchedule, DiffusionProcess, VpSde
from .errors import CheckpointError, DataError
from .hierarchy import BranchHierarchy
from .models import LabelGuidedDenoiser, MultiTaskDenoiser, TimeEmbedding

MAGIC = b"BDIF"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Checkpoint:
    model: object
    process: DiffusionProcess
    hierarchy: BranchHierarchy | None
    seed: int
    meta: dict


def _process_doc(process: DiffusionProcess) -> dict:
    if isinstance(process, VpSde):
        return {"kind": "sde", "beta_min": process.beta_min,
                "beta_slope": process.beta_slope, "horizon": process.horizon}
    if isinstance(process, DdpmSchedule):
        return {"kind": "ddpm", "beta_base": process.beta_base,
                "beta_step": process.beta_step, "steps": process.steps}
    raise CheckpointError(f"cannot serialize process {type(process).__name__}")


def _process_from_doc(doc: dict) -> DiffusionProcess:
    kind = doc.get("kind")
    if kind == "sde":
        return VpSde(doc["beta_min"], doc["beta_slope"], doc["horizon"])
    if kind == "ddpm":
        return DdpmSchedule(doc["beta_base"], doc["beta_step"], doc["steps"])
    raise CheckpointError(f"unknown process kind {kind!r}")


def _model_meta(model) -> dict:
    meta = {"kind": model.kind, "dim": model.dim, "width": model.width,
            "horizon": model.horizon}
    if model.kind == "branched":
        meta["task_count"] = model.task_count
    elif model.kind == "label-guided":
        meta["classes"] = list(model.classes)
    else:
        raise CheckpointError(f"cannot serialize model kind {model.kind!r}")
    return meta


def _rebuild_model(meta: dict):
    # parameter values get overwritten below, so the init rng is irrelevant
    rng = np.random.default_rng(0)
    kind = meta.get("kind")
    if kind == "branched":
        return MultiTaskDenoiser(meta["dim"], meta["task_count"], meta["horizon"],
                                 rng, width=meta["width"])
    if kind == "label-guided":
        return LabelGuidedDenoiser(meta["dim"], meta["classes"], meta["horizon"],
                                   rng, width=meta["width"])
    raise CheckpointError(f"unknown model kind {kind!r}")


def _tensor_blobs(model) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    for name, p in model.store.items():
        blobs[name] = p.value
        blobs[name + "#m"] = p.m
        blobs[name + "#v"] = p.v
    return blobs


def save_checkpoint(path, model, process: DiffusionProcess,
                    hierarchy: BranchHierarchy | None = None, seed: int = 0) -> None:
    meta = {
        "model": _model_meta(model),
        "process": _process_doc(process),
        "hierarchy": None if hierarchy is None else hierarchy.to_json_dict(),
        "seed": int(seed),
        "frozen": sorted(n for n, p in model.store.items() if p.frozen),
        "steps": {n: p.step for n, p in model.store.items() if p.step},
    }
    meta_raw = json.dumps(meta, sort_keys=True).encode()

    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_raw)), meta_raw]
    blobs = _tensor_blobs(model)
    parts.append(struct.pack("<I", len(blobs)))
    for name in sorted(blobs):
        arr = np.ascontiguousarray(blobs[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw_name = name.encode()
        parts.append(struct.pack("<HBB", len(raw_name), code, arr.ndim))
        parts.append(raw_name)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())
    body = b"".join(parts)
    digest = hashlib.blake2b(body, digest_size=16).digest()

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
            fh.write(digest)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.at = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.at + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.at:self.at + n]
        self.at += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    if len(raw) < len(MAGIC) + 16 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = raw[:-16], raw[-16:]
    if hashlib.blake2b(body, digest_size=16).digest() != digest:
        raise CheckpointError("checkpoint is corrupted (checksum mismatch)")

    r = _Reader(body)
    r.take(4)  # magic, already checked
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc

    tensors: dict[str, np.ndarray] = {}
    (count,) = r.unpack("<I")
    for _ in range(count):
        name_len, code, rank = r.unpack("<HBB")
        try:
            name = r.take(name_len).decode()
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"bad tensor name: {exc}") from exc
        dims = r.unpack(f"<{rank}I")
        dtype = _DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"tensor {name!r}: unknown dtype code {code}")
        n_items = 1
        for d in dims:
            n_items *= d
        payload = r.take(n_items * dtype.itemsize)
        tensors[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if r.at != len(body):
        raise CheckpointError("trailing bytes after tensor records")

    try:
        model = _rebuild_model(meta["model"])
        process = _process_from_doc(meta["process"])
        tree_doc = meta.get("hierarchy")
        hierarchy = None if tree_doc is None else BranchHierarchy.from_json_dict(tree_doc)
        seed = int(meta.get("seed", 0))
        frozen = set(meta.get("frozen", ()))
        steps = meta.get("steps", {})
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, DataError) as exc:
        raise CheckpointError(f"bad checkpoint metadata: {exc}") from exc

    expected = set(_tensor_blobs(model))
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))[:3]
        extra = sorted(set(tensors) - expected)[:3]
        raise CheckpointError(f"parameter set mismatch (missing {missing}, extra {extra})")
    for name, p in model.store.items():
        value = tensors[name]
        if value.shape != p.value.shape:
            raise CheckpointError(f"tensor {name!r}: shape {value.shape} "
                                  f"does not match {p.value.shape}")
        p.value[...] = value
        for attr, key in (("m", name + "#m"), ("v", name + "#v")):
            arr = tensors[key]
            if arr.shape != p.value.shape:
                raise CheckpointError(f"tensor {key!r}: shape mismatch")
            setattr(p, attr, arr)
        p.frozen = name in frozen
        p.step = int(steps.get(name, 0))
    # the embedding keeps its own copy of time.z, refresh it from the store
    model.time_embedding = TimeEmbedding(model.store["time.z"].value, meta["model"]["horizon"])
    return Checkpoint(model, process, hierarchy, seed, meta)
