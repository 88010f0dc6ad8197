"""Checkpoint container: magic "ARLC", u32 version, u64 header length, a
UTF-8 JSON header describing each tensor (dtype, shape, byte offset) plus a
model_kind field and free-form metadata, then contiguous little-endian
float32 blobs. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, EncoderState
from .tensor import Tensor

MAGIC = b"ARLC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupted, or incompatible checkpoint file."""


def save_checkpoint(tensors: dict, path, model_kind: str, meta: dict | None = None):
    """Write name -> array (cast to float32) with a model-kind tag."""
    entries = {}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
        entries[name] = {
            "dtype": "float32",
            "shape": list(arr.shape),
            "offset": offset,
        }
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "model_kind": model_kind,
        "tensors": entries,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint; returns (model_kind, {name: float32 array}, meta)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated file ({len(raw)} bytes)")
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}, expected {VERSION}")
    (header_len,) = struct.unpack_from("<Q", raw, 8)
    if 16 + header_len > len(raw):
        raise CheckpointError(f"{path}: truncated header (wants {header_len} bytes)")
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header: {exc}") from exc
    if not isinstance(header, dict) or "tensors" not in header or \
            "model_kind" not in header:
        raise CheckpointError(f"{path}: header missing tensors/model_kind fields")
    data = raw[16 + header_len :]
    tensors = {}
    expected_end = 0
    for name, entry in header["tensors"].items():
        if entry.get("dtype") != "float32":
            raise CheckpointError(f"{path}: tensor {name!r} has unsupported dtype "
                                  f"{entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = int(entry["offset"])
        end = offset + count * 4
        if offset < 0 or end > len(data):
            raise CheckpointError(
                f"{path}: tensor {name!r} (shape {shape}) extends past the data "
                f"section ({end} > {len(data)} bytes): shape table inconsistent"
            )
        expected_end = max(expected_end, end)
        tensors[name] = np.frombuffer(
            data, dtype="<f4", count=count, offset=offset
        ).reshape(shape).copy()
    if expected_end != len(data):
        raise CheckpointError(
            f"{path}: data section has {len(data)} bytes but tensors account for "
            f"{expected_end}: shape table inconsistent"
        )
    return header["model_kind"], tensors, header.get("meta", {})


def save_encoder_state(state: EncoderState, path, extra_meta: dict | None = None):
    """Persist the online network; the EMA target is discarded at save time."""
    tensors = {f"param.{k}": v.data for k, v in state.params.items()}
    tensors.update({f"buffer.{k}": v for k, v in state.buffers.items()})
    if state.channel_mean is not None:
        tensors["stats.mean"] = state.channel_mean
        tensors["stats.std"] = state.channel_std
    meta = {"config": state.config.to_dict(), "step": state.step}
    meta.update(state.meta)
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(tensors, path, model_kind="encoder", meta=meta)


def load_encoder_state(path, expected_in_channels: int | None = None) -> EncoderState:
    kind, tensors, meta = load_checkpoint(path)
    if kind != "encoder":
        raise CheckpointError(f"{path}: model_kind {kind!r}, expected 'encoder'")
    try:
        config = EncoderConfig.from_dict(meta["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid encoder config in header: {exc}") from exc
    if expected_in_channels is not None and config.in_channels != expected_in_channels:
        raise CheckpointError(
            f"{path}: checkpoint in_channels={config.in_channels} does not match "
            f"the task's in_channels={expected_in_channels}"
        )
    params, buffers = {}, {}
    for name, arr in tensors.items():
        if name.startswith("param."):
            key = name[len("param."):]
            tag = None
            if key.endswith(".b"):
                tag = "bias"
            elif key.endswith((".gamma", ".beta")):
                tag = "norm"
            params[key] = Tensor(arr, requires_grad=True, tag=tag)
        elif name.startswith("buffer."):
            buffers[name[len("buffer."):]] = arr
    state = EncoderState(config=config, params=params, buffers=buffers,
                         step=int(meta.get("step", 0)),
                         meta={k: v for k, v in meta.items()
                               if k not in ("config", "step")})
    if "stats.mean" in tensors:
        state.channel_mean = tensors["stats.mean"]
        state.channel_std = tensors["stats.std"]
    return state
