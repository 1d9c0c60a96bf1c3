"""LFOM model checkpoints: magic, u32 version, u32 header length, JSON header, f32 payload."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import diffnet as dn
from .errors import CorruptionError, FormatError, KindError, VersionError
from .localizer import BaselineModel, MetaModel, Normalization
from .reward import RewardModel
from .rl import PolicyModel

MAGIC = b"LFOM"
VERSION = 1
KINDS = ("localizer", "reward", "policy")
_PREFIX = struct.Struct("<4sII")


def _encode(model):
    """``(header, [payload arrays])`` for a supported model."""
    if isinstance(model, MetaModel):
        header = {
            "kind": "localizer", "mode": model.trained_with, "spec": model.spec.to_dict(),
            "normalization": model.normalization.to_dict(), "inner_alpha": model.inner_alpha,
            "snippet": model.snippet, "finetune_steps": model.finetune_steps,
            "seed": model.seed, "iterations": model.iterations,
        }
        return header, [model.theta]
    if isinstance(model, BaselineModel):
        header = {
            "kind": "localizer", "mode": "baseline", "spec": model.spec.to_dict(),
            "normalization": model.normalization.to_dict(), "snippet": model.snippet,
            "color_classes": list(model.color_classes), "feature_layer": model.feature_layer,
        }
        return header, [model.params]
    if isinstance(model, RewardModel):
        header = {
            "kind": "reward", "embed_spec": model.embed_spec.to_dict(),
            "pred_spec": model.pred_spec.to_dict(), "normalization": model.normalization.to_dict(),
            "subtask_id": model.subtask_id, "final_loss": model.final_loss,
        }
        return header, [model.embed_params, model.pred_params]
    if isinstance(model, PolicyModel):
        header = {
            "kind": "policy", "mean_spec": model.mean_spec.to_dict(),
            "value_spec": model.value_spec.to_dict(), "log_std": [float(v) for v in model.log_std],
            "slot": model.slot,
        }
        return header, [model.mean_params, model.value_params]
    raise TypeError(f"cannot checkpoint {type(model).__name__}")


def save_model(path, model):
    header, arrays = _encode(model)
    header["version"] = VERSION
    header["sizes"] = [int(a.size) for a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def load_model(path, kind=None):
    """Read a checkpoint; ``kind`` (if given) must match the header."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptionError("file shorter than the fixed header", offset=len(data))
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unsupported LFOM version {version}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CorruptionError("truncated header", offset=len(data))
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    if header.get("kind") not in KINDS:
        raise FormatError(f"unknown model kind {header.get('kind')!r}")
    if kind is not None and header["kind"] != kind:
        raise KindError(f"expected a {kind} checkpoint, file holds {header['kind']}")
    offset = start + hlen
    arrays = []
    for size in header["sizes"]:
        nbytes = 4 * size
        if offset + nbytes > len(data):
            raise CorruptionError(
                f"payload truncated: need {nbytes} bytes at offset {offset}, file has {len(data)}",
                offset=offset,
            )
        arrays.append(np.frombuffer(data, dtype="<f4", count=size, offset=offset).astype(np.float32))
        offset += nbytes
    if offset != len(data):
        raise CorruptionError(f"{len(data) - offset} unexpected trailing bytes", offset=offset)
    return _decode(header, arrays)


def _decode(h, arrays):
    if h["kind"] == "localizer":
        spec = dn.NetSpec.from_dict(h["spec"])
        norm = Normalization.from_dict(h["normalization"])
        if h["mode"] == "baseline":
            return BaselineModel(spec, arrays[0], tuple(h["color_classes"]), norm, h["snippet"],
                                 h["feature_layer"])
        return MetaModel(spec, arrays[0], h["inner_alpha"], h["mode"], norm, h["snippet"],
                         h["finetune_steps"], h["seed"], h["iterations"])
    if h["kind"] == "reward":
        return RewardModel(dn.NetSpec.from_dict(h["embed_spec"]), arrays[0],
                           dn.NetSpec.from_dict(h["pred_spec"]), arrays[1],
                           Normalization.from_dict(h["normalization"]), h["subtask_id"], h["final_loss"])
    return PolicyModel(dn.NetSpec.from_dict(h["mean_spec"]), arrays[0], np.array(h["log_std"]),
                       dn.NetSpec.from_dict(h["value_spec"]), arrays[1], h["slot"])


def checkpoint_io(path, model=None, kind=None):
    """Save ``model`` to ``path`` if given, else load (optionally checking ``kind``)."""
    if model is not None:
        return save_model(path, model)
    return load_model(path, kind)
