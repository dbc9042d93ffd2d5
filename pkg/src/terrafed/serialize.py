"""Checkpoint and dataset text formats.

Everything is JSON with Python's shortest round-trip float repr, which is
value-exact for 64-bit floats. Checkpoints carry the model (with per-parameter
group tags), optionally the recovery function and the per-client generators;
generators never enter the upload payload.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .lsr import GeneratorSet
from .rkr import RecoveryFn
from .segnet import SegNet, group_of
from .tensor import Tensor
from .terrain import TerrainSample

CHECKPOINT_VERSION = 1
DATASET_VERSION = 1


def _params_to_dict(params: dict[str, Tensor], with_groups: bool) -> dict:
    out = {}
    for name, p in params.items():
        entry = {"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
        if with_groups:
            entry["group"] = group_of(name).value
        out[name] = entry
    return out


def _params_from_dict(d: dict) -> dict[str, np.ndarray]:
    return {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in d.items()
    }


def model_to_dict(net: SegNet) -> dict:
    return {
        "class_count": net.class_count,
        "params": _params_to_dict(dict(net.param_items()), with_groups=True),
    }


def model_from_dict(d: dict) -> SegNet:
    arrays = _params_from_dict(d["params"])
    net = SegNet({name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()})
    if net.class_count != d["class_count"]:
        raise ConfigError("checkpoint class_count disagrees with head shape")
    return net


def _load_into(params: dict[str, Tensor], arrays: dict[str, np.ndarray]) -> None:
    for name, p in params.items():
        arr = arrays[name]
        if arr.shape != p.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}")
        p.data = arr.copy()


def generators_from_dict(d: dict) -> GeneratorSet:
    gen = GeneratorSet.init_random(np.random.default_rng(0))
    _load_into(gen.params(), _params_from_dict(d))
    return gen


def recovery_from_dict(d: dict) -> RecoveryFn:
    psi = RecoveryFn(np.random.default_rng(0))
    _load_into(psi.params(), _params_from_dict(d))
    return psi


@dataclass
class Checkpoint:
    model: SegNet
    recovery_fn: RecoveryFn | None
    generators: dict[int, GeneratorSet]


def save_checkpoint(
    path,
    net: SegNet,
    psi: RecoveryFn | None = None,
    generators: dict[int, GeneratorSet] | None = None,
) -> None:
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model": model_to_dict(net),
        "recovery_fn": _params_to_dict(psi.params(), False) if psi is not None else None,
        "generators": {
            str(cid): _params_to_dict(gen.params(), False)
            for cid, gen in (generators or {}).items()
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path) -> Checkpoint:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {doc.get('format_version')}")
    psi = recovery_from_dict(doc["recovery_fn"]) if doc.get("recovery_fn") else None
    gens = {
        int(cid): generators_from_dict(entry)
        for cid, entry in (doc.get("generators") or {}).items()
    }
    return Checkpoint(model_from_dict(doc["model"]), psi, gens)


def upload_payload(net: SegNet) -> bytes:
    """Canonical bytes of what a client uploads: model parameters only."""
    return json.dumps(model_to_dict(net), sort_keys=True, separators=(",", ":")).encode()


def payload_checksum(net: SegNet) -> str:
    return hashlib.sha256(upload_payload(net)).hexdigest()


def dump_dataset(path, samples: list[TerrainSample]) -> None:
    doc = {
        "format_version": DATASET_VERSION,
        "samples": [
            {
                "image_shape": list(s.image.shape),
                "image": s.image.reshape(-1).tolist(),
                "labels": s.labels.tolist(),
            }
            for s in samples
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_dataset(path) -> list[TerrainSample]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format_version") != DATASET_VERSION:
        raise ConfigError(f"unsupported dataset version {doc.get('format_version')}")
    out = []
    for entry in doc["samples"]:
        image = np.array(entry["image"], dtype=np.float64).reshape(entry["image_shape"])
        labels = np.array(entry["labels"], dtype=np.int64)
        out.append(TerrainSample(image, labels))
    return out
