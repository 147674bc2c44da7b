"""Bit-exact JSON checkpoints: architecture descriptor + flat parameter arrays.

Values are written as Python floats, whose repr-based JSON encoding
round-trips float64 exactly, so save followed by load reproduces every
parameter bit for bit.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .networks import (Classifier, ClassifierSpec, Discriminator, DiscriminatorSpec,
                       Generator, GeneratorSpec, ModelBundle)

FORMAT_NAME = "subadapt-checkpoint"
FORMAT_VERSION = 1

_SPEC_FIELDS = {
    "generator": ("input_dim", "blocks", "filters", "noise_dim", "seed"),
    "discriminator": ("input_dim", "base_filters", "seed"),
    "classifier": ("input_dim", "num_classes", "base_filters", "seed"),
}
_BUILDERS = {
    "generator": (GeneratorSpec, Generator),
    "discriminator": (DiscriminatorSpec, Discriminator),
    "classifier": (ClassifierSpec, Classifier),
}


def _kind_of(net) -> str:
    if isinstance(net, Generator):
        return "generator"
    if isinstance(net, Discriminator):
        return "discriminator"
    if isinstance(net, Classifier):
        return "classifier"
    raise TypeError(f"not a checkpointable network: {type(net).__name__}")


def save_checkpoint(models: dict, path, seed: int = 0, step_count: int = 0) -> None:
    payload = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "seed": int(seed),
        "step_count": int(step_count),
        "models": {},
    }
    for name, net in models.items():
        kind = _kind_of(net)
        spec = {f: getattr(net.spec, f) for f in _SPEC_FIELDS[kind]}
        params = {pname: {"shape": list(p.data.shape), "values": p.data.ravel().tolist()}
                  for pname, p in net.parameters().items()}
        payload["models"][name] = {"kind": kind, "spec": spec, "parameters": params}
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns ({name: rebuilt network}, {"seed": ..., "step_count": ...})."""
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a {FORMAT_NAME} file")
    if payload.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    models = {}
    for name, entry in payload["models"].items():
        spec_cls, net_cls = _BUILDERS[entry["kind"]]
        net = net_cls(spec_cls(**entry["spec"]))
        params = net.parameters()
        stored = entry["parameters"]
        if set(stored) != set(params):
            raise ValueError(f"{path}: parameter names do not match architecture for {name!r}")
        for pname, p in params.items():
            rec = stored[pname]
            arr = np.asarray(rec["values"], dtype=np.float64).reshape(rec["shape"])
            if arr.shape != p.data.shape:
                raise ValueError(f"{path}: parameter {pname!r} shape {arr.shape} does not "
                                 f"match architecture shape {p.data.shape}")
            p.data = arr
        models[name] = net
    return models, {"seed": payload["seed"], "step_count": payload["step_count"]}


def save_bundle(bundle: ModelBundle, path, seed: int = 0, step_count: int = 0) -> None:
    save_checkpoint({"generator": bundle.generator,
                     "discriminator": bundle.discriminator,
                     "classifier": bundle.classifier}, path, seed, step_count)


def load_bundle(path) -> tuple[ModelBundle, dict]:
    models, meta = load_checkpoint(path)
    missing = {"generator", "discriminator", "classifier"} - set(models)
    if missing:
        raise ValueError(f"{path}: bundle checkpoint is missing {sorted(missing)}")
    return ModelBundle(models["generator"], models["discriminator"], models["classifier"]), meta
