"""Model files: a JSON manifest next to a little-endian float64 weight blob.

``save_model(path, net)`` writes ``path`` (manifest) and ``path`` with a
``.bin`` suffix (weights).  The manifest lists every array by name, shape
and element offset into the blob.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..features import FeatureNorm
from .bayes import BayesNet
from .core import DenseNet

FORMAT = "hkest-model"
VERSION = 1


def _blob_path(path: Path) -> Path:
    return path.with_suffix(".bin")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def save_model(path, model) -> None:
    path = Path(path)
    if isinstance(model, DenseNet):
        kind = "dense"
        arrays = {f"W{i}": w for i, w in enumerate(model.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
        extra = {"dropout": list(model.dropout) if model.dropout else None}
    elif isinstance(model, BayesNet):
        kind = "bayes"
        arrays = {}
        for i in range(len(model.mu) // 2):
            arrays[f"mu_W{i}"], arrays[f"mu_b{i}"] = model.mu[2 * i], model.mu[2 * i + 1]
            arrays[f"rho_W{i}"], arrays[f"rho_b{i}"] = model.rho[2 * i], model.rho[2 * i + 1]
        arrays["log_noise"] = model.log_noise
        extra = {"mc_passes": model.mc_passes, "target_mean": model.target_mean.tolist(),
                 "target_std": model.target_std.tolist()}
    else:
        raise TypeError(f"cannot save {type(model).__name__}")

    index, offset = [], 0
    for name, arr in arrays.items():
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    blob = np.concatenate([a.ravel() for a in arrays.values()]).astype("<f8")
    manifest = {
        "format": FORMAT, "version": VERSION, "kind": kind,
        "dims": model.dims, "acts": list(model.acts),
        "norm": model.norm.to_dict() if model.norm is not None else None,
        "blob": _blob_path(path).name, "dtype": "<f8", "count": int(blob.size),
        "arrays": index, "meta": _jsonable(model.meta), **extra,
    }
    blob.tofile(_blob_path(path))
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_model(path):
    path = Path(path)
    man = json.loads(path.read_text())
    if man.get("format") != FORMAT:
        raise ValueError(f"{path}: not a model manifest")
    if man.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported model version {man.get('version')}")
    blob = np.fromfile(path.parent / man["blob"], dtype="<f8")
    if blob.size != man["count"]:
        raise ValueError(f"{path}: weight blob has {blob.size} values, expected {man['count']}")
    arr = {}
    for e in man["arrays"]:
        size = int(np.prod(e["shape"])) if e["shape"] else 1
        arr[e["name"]] = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).copy()
    norm = FeatureNorm.from_dict(man["norm"]) if man["norm"] else None
    nl = len(man["acts"])
    if man["kind"] == "dense":
        return DenseNet([arr[f"W{i}"] for i in range(nl)], [arr[f"b{i}"] for i in range(nl)],
                        man["acts"], tuple(man["dropout"]) if man["dropout"] else None,
                        norm, man["meta"])
    mu, rho = [], []
    for i in range(nl):
        mu += [arr[f"mu_W{i}"], arr[f"mu_b{i}"]]
        rho += [arr[f"rho_W{i}"], arr[f"rho_b{i}"]]
    return BayesNet(mu, rho, man["acts"], norm, np.array(man["target_mean"]),
                    np.array(man["target_std"]), arr["log_noise"], man["mc_passes"], man["meta"])
