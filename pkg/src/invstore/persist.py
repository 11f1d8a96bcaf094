"""Versioned JSON model files for every identified model kind."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ModelLoadError
from .icnn import IcnnModel
from .storage import SocCostParams, StorageParams
from .train import EqualityModel, GenericModel

FORMAT_VERSION = 1
_STORAGE = {"quadratic": StorageParams, "soc": SocCostParams}


def model_to_dict(model) -> dict:
    if isinstance(model, GenericModel):
        out = {"model": "generic", "storage": _storage_fields(model.storage),
               "storage_model": model.storage.model,
               "network": model.network.to_dict(), "c1": model.c1, "c2": model.c2}
    elif isinstance(model, EqualityModel):
        out = {"model": "equality", "alpha": float(model.alpha),
               "b": np.asarray(model.b).tolist(), "A": np.asarray(model.A).tolist()}
    elif isinstance(model, StorageParams):
        out = {"model": model.model, **_storage_fields(model)}
    else:
        raise TypeError(f"cannot serialise {type(model).__name__}")
    return {"format_version": FORMAT_VERSION, **out}


def model_from_dict(d: dict):
    if not isinstance(d, dict):
        raise ModelLoadError("model file must hold a JSON object")
    if d.get("format_version") != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported model format version {d.get('format_version')!r}")
    kind = d.get("model")
    try:
        if kind in _STORAGE:
            fields = {k: v for k, v in d.items() if k not in ("format_version", "model")}
            return _STORAGE[kind](**fields).validate()
        if kind == "generic":
            storage = _STORAGE[d.get("storage_model", "quadratic")](**d["storage"])
            return GenericModel(network=IcnnModel.from_dict(d["network"]), storage=storage,
                                c1=d.get("c1"), c2=d.get("c2"))
        if kind == "equality":
            A = np.atleast_2d(np.asarray(d["A"], dtype=float))
            b = np.asarray(d["b"], dtype=float).reshape(-1)
            if b.size != A.shape[0] or float(d["alpha"]) <= 0:
                raise ValueError("equality model needs alpha > 0 and one b entry per row of A")
            return EqualityModel(alpha=float(d["alpha"]), b=b, A=A)
    except ModelLoadError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"malformed {kind} model: {exc}") from exc
    raise ModelLoadError(f"unknown model kind {kind!r}")


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model), indent=1) + "\n")
    return path


def load_model(path):
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except OSError as exc:
        raise ModelLoadError(f"cannot read model file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"model file {path} is not valid JSON: {exc}") from exc
    return model_from_dict(d)


def _storage_fields(params: StorageParams) -> dict:
    d = params.to_dict()
    d.pop("model", None)
    return d
