"""Checkpoints: a JSON manifest plus a little-endian binary blob.

The manifest maps each tensor name to ``{"offset": bytes, "shape": [...]}``
inside the blob and stores the model configuration. Exported models use
float32; training-state checkpoints (parameters plus optimizer moments,
used to resume) are written in float64 so a resumed run continues exactly.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError, FormatError
from .model import Model, ModelConfig, check_params

CHECKPOINT_VERSION = 1
_DTYPES = ("<f4", "<f8")


def blob_path(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def write_tensors(manifest_path, tensors: dict[str, np.ndarray], meta: dict, dtype: str = "<f4") -> None:
    if dtype not in _DTYPES:
        raise ValueError(f"dtype must be one of {_DTYPES}")
    manifest_path = Path(manifest_path)
    entries = {}
    offset = 0
    chunks = []
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype=dtype)
        entries[name] = {"offset": offset, "shape": list(data.shape)}
        chunks.append(data.tobytes())
        offset += data.nbytes
    blob = blob_path(manifest_path)
    blob.write_bytes(b"".join(chunks))
    doc = {"version": CHECKPOINT_VERSION, "dtype": dtype, "blob": blob.name, "tensors": entries}
    doc.update(meta)
    manifest_path.write_text(json.dumps(doc, indent=1), encoding="utf-8")


def read_tensors(manifest_path) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path = Path(manifest_path)
    try:
        doc = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    if doc.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{manifest_path}: unsupported checkpoint version {doc.get('version')!r}")
    dtype = doc.get("dtype", "<f4")
    if dtype not in _DTYPES:
        raise FormatError(f"{manifest_path}: unsupported dtype {dtype!r}")
    raw = (manifest_path.parent / doc["blob"]).read_bytes()
    itemsize = np.dtype(dtype).itemsize
    tensors = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        if start + count * itemsize > len(raw):
            raise FormatError(f"{manifest_path}: tensor {name} runs past the end of the blob")
        tensors[name] = (
            np.frombuffer(raw, dtype=dtype, count=count, offset=start).reshape(shape).astype(np.float64)
        )
    return tensors, doc


def _flatten(params_list: list[dict], per_task: bool, prefix: str = "") -> dict[str, np.ndarray]:
    if not per_task:
        return {f"{prefix}{k}": v for k, v in params_list[0].items()}
    return {f"{prefix}task{i + 1}/{k}": v for i, p in enumerate(params_list) for k, v in p.items()}


def _unflatten(tensors: dict[str, np.ndarray], per_task: bool, count: int, prefix: str = ""):
    sets = [{} for _ in range(count)]
    for name, value in tensors.items():
        if not name.startswith(prefix):
            continue
        name = name[len(prefix):]
        if per_task:
            head, _, key = name.partition("/")
            sets[int(head[len("task"):]) - 1][key] = value
        else:
            sets[0][name] = value
    return sets


def save_model(model: Model, path, dtype: str = "<f4", extra: Optional[dict] = None,
               extra_tensors: Optional[dict[str, np.ndarray]] = None) -> None:
    tensors = _flatten(model.params, model.per_task)
    if extra_tensors:
        tensors.update(extra_tensors)
    meta = {"config": model.config.to_json(), "per_task": model.per_task}
    if extra:
        meta["extra"] = extra
    write_tensors(path, tensors, meta, dtype)


def load_model(path, expected_F: Optional[int] = None, expected_K: Optional[int] = None):
    """Load a model; returns ``(model, tensors, manifest)``.

    ``tensors`` still holds any non-parameter entries (optimizer state).
    """
    tensors, doc = read_tensors(path)
    try:
        config = ModelConfig.from_json(doc["config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad model config ({exc})") from None
    if expected_F is not None and config.F != expected_F:
        raise DimensionMismatchError(f"checkpoint F={config.F} but dataset F={expected_F}")
    if expected_K is not None and config.K != expected_K:
        raise DimensionMismatchError(f"checkpoint K={config.K} but dataset K={expected_K}")
    per_task = bool(doc.get("per_task", False))
    count = config.M if per_task else 1
    param_tensors = {k: v for k, v in tensors.items() if "::" not in k}
    params = _unflatten(param_tensors, per_task, count)
    model = Model(config, params, per_task)
    sub = model.sub_config()
    for p in params:
        check_params(p, sub)
    return model, tensors, doc
