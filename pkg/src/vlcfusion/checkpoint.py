"""Single-file parameter archives.

An archive is a zip file holding ``manifest.json`` and one raw
little-endian float32 blob per array under ``arrays/``. Field names are
documented in ``vlcfusion/schemas/checkpoint.schema.json``.
"""

from __future__ import annotations

import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .fusion import FusionBlockParams
from .io import ArtifactSchemaError, validate

FORMAT = "vlcfusion-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> Path:
    """Write ``arrays`` and ``meta`` atomically to a zip archive at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blobs = {}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        fname = f"arrays/{name}.bin"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "<f4", "file": fname})
        blobs[fname] = arr.tobytes()
    manifest = {"format": FORMAT, "version": VERSION, **meta, "arrays": entries}
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(_zinfo("manifest.json"), json.dumps(manifest, indent=2, sort_keys=True))
            for fname, blob in blobs.items():
                zf.writestr(_zinfo(fname), blob)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def _zinfo(name: str) -> zipfile.ZipInfo:
    # fixed timestamp keeps archives byte-identical across runs
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.external_attr = 0o644 << 16
    return info


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing manifest.json") from exc
        if manifest.get("format") != FORMAT:
            raise CheckpointError(f"{path}: not a {FORMAT} archive")
        if manifest.get("version") != VERSION:
            raise CheckpointError(f"{path}: unsupported version {manifest.get('version')}")
        try:
            validate(manifest, "checkpoint", str(path))
        except ArtifactSchemaError as exc:
            raise CheckpointError(str(exc)) from exc
        arrays = {}
        for entry in manifest["arrays"]:
            raw = zf.read(entry["file"])
            arr = np.frombuffer(raw, dtype=entry["dtype"])
            shape = tuple(entry["shape"])
            if arr.size != int(np.prod(shape)):
                raise CheckpointError(f"{path}: array {entry['name']} has {arr.size} values, shape {shape}")
            arrays[entry["name"]] = arr.reshape(shape).astype(np.float32)
    meta = {k: v for k, v in manifest.items() if k != "arrays"}
    return meta, arrays


def save_fusion_params(params: FusionBlockParams, path: str | os.PathLike) -> Path:
    meta = {
        "kind": "fusion_block",
        "variant": params.variant,
        "seed": params.seed,
        "dims": {
            "c_a": params.c_a,
            "c_b": params.c_b,
            "c_out": params.c_out,
            "n_conditions": params.n_conditions,
            "reduction": params.reduction,
            "out_depth": params.out_depth,
        },
    }
    return save_arrays(path, params.weights, meta)


def load_fusion_params(path: str | os.PathLike, dtype=np.float32) -> FusionBlockParams:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "fusion_block":
        raise CheckpointError(f"{path}: expected kind 'fusion_block', found {meta.get('kind')!r}")
    d = meta["dims"]
    return FusionBlockParams(
        variant=meta["variant"],
        c_a=d["c_a"],
        c_b=d["c_b"],
        c_out=d["c_out"],
        n_conditions=d["n_conditions"],
        reduction=d["reduction"],
        out_depth=d["out_depth"],
        seed=meta.get("seed"),
        weights={k: v.astype(dtype) for k, v in arrays.items()},
    )
