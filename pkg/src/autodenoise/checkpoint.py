"""Versioned .npz checkpoints for CTR models and policies.

The archive is written with fixed zip timestamps so identical parameters give
identical bytes.  A JSON entry carries the architecture, the schema hash and the
config hash; loading refuses a checkpoint built for another schema.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from .data import FieldSchema
from .models import CtrModel, build_model
from .policy import PolicyNet

FORMAT = "autodenoise-checkpoint"
VERSION = 1
_META = "__meta__.json"


class CheckpointError(ValueError):
    pass


def _state(obj) -> dict[str, np.ndarray]:
    return {**{f"param/{k}": v for k, v in obj.parameters().items()}, **{f"buffer/{k}": v for k, v in obj.buffers().items()}}


def save_checkpoint(path, obj: CtrModel | PolicyNet, config_hash: str = "") -> None:
    kind = "policy" if isinstance(obj, PolicyNet) else "ctr"
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "architecture": obj.config(),
        "schema_hash": obj.schema.hash(),
        "config_hash": config_hash,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            zf.writestr(zipfile.ZipInfo(_META, date_time=(1980, 1, 1, 0, 0, 0)), json.dumps(meta, sort_keys=True))
            for name, arr in sorted(_state(obj).items()):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read(_META))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format {meta.get('format')!r} v{meta.get('version')}")
    return meta, arrays


def load_checkpoint(path, schema: FieldSchema) -> CtrModel | PolicyNet:
    """Rebuild the saved object against ``schema``; the schema hash must match."""
    meta, arrays = read_checkpoint(path)
    if meta["schema_hash"] != schema.hash():
        raise CheckpointError(f"{path}: checkpoint schema {meta['schema_hash']} does not match dataset schema {schema.hash()}")
    arch = dict(meta["architecture"])
    if meta["kind"] == "policy":
        arch["hidden"] = tuple(arch["hidden"])
        obj = PolicyNet(schema, **arch)
    else:
        kind = arch.pop("kind")
        if "hidden" in arch:
            arch["hidden"] = tuple(arch["hidden"])
        obj = build_model(kind, schema, **arch)
    state = _state(obj)
    if set(state) != set(arrays):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    for name, target in state.items():
        src = arrays[name]
        if src.shape != target.shape:
            raise CheckpointError(f"{path}: shape mismatch for {name}: {src.shape} vs {target.shape}")
        target[...] = src
    return obj
