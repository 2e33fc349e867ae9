"""Deterministic checkpoint archives.

A checkpoint is a zip file holding ``meta.json`` plus one raw float32
little-endian array per entry under ``arrays/``. Entries are stored
uncompressed in sorted name order with a fixed timestamp, so writing the
same state twice yields byte-identical files.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch

_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint archive."""


def _json_bytes(meta: dict) -> bytes:
    return (json.dumps(meta, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_checkpoint(path: str | Path, meta: dict,
                    arrays: dict[str, np.ndarray | torch.Tensor]) -> Path:
    """Write meta + named arrays; array shapes go into meta['shapes'].

    Arrays are cast to float32; meta must be JSON-serializable and must not
    already claim a 'shapes' key of its own.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if "shapes" in meta:
        raise CheckpointError("meta['shapes'] is reserved for array shapes")
    prepared: dict[str, np.ndarray] = {}
    shapes: dict[str, list[int]] = {}
    for name, arr in arrays.items():
        if "/" in name or name != name.strip():
            raise CheckpointError(f"bad array name {name!r}")
        if isinstance(arr, torch.Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        prepared[name] = arr
        shapes[name] = list(arr.shape)
    full_meta = dict(meta)
    full_meta["shapes"] = shapes

    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        entries = [("meta.json", _json_bytes(full_meta))]
        entries += [(f"arrays/{name}.f32", prepared[name].tobytes())
                    for name in sorted(prepared)]
        for name, blob in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o644 << 16
            zf.writestr(info, blob)
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read back (meta, arrays); shapes come from meta['shapes']."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            if "meta.json" not in names:
                raise CheckpointError(f"{path}: missing meta.json")
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            shapes = meta.get("shapes")
            if not isinstance(shapes, dict):
                raise CheckpointError(f"{path}: meta.json lacks a shapes table")
            arrays: dict[str, np.ndarray] = {}
            for name, shape in shapes.items():
                entry = f"arrays/{name}.f32"
                if entry not in names:
                    raise CheckpointError(f"{path}: missing array entry {entry}")
                raw = np.frombuffer(zf.read(entry), dtype="<f4")
                expected = int(np.prod(shape)) if shape else 1
                if raw.size != expected:
                    raise CheckpointError(
                        f"{path}: array {name!r} holds {raw.size} floats, "
                        f"shape {shape} needs {expected}")
                arrays[name] = raw.reshape(shape).copy()
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"{path}: not a zip archive ({exc})") from exc
    return meta, arrays


def module_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    """Flatten a module's state dict to checkpoint arrays (dots to double
    underscores, float32)."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[name.replace(".", "__")] = tensor.detach().cpu().numpy().astype("<f4")
    return out


def load_module_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                       prefix: str = "") -> None:
    """Copy checkpoint arrays back into a module's state dict in place."""
    state = module.state_dict()
    for name, tensor in state.items():
        key = prefix + name.replace(".", "__")
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks array {key!r}")
        arr = arrays[key]
        if list(arr.shape) != list(tensor.shape):
            raise CheckpointError(
                f"array {key!r} shape {list(arr.shape)} != parameter shape {list(tensor.shape)}")
        src = torch.from_numpy(np.ascontiguousarray(arr))
        if tensor.dtype == torch.long:
            state[name] = src.round().to(torch.long)
        else:
            state[name] = src.to(tensor.dtype)
    module.load_state_dict(state)
