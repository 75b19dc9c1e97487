"""On-disk formats: volume containers, checkpoint archives, JSON helpers."""
import hashlib
import io
import json
import os
import zipfile

import numpy as np
import torch

from .errors import CheckpointError, ValidationError

__all__ = [
    "save_volume",
    "load_volume",
    "load_nifti",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
    "fingerprint",
    "write_json",
    "read_json",
]

CHECKPOINT_VERSION = "gfemamba-checkpoint/1"


def save_volume(path, data, voxel_scale=(1.0, 1.0, 1.0)):
    """Write ``meta.json`` + ``data.raw`` (little-endian float32, C order)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValidationError(f"volume must be [C, D, H, W], got shape {data.shape}")
    os.makedirs(path, exist_ok=True)
    meta = {"dims": list(data.shape), "dtype": "float32", "voxel_scale": list(voxel_scale)}
    with open(os.path.join(path, "meta.json"), "w") as fh:
        json.dump(meta, fh)
    with open(os.path.join(path, "data.raw"), "wb") as fh:
        fh.write(np.ascontiguousarray(data).tobytes(order="C"))
    return path


def load_volume(path):
    with open(os.path.join(path, "meta.json")) as fh:
        meta = json.load(fh)
    if meta.get("dtype", "float32") != "float32":
        raise ValidationError(f"{path}: unsupported dtype {meta['dtype']!r}")
    dims = tuple(meta["dims"])
    raw = np.fromfile(os.path.join(path, "data.raw"), dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ValidationError(f"{path}: data.raw holds {raw.size} values, meta.json says {dims}")
    return raw.reshape(dims).astype(np.float32)


def load_nifti(path):
    """NIfTI -> [1, D, H, W] float32 scaled to [0, 1]. Needs ``nibabel``."""
    try:
        import nibabel as nib
    except ImportError as exc:
        raise ValidationError("reading NIfTI needs the optional 'nibabel' package") from exc
    arr = np.asarray(nib.load(path).get_fdata(), dtype=np.float64)
    arr = np.transpose(arr, (2, 1, 0))  # (x, y, z) -> (D, H, W)
    lo, hi = arr.min(), arr.max()
    arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    return arr[None].astype(np.float32)


def _npy_bytes(arr):
    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(path, state, config):
    """Zip archive: ``config.json``, ``manifest.json`` and one ``.npy`` per parameter.

    ``state`` maps stable dotted names (``encoder.block0.conv.weight``) to
    tensors or arrays.
    """
    names = sorted(state)
    manifest = {"version": CHECKPOINT_VERSION, "params": names}
    tmp = f"{path}.tmp"
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1))
        zf.writestr("config.json", json.dumps(config, indent=1, default=_json_default))
        for name in names:
            value = state[name]
            if isinstance(value, torch.Tensor):
                value = value.detach().cpu().numpy()
            zf.writestr(f"params/{name}.npy", _npy_bytes(np.asarray(value)))
    os.replace(tmp, path)
    return path


def load_checkpoint(path):
    """Returns ``(params, config)``; params maps names to numpy arrays."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint archive ({exc})") from exc
    with zf:
        present = set(zf.namelist())
        for entry in ("manifest.json", "config.json"):
            if entry not in present:
                raise CheckpointError(f"{path}: missing entry {entry!r}")
        manifest = json.loads(zf.read("manifest.json"))
        version = manifest.get("version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: checkpoint version {version!r}, expected {CHECKPOINT_VERSION!r}")
        config = json.loads(zf.read("config.json"))
        params = {}
        for name in manifest["params"]:
            entry = f"params/{name}.npy"
            if entry not in present:
                raise CheckpointError(f"{path}: missing entry {entry!r}")
            try:
                params[name] = np.load(io.BytesIO(zf.read(entry)), allow_pickle=False)
            except (zipfile.BadZipFile, ValueError, OSError) as exc:
                raise CheckpointError(f"{path}: corrupt entry {entry!r} ({exc})") from exc
    return params, config


def fingerprint(paths):
    """sha256 over the bytes of every file (directories walked in sorted order)."""
    h = hashlib.sha256()
    for p in sorted(paths):
        files = [p]
        if os.path.isdir(p):
            files = sorted(os.path.join(root, f) for root, _, fs in os.walk(p) for f in fs)
        for f in files:
            h.update(os.path.relpath(f, os.path.dirname(p)).encode())
            with open(f, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    if hasattr(obj, "isoformat"):
        return obj.isoformat()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, default=_json_default)
    return path


def read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read {path}: {exc}") from exc
