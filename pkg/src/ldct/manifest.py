"""Config hashing, provenance manifests and the ``.f32`` + ``.meta.json`` array format."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .errors import ValidationError

MANIFEST_NAME = "manifest.json"


def _plain(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# arrays

def save_array(stem, data: np.ndarray, **meta) -> tuple[Path, Path]:
    """Write ``stem.f32`` (row-major little-endian float32) and ``stem.meta.json``."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(data), dtype="<f4")
    bin_path = stem.with_name(stem.name + ".f32")
    meta_path = stem.with_name(stem.name + ".meta.json")
    arr.tofile(bin_path)
    meta = dict(meta)
    meta["shape"] = list(arr.shape)
    meta["dtype"] = "float32-le"
    write_json(meta_path, meta)
    return bin_path, meta_path


def load_array(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    if stem.name.endswith(".f32"):
        stem = stem.with_name(stem.name[:-4])
    elif stem.name.endswith(".meta.json"):
        stem = stem.with_name(stem.name[:-10])
    meta_path = stem.with_name(stem.name + ".meta.json")
    bin_path = stem.with_name(stem.name + ".f32")
    if not meta_path.exists() or not bin_path.exists():
        raise ValidationError(f"missing array pair for {stem}")
    meta = read_json(meta_path)
    data = np.fromfile(bin_path, dtype="<f4")
    shape = tuple(meta["shape"])
    if data.size != int(np.prod(shape)):
        raise ValidationError(f"{bin_path} holds {data.size} values, metadata says {shape}")
    return data.reshape(shape).astype(np.float64), meta


def save_sinogram(stem, sino, **extra):
    return save_array(stem, sino.data, kind="sinogram", units="line integral (dimensionless)",
                      geometry=sino.geometry.to_dict(), dose_tag=sino.dose_tag, **extra)


def load_sinogram(stem):
    from .geometry import ScanGeometry, Sinogram

    data, meta = load_array(stem)
    if meta.get("kind") != "sinogram":
        raise ValidationError(f"{stem} is not a sinogram")
    return Sinogram(data, ScanGeometry.from_dict(meta["geometry"]), meta.get("dose_tag")), meta


def save_image(stem, image, **extra):
    return save_array(stem, image.data, kind="image", units="attenuation (mm^-1)",
                      hu_map="HU = 1000 * (mu - 0.0192) / 0.0192",
                      hu_window=list(image.hu_window), **extra)


def load_image(stem):
    from .geometry import CTImage

    data, meta = load_array(stem)
    if meta.get("kind") != "image":
        raise ValidationError(f"{stem} is not an image")
    return CTImage(data, tuple(meta.get("hu_window", (-1024.0, 3072.0)))), meta
