"""
On-disk case layout:

    <root>/<case_id>/volume.raw   int16 LE, C-order D x H x W
    <root>/<case_id>/mask.raw     uint8, same order (optional)
    <root>/<case_id>/boxes.json   [{slice, cls, x0, y0, x1, y1}, ...]
    <root>/<case_id>/meta.json    {shape, spacing_mm, dtype, ...}

Pseudo labels live in their own directory per case:

    soft_label.raw   float32 LE [3, D, H, W]
    provenance.json
"""
import json
import logging
import os
from pathlib import Path
from threading import Lock
from typing import Any, Dict, List, NamedTuple, Optional, Union

import numpy as np

from app.data.ingest import NORMALIZATION
from app.data.model import NUM_CLASSES, BoxSet, CtVolume, SegMask
from app.utils.text import _is_ascii

log = logging.getLogger("mixseg")

PathLike = Union[str, Path]

VOLUME_FILE = "volume.raw"
MASK_FILE = "mask.raw"
BOXES_FILE = "boxes.json"
META_FILE = "meta.json"
SOFT_FILE = "soft_label.raw"
PROVENANCE_FILE = "provenance.json"
PRED_FILE = "pred.raw"

_IO_LOCK = Lock()


class CaseRecord(NamedTuple):
    volume: CtVolume
    mask: Optional[SegMask]
    boxes: BoxSet


# =========================================================
# JSON (atomic)
# =========================================================

def save_json(path: PathLike, data: Any) -> None:
    """Write JSON through a temp file + os.replace so readers never see half a file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with _IO_LOCK:
        with open(tmp_path, "w", encoding="utf-8") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
        os.replace(tmp_path, path)


def load_json(path: PathLike, default: Any = None) -> Any:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        if default is not None:
            return default
        raise


def _write_raw(path: Path, arr: np.ndarray, dtype: str) -> None:
    tmp_path = path.with_name(path.name + ".tmp")
    np.ascontiguousarray(arr).astype(dtype, copy=False).tofile(tmp_path)
    os.replace(tmp_path, path)


def _read_raw(path: Path, dtype: str, shape) -> np.ndarray:
    arr = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(shape))
    if arr.size != expected:
        raise ValueError(f"{path}: {arr.size} values on disk, expected {expected} for shape {tuple(shape)}")
    return arr.reshape(shape)


# =========================================================
# CASES
# =========================================================

def case_dir(root: PathLike, case_id: str) -> Path:
    if not case_id or not _is_ascii(case_id) or any(c in case_id for c in "/\\:") or case_id.startswith("."):
        raise ValueError(f"case id {case_id!r} must be a plain ASCII directory name")
    return Path(root) / case_id


def write_case(
    root: PathLike,
    volume: CtVolume,
    mask: Optional[SegMask] = None,
    boxes: Optional[BoxSet] = None,
) -> Path:
    d = case_dir(root, volume.case_id)
    d.mkdir(parents=True, exist_ok=True)
    _write_raw(d / VOLUME_FILE, volume.voxels, "<i2")
    if mask is not None:
        mask.check_pair(volume)
        _write_raw(d / MASK_FILE, mask.labels, "u1")
    if boxes is None and mask is not None:
        boxes = BoxSet.from_mask(mask)
    boxes = boxes if boxes is not None else BoxSet((), volume.case_id)
    boxes.check_bounds(volume.shape[1], volume.shape[2])
    save_json(d / BOXES_FILE, boxes.to_json())
    save_json(d / META_FILE, {
        "shape": list(volume.shape),
        "spacing_mm": list(volume.spacing_mm),
        "dtype": "int16",
        "truncated": volume.truncated,
        "has_mask": mask is not None,
        "normalization": NORMALIZATION,
    })
    return d


def read_case(root: PathLike, case_id: str, with_mask: bool = True) -> CaseRecord:
    d = case_dir(root, case_id)
    meta = load_json(d / META_FILE)
    shape = tuple(int(s) for s in meta["shape"])
    dtype = meta.get("dtype", "int16")
    if dtype != "int16":
        raise ValueError(f"{d}: unsupported volume dtype {dtype!r}")
    vox = _read_raw(d / VOLUME_FILE, "<i2", shape)
    volume = CtVolume(vox, tuple(meta["spacing_mm"]), case_id, bool(meta.get("truncated", False)))

    mask = None
    if with_mask and (d / MASK_FILE).exists():
        mask = SegMask(_read_raw(d / MASK_FILE, "u1", shape), case_id)
    elif with_mask and meta.get("has_mask"):
        log.warning(f"[STORE] {case_id}: meta says has_mask but {MASK_FILE} is missing")

    boxes = BoxSet.from_json(load_json(d / BOXES_FILE, default=[]), case_id)
    boxes.check_bounds(shape[1], shape[2])
    return CaseRecord(volume, mask, boxes)


def list_cases(root: PathLike) -> List[str]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / META_FILE).exists())


# =========================================================
# PSEUDO LABELS / PREDICTIONS
# =========================================================

def write_soft_label(out_dir: PathLike, soft: np.ndarray, provenance: Dict[str, Any]) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    soft = np.asarray(soft, dtype=np.float32)
    if soft.ndim != 4 or soft.shape[0] != NUM_CLASSES:
        raise ValueError(f"soft label must be [3, D, H, W], got {soft.shape}")
    _write_raw(d / SOFT_FILE, soft, "<f4")
    save_json(d / PROVENANCE_FILE, {**provenance, "shape": list(soft.shape)})
    return d


def read_soft_label(out_dir: PathLike) -> np.ndarray:
    d = Path(out_dir)
    prov = load_json(d / PROVENANCE_FILE)
    return _read_raw(d / SOFT_FILE, "<f4", tuple(prov["shape"])).astype(np.float32, copy=False)


def read_provenance(out_dir: PathLike) -> Dict[str, Any]:
    return load_json(Path(out_dir) / PROVENANCE_FILE)


def write_prediction(out_dir: PathLike, mask: SegMask) -> Path:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    _write_raw(d / PRED_FILE, mask.labels, "u1")
    save_json(d / META_FILE, {"shape": list(mask.shape), "dtype": "uint8"})
    return d


def read_prediction(out_dir: PathLike, case_id: str) -> SegMask:
    d = Path(out_dir)
    meta = load_json(d / META_FILE)
    return SegMask(_read_raw(d / PRED_FILE, "u1", tuple(meta["shape"])), case_id)


# =========================================================
# NIFTI IMPORT
# =========================================================

def import_nifti(
    volume_path: PathLike,
    root: PathLike,
    case_id: str,
    mask_path: Optional[PathLike] = None,
) -> Path:
    """
    Converts a NIfTI scan (and optional label map) into the case layout.
    NIfTI arrays are (x, y, z); the case layout is (z, y, x).
    """
    import nibabel as nib

    img = nib.as_closest_canonical(nib.load(str(volume_path)))
    data = np.asarray(img.dataobj)
    if data.ndim != 3:
        raise ValueError(f"{volume_path}: expected a 3D scan, got shape {data.shape}")
    vox = np.transpose(data, (2, 1, 0))
    vox = np.clip(np.rint(vox), np.iinfo(np.int16).min, np.iinfo(np.int16).max).astype(np.int16)
    zooms = img.header.get_zooms()[:3]
    volume = CtVolume(vox, (float(zooms[2]), float(zooms[1]), float(zooms[0])), case_id)

    mask = None
    if mask_path is not None:
        lab_img = nib.as_closest_canonical(nib.load(str(mask_path)))
        lab = np.transpose(np.asarray(lab_img.dataobj), (2, 1, 0))
        lab = np.rint(lab).astype(np.int64)
        if lab.min() < 0 or lab.max() > 2:
            raise ValueError(f"{mask_path}: label values outside {{0, 1, 2}}")
        mask = SegMask(lab.astype(np.uint8), case_id)

    d = write_case(root, volume, mask)
    log.info(f"[STORE] imported {volume_path} -> {d} shape={volume.shape} mask={'yes' if mask else 'no'}")
    return d
