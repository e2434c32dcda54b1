"""
Intensity preprocessing, triplets, crops, augmentation and box rasterization.
"""
import logging
from dataclasses import dataclass, replace
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from app.config import HU_MAX, HU_MIN, AugmentConfig, PerturbConfig
from app.data.model import (
    BACKGROUND,
    LESION,
    NUM_CLASSES,
    ORGAN,
    Box2D,
    BoxClass,
    BoxSet,
    CtVolume,
    SegMask,
    SliceTriplet,
)

log = logging.getLogger("mixseg")

NORMALIZATION = {"kind": "linear", "hu_min": HU_MIN, "hu_max": HU_MAX, "range": [0.0, 1.0]}


# =========================================================
# INTENSITY
# =========================================================

def truncate_hu(volume: CtVolume) -> CtVolume:
    clipped = np.clip(volume.voxels, HU_MIN, HU_MAX).astype(np.int16)
    return replace(volume, voxels=clipped, truncated=True)


def normalize_hu(voxels: np.ndarray) -> np.ndarray:
    """HU -> [0, 1] float32 over the truncation window."""
    v = np.clip(np.asarray(voxels, dtype=np.float32), HU_MIN, HU_MAX)
    return (v - HU_MIN) / float(HU_MAX - HU_MIN)


# =========================================================
# TRIPLETS
# =========================================================

def triplets_from_array(slices: np.ndarray, centers: Optional[Iterable[int]] = None) -> List[SliceTriplet]:
    """Triplets (k-1, k, k+1) over a normalized [D, H, W] array, edges replicated."""
    arr = np.asarray(slices, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValueError(f"expected non-empty [D, H, W] array, got {arr.shape}")
    d = arr.shape[0]
    if d < 3:
        raise ValueError(f"need at least 3 slices for triplets, got {d}")
    idx = range(d) if centers is None else centers
    out = []
    for k in idx:
        rows = np.clip([k - 1, k, k + 1], 0, d - 1)
        out.append(SliceTriplet(arr[rows], int(k)))
    return out


def make_triplets(volume: CtVolume) -> List[SliceTriplet]:
    return triplets_from_array(normalize_hu(volume.voxels))


def crop_centers(depth: int) -> range:
    """Centers with full 3-slice context: 1 .. depth-2."""
    return range(1, depth - 1)


# =========================================================
# CROP
# =========================================================

class Crop(NamedTuple):
    volume: CtVolume
    mask: Optional[SegMask]
    boxes: BoxSet
    soft_label: Optional[np.ndarray] = None   # float32 [3, d, h, w]
    offset: Tuple[int, int, int] = (0, 0, 0)


def _pad_to(arr: np.ndarray, size: Sequence[int], value, lead: int = 0) -> np.ndarray:
    pads = [(0, 0)] * lead + [(0, max(0, s - n)) for s, n in zip(size, arr.shape[lead:])]
    if not any(p[1] for p in pads):
        return arr
    return np.pad(arr, pads, mode="constant", constant_values=value)


def crop_boxes(boxes: BoxSet, offset: Tuple[int, int, int], size: Tuple[int, int, int]) -> BoxSet:
    z0, y0, x0 = offset
    d, h, w = size
    out = []
    for b in boxes.boxes:
        z = b.slice_index - z0
        if not 0 <= z < d:
            continue
        moved = (b.x0 - x0, b.y0 - y0, b.x1 - x0, b.y1 - y0)
        x0c, y0c = max(moved[0], 0), max(moved[1], 0)
        x1c, y1c = min(moved[2], w), min(moved[3], h)
        if x1c <= x0c or y1c <= y0c:
            continue
        out.append(Box2D(z, b.cls, x0c, y0c, x1c, y1c))
    return BoxSet(tuple(out), boxes.case_id)


def crop_subvolume(
    volume: CtVolume,
    mask: Optional[SegMask],
    boxes: BoxSet,
    size: Tuple[int, int, int] = (6, 320, 320),
    rng: Optional[np.random.Generator] = None,
    soft_label: Optional[np.ndarray] = None,
) -> Crop:
    """
    Random aligned crop of voxels, labels, soft labels and boxes.
    Smaller volumes are padded at the far end with -200 HU / background.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    size = tuple(int(s) for s in size)
    vox = _pad_to(volume.voxels, size, HU_MIN)
    lab = _pad_to(mask.labels, size, BACKGROUND) if mask is not None else None
    soft = None
    if soft_label is not None:
        soft = np.asarray(soft_label, dtype=np.float32)
        if any(s > n for s, n in zip(size, volume.shape)):
            soft = _pad_to(soft, size, 0.0, lead=1)
            # padded pixels are pure background
            d0, h0, w0 = volume.shape
            bg = soft[BACKGROUND]
            bg[d0:, :, :] = 1.0
            bg[:, h0:, :] = 1.0
            bg[:, :, w0:] = 1.0

    offset = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(vox.shape, size))
    z0, y0, x0 = offset
    d, h, w = size
    window = (slice(z0, z0 + d), slice(y0, y0 + h), slice(x0, x0 + w))

    vol_c = CtVolume(vox[window], volume.spacing_mm, volume.case_id, volume.truncated)
    mask_c = SegMask(lab[window], mask.case_id) if lab is not None else None
    soft_c = np.ascontiguousarray(soft[(slice(None),) + window]) if soft is not None else None
    return Crop(vol_c, mask_c, crop_boxes(boxes, offset, size), soft_c, offset)


# =========================================================
# AUGMENTATION
# =========================================================

@dataclass(frozen=True)
class AugmentParams:
    scale: float = 1.0
    flip: bool = False


def draw_augment_params(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentParams:
    if not cfg.enabled:
        return AugmentParams()
    lo, hi = cfg.scale_range
    scale = float(rng.uniform(lo, hi))
    flip = bool(rng.random() < cfg.flip_prob)
    return AugmentParams(scale, flip)


def _resample(arr: np.ndarray, out_hw: Tuple[int, int], mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))[None]
    if mode == "bilinear":
        r = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    else:
        r = F.interpolate(t, size=out_hw, mode="nearest")
    return r[0].numpy()


def _center_fit(arr: np.ndarray, h: int, w: int, fill: Sequence[float]) -> Tuple[np.ndarray, int, int]:
    """Center-crop or pad [C, hs, ws] back to [C, h, w]; returns (out, shift_y, shift_x)."""
    c, hs, ws = arr.shape
    out = np.empty((c, h, w), dtype=arr.dtype)
    for ch in range(c):
        out[ch] = fill[ch]
    sy = (h - hs) // 2 if hs < h else -((hs - h) // 2)
    sx = (w - ws) // 2 if ws < w else -((ws - w) // 2)
    src_y0, dst_y0 = max(0, -sy), max(0, sy)
    src_x0, dst_x0 = max(0, -sx), max(0, sx)
    ny, nx = min(hs - src_y0, h - dst_y0), min(ws - src_x0, w - dst_x0)
    out[:, dst_y0:dst_y0 + ny, dst_x0:dst_x0 + nx] = arr[:, src_y0:src_y0 + ny, src_x0:src_x0 + nx]
    return out, sy, sx


def _transform_box(b: Box2D, sy_scale: float, sx_scale: float, shift_y: int, shift_x: int,
                   h: int, w: int, flip: bool) -> Optional[Box2D]:
    x0 = int(np.floor(b.x0 * sx_scale)) + shift_x
    x1 = int(np.ceil(b.x1 * sx_scale)) + shift_x
    y0 = int(np.floor(b.y0 * sy_scale)) + shift_y
    y1 = int(np.ceil(b.y1 * sy_scale)) + shift_y
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, w), min(y1, h)
    if x1 <= x0 or y1 <= y0:
        return None
    if flip:
        x0, x1 = w - x1, w - x0
    return Box2D(b.slice_index, b.cls, x0, y0, x1, y1)


def apply_augment(
    image: SliceTriplet,
    label: Optional[np.ndarray],
    boxes: Sequence[Box2D],
    params: AugmentParams,
) -> Tuple[SliceTriplet, Optional[np.ndarray], Tuple[Box2D, ...]]:
    """
    label is a hard [H, W] class map, a soft [3, H, W] distribution, or None.
    One transform is shared by all channels and targets.
    """
    h, w = image.hw
    img = np.array(image.channels)
    lab = None if label is None else np.array(label)
    soft = lab is not None and lab.ndim == 3

    hs, ws = int(round(h * params.scale)), int(round(w * params.scale))
    shift_y = shift_x = 0
    resampled = (hs, ws) != (h, w)
    if resampled:
        img = _resample(img, (hs, ws), "bilinear")
        img, shift_y, shift_x = _center_fit(img, h, w, fill=[0.0] * img.shape[0])
        if lab is not None:
            if soft:
                lab = _resample(lab, (hs, ws), "bilinear")
                lab, _, _ = _center_fit(lab, h, w, fill=[1.0] + [0.0] * (NUM_CLASSES - 1))
            else:
                lab = _resample(lab[None].astype(np.float32), (hs, ws), "nearest")
                lab, _, _ = _center_fit(lab, h, w, fill=[BACKGROUND])
                lab = np.rint(lab[0]).astype(np.uint8)

    sy_scale, sx_scale = hs / h, ws / w
    out_boxes = []
    for b in boxes:
        nb = _transform_box(b, sy_scale, sx_scale, shift_y, shift_x, h, w, params.flip)
        if nb is not None:
            out_boxes.append(nb)

    if params.flip:
        img = img[:, :, ::-1]
        if lab is not None:
            lab = lab[..., ::-1]
    if lab is not None and soft:
        lab = np.ascontiguousarray(lab, dtype=np.float32)
        if resampled:
            lab /= lab.sum(axis=0, keepdims=True)
    elif lab is not None:
        lab = np.ascontiguousarray(lab)
    return SliceTriplet(np.ascontiguousarray(img), image.center_index), lab, tuple(out_boxes)


def augment(
    image: SliceTriplet,
    label: Optional[np.ndarray],
    boxes: Sequence[Box2D],
    rng: np.random.Generator,
    cfg: AugmentConfig = AugmentConfig(),
) -> Tuple[SliceTriplet, Optional[np.ndarray], Tuple[Box2D, ...]]:
    return apply_augment(image, label, boxes, draw_augment_params(rng, cfg))


# =========================================================
# BOX RASTERS
# =========================================================

@dataclass(frozen=True)
class BoxMaskPyramid:
    organ: Tuple[np.ndarray, ...]     # scale j -> float32 [H / 2^(j-1), W / 2^(j-1)]
    lesion: Tuple[np.ndarray, ...]

    @property
    def scales(self) -> int:
        return len(self.organ)


@dataclass(frozen=True)
class OneHotBoxLabel:
    class_map: np.ndarray             # uint8 [H, W] in {0, 1, 2}


def rasterize(boxes: Iterable[Box2D], shape: Tuple[int, int]) -> np.ndarray:
    h, w = shape
    m = np.zeros((h, w), dtype=np.float32)
    for b in boxes:
        if not b.within(h, w):
            raise ValueError(f"box {b} outside {h}x{w}")
        m[b.y0:b.y1, b.x0:b.x1] = 1.0
    return m


def _downsample2(m: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(m))[None, None]
    return F.interpolate(t, scale_factor=0.5, mode="bilinear", align_corners=False)[0, 0].numpy()


def render_box_pyramid(boxes: Iterable[Box2D], shape: Tuple[int, int], scales: int = 4) -> BoxMaskPyramid:
    """
    Scale 1: organ = union of all boxes, lesion = union of lesion boxes.
    Scale j+1: bilinear factor-2 downsampling of scale j.
    """
    boxes = list(boxes)
    organ = [rasterize(boxes, shape)]
    lesion = [rasterize([b for b in boxes if b.cls == BoxClass.LESION], shape)]
    for _ in range(1, scales):
        organ.append(_downsample2(organ[-1]))
        lesion.append(_downsample2(lesion[-1]))
    return BoxMaskPyramid(tuple(organ), tuple(lesion))


def boxes_to_onehot(boxes: Iterable[Box2D], shape: Tuple[int, int]) -> OneHotBoxLabel:
    boxes = list(boxes)
    organ = rasterize(boxes, shape) > 0
    lesion = rasterize([b for b in boxes if b.cls == BoxClass.LESION], shape) > 0
    cmap = np.full(shape, BACKGROUND, dtype=np.uint8)
    cmap[organ] = ORGAN
    cmap[lesion] = LESION
    return OneHotBoxLabel(cmap)


# =========================================================
# PERTURBATION
# =========================================================

def _perturb_one(b: Box2D, rng: np.random.Generator, scale: Tuple[float, float], shift: float,
                 h: int, w: int) -> Box2D:
    bw, bh = b.width, b.height
    cx, cy = (b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0
    u = rng.uniform(scale[0], scale[1])
    x0, x1 = cx - u * bw / 2.0, cx + u * bw / 2.0
    y0, y1 = cy - u * bh / 2.0, cy + u * bh / 2.0
    # each corner moves independently, bounded by a fraction of the side
    dx = rng.uniform(-shift * bw, shift * bw, size=2)
    dy = rng.uniform(-shift * bh, shift * bh, size=2)
    nx0, nx1 = int(round(x0 + dx[0])), int(round(x1 + dx[1]))
    ny0, ny1 = int(round(y0 + dy[0])), int(round(y1 + dy[1]))
    nx0, nx1 = min(max(nx0, 0), w), min(max(nx1, 0), w)
    ny0, ny1 = min(max(ny0, 0), h), min(max(ny1, 0), h)
    if nx1 < nx0:
        nx0, nx1 = nx1, nx0
    if ny1 < ny0:
        ny0, ny1 = ny1, ny0
    # min side 1
    if nx1 == nx0:
        nx0, nx1 = (nx0, nx0 + 1) if nx0 < w else (w - 1, w)
    if ny1 == ny0:
        ny0, ny1 = (ny0, ny0 + 1) if ny0 < h else (h - 1, h)
    return Box2D(b.slice_index, b.cls, nx0, ny0, nx1, ny1)


def perturb_boxes(
    boxes: BoxSet,
    rng: np.random.Generator,
    shape: Tuple[int, int],
    cfg: PerturbConfig = PerturbConfig(),
) -> BoxSet:
    """Scale about the center, then jitter corners; organ and lesion use separate bounds."""
    h, w = shape
    out = []
    for b in boxes.boxes:
        if b.cls == BoxClass.ORGAN:
            out.append(_perturb_one(b, rng, cfg.organ_scale, cfg.organ_shift, h, w))
        else:
            out.append(_perturb_one(b, rng, cfg.lesion_scale, cfg.lesion_shift, h, w))
    return BoxSet(tuple(out), boxes.case_id)
