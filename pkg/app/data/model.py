"""
Dataset entities: volumes, masks, 2D boxes, per-slice samples.

All types are immutable after construction; array fields are made
read-only.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from app.config import HU_MAX, HU_MIN

log = logging.getLogger("mixseg")

BACKGROUND, ORGAN, LESION = 0, 1, 2
NUM_CLASSES = 3

# 4-connectivity for 2D components
_STRUCT_2D = ndimage.generate_binary_structure(2, 1)


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class BoxClass(str, Enum):
    ORGAN = "organ"
    LESION = "lesion"


# =========================================================
# VOLUMES
# =========================================================

@dataclass(frozen=True)
class CtVolume:
    voxels: np.ndarray                      # int16 [D, H, W], HU
    spacing_mm: Tuple[float, float, float]
    case_id: str
    truncated: bool = False

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3:
            raise ValueError(f"CtVolume {self.case_id}: expected rank-3 voxels, got shape {v.shape}")
        d, h, w = v.shape
        if d < 3 or h < 16 or w < 16:
            raise ValueError(f"CtVolume {self.case_id}: shape {v.shape} below minimum (3, 16, 16)")
        if not np.issubdtype(v.dtype, np.integer):
            raise ValueError(f"CtVolume {self.case_id}: integer voxels required, got {v.dtype}")
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"CtVolume {self.case_id}: spacing must be 3 positive reals, got {self.spacing_mm}")
        if self.truncated and (v.min() < HU_MIN or v.max() > HU_MAX):
            raise ValueError(f"CtVolume {self.case_id}: flagged truncated but values leave [{HU_MIN}, {HU_MAX}]")
        object.__setattr__(self, "voxels", _frozen(v.astype(np.int16, copy=False)))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class SegMask:
    labels: np.ndarray                      # uint8 [D, H, W] in {0, 1, 2}
    case_id: str

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 3:
            raise ValueError(f"SegMask {self.case_id}: expected rank-3 labels, got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() > LESION):
            raise ValueError(f"SegMask {self.case_id}: label values must lie in {{0, 1, 2}}")
        object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8, copy=False)))

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.labels.shape)

    def check_pair(self, volume: CtVolume) -> None:
        if self.shape != volume.shape:
            raise ValueError(f"mask shape {self.shape} != volume shape {volume.shape} ({self.case_id})")


# =========================================================
# BOXES
# =========================================================

@dataclass(frozen=True)
class Box2D:
    """Half-open pixel rectangle [x0, x1) x [y0, y1) on one slice."""
    slice_index: int
    cls: BoxClass
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        object.__setattr__(self, "cls", BoxClass(self.cls))
        for name in ("slice_index", "x0", "y0", "x1", "y1"):
            object.__setattr__(self, name, int(getattr(self, name)))
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate or negative box {self}")

    @property
    def width(self) -> int:
        return self.x1 - self.x0

    @property
    def height(self) -> int:
        return self.y1 - self.y0

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, h: int, w: int) -> bool:
        return self.x1 <= w and self.y1 <= h

    def contains(self, other: "Box2D") -> bool:
        return (self.x0 <= other.x0 and self.y0 <= other.y0
                and other.x1 <= self.x1 and other.y1 <= self.y1)

    def clipped(self, h: int, w: int) -> Optional["Box2D"]:
        """Clip to [0, w) x [0, h); None when nothing is left."""
        x0, y0 = max(self.x0, 0), max(self.y0, 0)
        x1, y1 = min(self.x1, w), min(self.y1, h)
        if x1 <= x0 or y1 <= y0:
            return None
        return replace(self, x0=x0, y0=y0, x1=x1, y1=y1)

    def to_json(self) -> Dict[str, object]:
        return {"slice": self.slice_index, "cls": self.cls.value,
                "x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1}

    @classmethod
    def from_json(cls, d: Dict[str, object]) -> "Box2D":
        return cls(slice_index=d["slice"], cls=d["cls"], x0=d["x0"], y0=d["y0"], x1=d["x1"], y1=d["y1"])


@dataclass(frozen=True)
class BoxSet:
    boxes: Tuple[Box2D, ...]
    case_id: str
    _by_slice: Dict[int, Tuple[Box2D, ...]] = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        boxes = tuple(sorted(self.boxes, key=lambda b: (b.slice_index, b.cls != BoxClass.ORGAN,
                                                         b.y0, b.x0, b.y1, b.x1)))
        object.__setattr__(self, "boxes", boxes)
        grouped: Dict[int, List[Box2D]] = {}
        for b in boxes:
            grouped.setdefault(b.slice_index, []).append(b)
        object.__setattr__(self, "_by_slice", {k: tuple(v) for k, v in grouped.items()})

    def __len__(self) -> int:
        return len(self.boxes)

    def slice_indices(self) -> List[int]:
        return sorted(self._by_slice)

    def for_slice(self, index: int) -> Tuple[Box2D, ...]:
        return self._by_slice.get(index, ())

    def of_class(self, cls: BoxClass) -> Tuple[Box2D, ...]:
        return tuple(b for b in self.boxes if b.cls == cls)

    def check_bounds(self, h: int, w: int) -> None:
        bad = [b for b in self.boxes if not b.within(h, w)]
        if bad:
            raise ValueError(f"{self.case_id}: {len(bad)} box(es) outside {h}x{w}, first {bad[0]}")

    def to_json(self) -> List[Dict[str, object]]:
        return [b.to_json() for b in self.boxes]

    @classmethod
    def from_json(cls, items: Iterable[Dict[str, object]], case_id: str) -> "BoxSet":
        return cls(tuple(Box2D.from_json(d) for d in items), case_id)

    @classmethod
    def from_mask(cls, mask: SegMask) -> "BoxSet":
        boxes: List[Box2D] = []
        for d in range(mask.shape[0]):
            boxes.extend(boxes_from_mask(mask.labels[d], slice_index=d))
        return cls(tuple(boxes), mask.case_id)


# =========================================================
# SAMPLES
# =========================================================

@dataclass(frozen=True)
class SliceTriplet:
    channels: np.ndarray        # float32 [3, H, W], normalized
    center_index: int

    def __post_init__(self):
        c = np.asarray(self.channels, dtype=np.float32)
        if c.ndim != 3 or c.shape[0] != 3:
            raise ValueError(f"SliceTriplet: expected [3, H, W], got {c.shape}")
        object.__setattr__(self, "channels", _frozen(c))

    @property
    def hw(self) -> Tuple[int, int]:
        return self.channels.shape[1], self.channels.shape[2]


@dataclass(frozen=True)
class StrongSample:
    image: SliceTriplet
    dense_label: np.ndarray     # uint8 [H, W]
    boxes: Tuple[Box2D, ...]

    def __post_init__(self):
        lab = np.asarray(self.dense_label)
        if lab.shape != self.image.hw:
            raise ValueError(f"StrongSample: label {lab.shape} vs image {self.image.hw}")
        object.__setattr__(self, "dense_label", _frozen(lab.astype(np.uint8, copy=False)))
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class WeakSample:
    image: SliceTriplet
    boxes: Tuple[Box2D, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


SIMPLEX_TOL = 1e-5


@dataclass(frozen=True)
class PseudoSample:
    image: SliceTriplet
    soft_label: np.ndarray      # float32 [3, H, W], per-pixel simplex
    boxes: Tuple[Box2D, ...]

    def __post_init__(self):
        q = np.asarray(self.soft_label, dtype=np.float32)
        if q.shape != (NUM_CLASSES,) + self.image.hw:
            raise ValueError(f"PseudoSample: soft label {q.shape} vs image {self.image.hw}")
        if q.min() < 0.0 or q.max() > 1.0 or np.abs(q.sum(axis=0) - 1.0).max() > SIMPLEX_TOL:
            raise ValueError("PseudoSample: soft label is not a per-pixel probability simplex")
        object.__setattr__(self, "soft_label", _frozen(q))
        object.__setattr__(self, "boxes", tuple(self.boxes))


# =========================================================
# OPERATIONS
# =========================================================

def _component_boxes(binary: np.ndarray, cls: BoxClass, slice_index: int) -> List[Box2D]:
    labeled, n = ndimage.label(binary, structure=_STRUCT_2D)
    if n == 0:
        return []
    out = []
    for sl in ndimage.find_objects(labeled):
        ys, xs = sl
        out.append(Box2D(slice_index, cls, xs.start, ys.start, xs.stop, ys.stop))
    return out


def boxes_from_mask(mask2d: np.ndarray, slice_index: int = 0) -> List[Box2D]:
    """
    Circumscribed rectangles of the 4-connected components of a class map.
    Organ extent is the union of labels {1, 2}, so every organ box encloses
    its lesions. Organ boxes come first, then lesion boxes.
    """
    m = np.asarray(mask2d)
    if m.ndim != 2:
        raise ValueError(f"boxes_from_mask: expected rank-2 map, got {m.shape}")
    organ = _component_boxes(m >= ORGAN, BoxClass.ORGAN, slice_index)
    lesion = _component_boxes(m == LESION, BoxClass.LESION, slice_index)
    return organ + lesion


def strong_to_weak(sample: StrongSample) -> WeakSample:
    return WeakSample(image=sample.image, boxes=sample.boxes)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    cases: Sequence[str],
    ratio: Tuple[int, int, int],
    seed: int,
) -> Tuple[List[str], List[str], List[str]]:
    """
    Seeded (strong, weak, val) partition.

    Validation ids are taken first from the permutation, then strong, then
    weak; the weak part receives the rounding remainder.
    """
    if len(ratio) != 3 or sum(ratio) != 100 or min(ratio) < 0:
        raise ValueError(f"ratio must be three non-negative percentages summing to 100, got {ratio}")
    if len(set(cases)) != len(cases):
        raise ValueError("duplicate case ids")
    n = len(cases)
    p_strong, p_weak, p_val = ratio
    n_strong = _round_half_up(n * p_strong / 100)
    n_val = _round_half_up(n * p_val / 100)
    # rounding overshoot: trim validation first, then strong
    while n_strong + n_val > n and n_val > (1 if p_val else 0):
        n_val -= 1
    while n_strong + n_val > n and n_strong > (1 if p_strong else 0):
        n_strong -= 1
    if p_weak == 0:
        n_strong = n - n_val
    n_weak = n - n_strong - n_val
    for name, pct, size in (("strong", p_strong, n_strong), ("weak", p_weak, n_weak), ("val", p_val, n_val)):
        if pct > 0 and size <= 0:
            raise ValueError(f"{name} part rounds to 0 cases ({pct}% of {n})")

    rng = np.random.default_rng(seed)
    order = [cases[i] for i in rng.permutation(n)]
    val = order[:n_val]
    strong = order[n_val:n_val + n_strong]
    weak = order[n_val + n_strong:]
    log.info(f"[SPLIT] {n} cases -> strong={len(strong)} weak={len(weak)} val={len(val)} (ratio={ratio}, seed={seed})")
    return strong, weak, val
