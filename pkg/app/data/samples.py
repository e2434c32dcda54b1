"""
Per-epoch training sample assembly.

One epoch = one random crop per training case, expanded into its
full-context triplets, augmented, shuffled. Every random draw comes from
sample_rng(seed, epoch, case, ...) so an epoch is a pure function of its
inputs and does not depend on worker scheduling.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import Dataset

from app.config import TrainConfig
from app.data.ingest import (
    boxes_to_onehot,
    augment,
    crop_centers,
    crop_subvolume,
    normalize_hu,
    render_box_pyramid,
    triplets_from_array,
)
from app.data.model import (
    NUM_CLASSES,
    BoxSet,
    CtVolume,
    PseudoSample,
    SegMask,
    StrongSample,
    WeakSample,
)
from app.utils.seed import sample_rng

log = logging.getLogger("mixseg")

# rng key reserved for the epoch-level shuffle
_SHUFFLE_KEY = 1_000_003


@dataclass(frozen=True)
class TrainCase:
    volume: CtVolume
    boxes: BoxSet
    mask: Optional[SegMask] = None
    soft_label: Optional[np.ndarray] = None   # float32 [3, D, H, W]

    @property
    def case_id(self) -> str:
        return self.volume.case_id

    @property
    def kind(self) -> str:
        if self.mask is not None:
            return "strong"
        return "pseudo" if self.soft_label is not None else "weak"


def one_hot(labels: np.ndarray) -> np.ndarray:
    """[H, W] class map -> float32 [3, H, W]"""
    return np.eye(NUM_CLASSES, dtype=np.float32)[np.asarray(labels, dtype=np.int64)].transpose(2, 0, 1).copy()


def harden(soft: np.ndarray) -> np.ndarray:
    return one_hot(np.argmax(soft, axis=0))


# =========================================================
# SAMPLE VIEWS (whole volume, no crop)
# =========================================================

def strong_samples(case: TrainCase) -> List[StrongSample]:
    trips = triplets_from_array(normalize_hu(case.volume.voxels))
    return [StrongSample(t, case.mask.labels[t.center_index], case.boxes.for_slice(t.center_index)) for t in trips]


def weak_samples(case: TrainCase) -> List[WeakSample]:
    trips = triplets_from_array(normalize_hu(case.volume.voxels))
    return [WeakSample(t, case.boxes.for_slice(t.center_index)) for t in trips]


def pseudo_samples(case: TrainCase) -> List[PseudoSample]:
    trips = triplets_from_array(normalize_hu(case.volume.voxels))
    return [PseudoSample(t, case.soft_label[:, t.center_index], case.boxes.for_slice(t.center_index))
            for t in trips]


# =========================================================
# EPOCH ASSEMBLY
# =========================================================

def _case_examples(case: TrainCase, cfg: TrainConfig, epoch: int, case_key: int,
                   pseudo_mode: str) -> List[Dict[str, object]]:
    if case.kind == "weak":
        raise ValueError(f"{case.case_id}: weak case has no label to train on")
    rng = sample_rng(cfg.seed, epoch, case_key)
    crop = crop_subvolume(case.volume, case.mask, case.boxes, cfg.crop, rng, case.soft_label)
    arr = normalize_hu(crop.volume.voxels)
    examples = []
    for k, trip in enumerate(triplets_from_array(arr, crop_centers(arr.shape[0]))):
        z = trip.center_index
        label = crop.mask.labels[z] if crop.mask is not None else crop.soft_label[:, z]
        aug_rng = sample_rng(cfg.seed, epoch, case_key, k)
        image, label, boxes = augment(trip, label, crop.boxes.for_slice(z), aug_rng, cfg.augment)
        if label.ndim == 2:
            target = one_hot(label)
        else:
            target = harden(label) if pseudo_mode == "hard" else label
        examples.append({
            "case_id": case.case_id,
            "strong": crop.mask is not None,
            "image": image.channels,
            "target": target.astype(np.float32, copy=False),
            "boxes": boxes,
        })
    return examples


def _mixture_order(n_strong: int, n_pseudo: int, balance: bool, rng: np.random.Generator) -> List[int]:
    """Case indices for one epoch; balanced mode oversamples the smaller part to 1:1."""
    order = list(range(n_strong + n_pseudo))
    if balance and n_strong and n_pseudo and n_strong != n_pseudo:
        if n_strong < n_pseudo:
            small, gap = list(range(n_strong)), n_pseudo - n_strong
        else:
            small, gap = list(range(n_strong, n_strong + n_pseudo)), n_strong - n_pseudo
        order += rng.choice(small, size=gap, replace=True).tolist()
    return order


def build_epoch(
    cases: Sequence[TrainCase],
    cfg: TrainConfig,
    epoch: int,
    n_strong: Optional[int] = None,
) -> List[Dict[str, object]]:
    """
    All examples of one epoch, shuffled. cases are strong first; n_strong
    marks the boundary for mixture balancing.
    """
    if not cases:
        raise ValueError("no training cases")
    n_strong = len(cases) if n_strong is None else n_strong
    order_rng = sample_rng(cfg.seed, epoch, _SHUFFLE_KEY)
    order = _mixture_order(n_strong, len(cases) - n_strong, cfg.balance_mixture, order_rng)
    examples: List[Dict[str, object]] = []
    repeats: Dict[int, int] = {}
    for idx in order:
        rep = repeats.get(idx, 0)
        repeats[idx] = rep + 1
        # repeated draws of the same case get their own rng stream
        case_key = idx + rep * len(cases)
        examples.extend(_case_examples(cases[idx], cfg, epoch, case_key, cfg.pseudo_mode))
    perm = order_rng.permutation(len(examples))
    return [examples[i] for i in perm]


class EpochDataset(Dataset):
    """Tensors for one epoch; box targets depend on the trainee role."""

    def __init__(self, examples: List[Dict[str, object]], role: str, scales: int):
        self.examples = examples
        self.role = role
        self.scales = scales

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> Dict[str, object]:
        ex = self.examples[i]
        image = np.asarray(ex["image"], dtype=np.float32)
        hw: Tuple[int, int] = image.shape[1:]
        item: Dict[str, object] = {
            "image": torch.from_numpy(np.array(image)),
            "target": torch.from_numpy(np.array(ex["target"], dtype=np.float32)),
            "strong": torch.tensor(bool(ex["strong"])),
        }
        if self.role == "teacher":
            pyr = render_box_pyramid(ex["boxes"], hw, self.scales)
            item["organ"] = [torch.from_numpy(m[None].copy()) for m in pyr.organ]
            item["lesion"] = [torch.from_numpy(m[None].copy()) for m in pyr.lesion]
        else:
            item["loc_target"] = torch.from_numpy(boxes_to_onehot(ex["boxes"], hw).class_map.astype(np.int64))
        return item
