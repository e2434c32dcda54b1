import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from app.data.model import LESION, ORGAN, SegMask
from app.data.store import save_json

log = logging.getLogger("mixseg")

ClassName = Literal["liver", "lesion"]


def class_region(labels: np.ndarray, cls: ClassName) -> np.ndarray:
    """liver = union of organ and lesion labels; lesion = label 2."""
    labels = np.asarray(labels)
    if cls == "liver":
        return labels >= ORGAN
    if cls == "lesion":
        return labels == LESION
    raise ValueError(f"unknown class {cls!r} (use 'liver' or 'lesion')")


def _counts(x: np.ndarray, y: np.ndarray) -> Tuple[int, int]:
    x, y = np.asarray(x, dtype=bool), np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ValueError(f"dice: shape mismatch {x.shape} vs {y.shape}")
    return int(np.count_nonzero(x & y)), int(np.count_nonzero(x)) + int(np.count_nonzero(y))


def dice(x: np.ndarray, y: np.ndarray) -> float:
    """2|X & Y| / (|X| + |Y|); both empty counts as 1."""
    inter, total = _counts(x, y)
    return 1.0 if total == 0 else 2.0 * inter / total


def aggregate_dice(cases: Sequence[Tuple[SegMask, SegMask]], cls: ClassName) -> Tuple[float, float]:
    """(dice_global over pooled counts, dice_per_case mean of per-volume scores)"""
    if not cases:
        raise ValueError("aggregate_dice: empty case list")
    inter_sum = total_sum = 0
    per_case = []
    for pred, gt in cases:
        inter, total = _counts(class_region(pred.labels, cls), class_region(gt.labels, cls))
        inter_sum += inter
        total_sum += total
        per_case.append(1.0 if total == 0 else 2.0 * inter / total)
    dice_global = 1.0 if total_sum == 0 else 2.0 * inter_sum / total_sum
    return dice_global, float(np.mean(per_case))


def tumor_burden(labels: np.ndarray) -> float:
    liver = int(np.count_nonzero(class_region(labels, "liver")))
    if liver == 0:
        return 0.0
    return int(np.count_nonzero(class_region(labels, "lesion"))) / liver


def tumor_burden_rmse(cases: Sequence[Tuple[SegMask, SegMask]]) -> float:
    sq = []
    for pred, gt in cases:
        if not class_region(gt.labels, "liver").any():
            log.warning(f"[EVAL] {gt.case_id}: empty ground-truth liver, excluded from tumor burden")
            continue
        sq.append((tumor_burden(pred.labels) - tumor_burden(gt.labels)) ** 2)
    if not sq:
        log.warning("[EVAL] no case with a ground-truth liver; tumor burden RMSE undefined")
        return float("nan")
    return math.sqrt(float(np.mean(sq)))


# =========================================================
# REPORT
# =========================================================

@dataclass
class MetricsReport:
    dice_global_liver: float
    dice_per_case_liver: float
    dice_global_lesion: float
    dice_per_case_lesion: float
    tumor_burden_rmse: float
    per_case: List[Dict[str, object]] = field(default_factory=list)

    def summary(self) -> Dict[str, float]:
        d = asdict(self)
        d.pop("per_case")
        return d

    def to_json(self) -> Dict[str, object]:
        return {**self.summary(), "per_case": self.per_case}

    @classmethod
    def from_json(cls, data: Dict[str, object]) -> "MetricsReport":
        return cls(**data)

    def per_case_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.per_case, columns=["case_id", "dice_liver", "dice_lesion",
                                                    "burden_pred", "burden_gt"])

    def table(self) -> str:
        s = self.summary()
        head = pd.DataFrame(
            {"liver": [s["dice_global_liver"], s["dice_per_case_liver"]],
             "lesion": [s["dice_global_lesion"], s["dice_per_case_lesion"]]},
            index=["dice_global", "dice_per_case"],
        )
        lines = [head.to_string(float_format=lambda v: f"{v:.4f}"),
                 f"tumor_burden_rmse  {self.tumor_burden_rmse:.4f}",
                 "",
                 self.per_case_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}")]
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_json(out_dir / "report.json", self.to_json())
        (out_dir / "report.txt").write_text(self.table(), encoding="utf-8")
        self.per_case_frame().to_csv(out_dir / "per_case.csv", index=False)
        return out_dir


def evaluate_cases(cases: Sequence[Tuple[SegMask, SegMask]]) -> MetricsReport:
    """cases: (prediction, ground truth) pairs sharing case ids."""
    g_liv, pc_liv = aggregate_dice(cases, "liver")
    g_les, pc_les = aggregate_dice(cases, "lesion")
    rows = []
    for pred, gt in cases:
        rows.append({
            "case_id": gt.case_id,
            "dice_liver": dice(class_region(pred.labels, "liver"), class_region(gt.labels, "liver")),
            "dice_lesion": dice(class_region(pred.labels, "lesion"), class_region(gt.labels, "lesion")),
            "burden_pred": tumor_burden(pred.labels),
            "burden_gt": tumor_burden(gt.labels),
        })
    report = MetricsReport(g_liv, pc_liv, g_les, pc_les, tumor_burden_rmse(cases), rows)
    log.info(
        f"[EVAL] {len(cases)} case(s): liver global={g_liv:.4f} per-case={pc_liv:.4f} | "
        f"lesion global={g_les:.4f} per-case={pc_les:.4f} | burden rmse={report.tumor_burden_rmse:.4f}"
    )
    return report
