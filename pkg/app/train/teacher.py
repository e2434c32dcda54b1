import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from app.config import DEVICE, TrainConfig
from app.data.ingest import render_box_pyramid
from app.data.model import BoxSet, CtVolume
from app.data.samples import TrainCase
from app.data.store import write_soft_label
from app.eval.metrics import aggregate_dice
from app.eval.postprocess import Predictor, sweep_infer, sweep_logits
from app.nets.teacher import TeacherNet, stack_pyramids
from app.train.loop import TrainResult, fit
from app.train.losses import LossParts, cross_entropy

log = logging.getLogger("mixseg")


def teacher_step(model: TeacherNet, batch: Dict[str, Any]) -> LossParts:
    logits = model(batch["image"], batch["organ"], batch["lesion"])
    l_seg = cross_entropy(logits, batch["target"])
    return LossParts(l_seg, torch.zeros_like(l_seg), l_seg)


def teacher_predictor(model: TeacherNet, boxes: BoxSet) -> Predictor:
    """Predictor that renders each slice's boxes at the (padded) input size."""
    model.eval()
    scales = model.cfg.scales

    def predict(x: torch.Tensor, centers: Sequence[int]) -> torch.Tensor:
        hw = tuple(x.shape[-2:])
        pyramids = [render_box_pyramid(boxes.for_slice(c), hw, scales) for c in centers]
        organ, lesion = stack_pyramids(pyramids, device=x.device, dtype=x.dtype)
        return model(x, organ, lesion)

    return predict


def validate_teacher(val: Sequence[TrainCase], device: str = DEVICE):
    def run(model: TeacherNet) -> Tuple[float, float]:
        pairs = [(sweep_infer(c.volume, teacher_predictor(model, c.boxes), device=device), c.mask) for c in val]
        return aggregate_dice(pairs, "liver")[0], aggregate_dice(pairs, "lesion")[0]
    return run


def train_teacher(
    strong: Sequence[TrainCase],
    cfg: TrainConfig,
    val: Sequence[TrainCase] = (),
    device: str = DEVICE,
) -> TrainResult:
    if cfg.role != "teacher":
        raise ValueError(f"train_teacher needs a teacher config, got role {cfg.role!r}")
    if not strong:
        raise ValueError("train_teacher: empty strong set")
    log.info(
        f"[TEACHER] training on {len(strong)} strong case(s), attention={cfg.attention.value}, "
        f"epochs={cfg.epochs}, lr0={cfg.lr0}, crop={cfg.crop}"
    )
    model = TeacherNet(cfg.net, cfg.attention, seed=cfg.seed)
    validate = validate_teacher(val, device) if val else None
    return fit(model, cfg, list(strong), teacher_step, validate, tag="TEACHER", device=device)


# =========================================================
# PSEUDO LABELS
# =========================================================

def annotate_case(model: TeacherNet, volume: CtVolume, boxes: BoxSet, device: str = DEVICE) -> np.ndarray:
    """Teacher softmax over the whole volume: float32 [3, D, H, W]."""
    logits = sweep_logits(volume, teacher_predictor(model, boxes), device=device)
    return torch.softmax(torch.from_numpy(logits), dim=0).numpy().astype(np.float32)


def generate_pseudo_labels(
    model: TeacherNet,
    weak: Sequence[TrainCase],
    out_dir: Optional[Union[str, Path]] = None,
    provenance: Optional[Dict[str, Any]] = None,
    device: str = DEVICE,
) -> List[TrainCase]:
    """
    Weak cases in, pseudo cases out (same boxes, soft label attached).
    With out_dir, each label is also written to <out_dir>/<case_id>/.
    """
    out: List[TrainCase] = []
    for case in weak:
        soft = annotate_case(model, case.volume, case.boxes, device=device)
        if out_dir is not None:
            write_soft_label(Path(out_dir) / case.case_id, soft, {"case_id": case.case_id, **(provenance or {})})
        out.append(TrainCase(case.volume, case.boxes, None, soft))
    log.info(f"[ANNOTATE] {len(out)} weak case(s) pseudo-labeled" + (f" -> {out_dir}" if out_dir else ""))
    return out
