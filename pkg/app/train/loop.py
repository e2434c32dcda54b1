"""
Shared epoch loop for teacher and student training.
"""
import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
from torch.utils.data import DataLoader
from tqdm import tqdm

from app.config import DEVICE, NUM_WORKERS, SHOW_PROGRESS, TrainConfig
from app.data.samples import EpochDataset, TrainCase, build_epoch
from app.errors import DivergenceError
from app.train.losses import LossParts
from app.train.optim import lr_at, sgd_step, zero_velocity
from app.utils.seed import seed_everything

log = logging.getLogger("mixseg")

TRACE_COLUMNS = ["epoch", "lr", "L_seg", "L_loc", "L_s", "val_dice_liver", "val_dice_lesion"]

StepFn = Callable[[nn.Module, Dict[str, object]], LossParts]
ValidateFn = Callable[[nn.Module], Tuple[float, float]]


@dataclass
class TrainResult:
    model: nn.Module
    trace: pd.DataFrame
    best_epoch: int
    best_score: float   # mean of liver and lesion validation Dice; NaN without validation


def _to_device(batch: Dict[str, object], device: str) -> Dict[str, object]:
    out = {}
    for k, v in batch.items():
        if isinstance(v, torch.Tensor):
            out[k] = v.to(device)
        elif isinstance(v, list):
            out[k] = [t.to(device) for t in v]
        else:
            out[k] = v
    return out


def fit(
    model: nn.Module,
    cfg: TrainConfig,
    cases: Sequence[TrainCase],
    step: StepFn,
    validate: Optional[ValidateFn] = None,
    n_strong: Optional[int] = None,
    tag: str = "TRAIN",
    device: str = DEVICE,
) -> TrainResult:
    """
    SGD over per-epoch datasets; validation every cfg.val_every epochs and
    at the last epoch. Returns the model loaded with its best validated
    state (the last state when there is no validation).
    """
    seed_everything(cfg.seed)
    model.to(device)
    params: List[torch.Tensor] = list(model.parameters())
    velocity = zero_velocity(params)

    rows: List[Dict[str, float]] = []
    best_score, best_epoch, best_state = float("-inf"), 0, None

    bar = tqdm(range(1, cfg.epochs + 1), desc=tag.lower(), disable=not SHOW_PROGRESS, leave=False)
    for epoch in bar:
        lr = lr_at(epoch, cfg)
        ds = EpochDataset(build_epoch(cases, cfg, epoch, n_strong), cfg.role, cfg.net.scales)
        loader = DataLoader(ds, batch_size=cfg.batch_size, shuffle=False, num_workers=NUM_WORKERS)

        model.train()
        sums = np.zeros(3, dtype=np.float64)
        seen = 0
        for batch in loader:
            batch = _to_device(batch, device)
            for p in params:
                p.grad = None
            parts = step(model, batch)
            if not torch.isfinite(parts.l_s):
                raise DivergenceError(f"[{tag}] non-finite loss {parts.l_s.item()} at epoch {epoch}")
            parts.l_s.backward()
            try:
                sgd_step(params, [p.grad for p in params], velocity, lr, cfg.momentum)
            except DivergenceError as e:
                raise DivergenceError(f"[{tag}] epoch {epoch}: {e}") from e
            bs = int(batch["image"].shape[0])
            sums += bs * np.array([parts.l_seg.item(), parts.l_loc.item(), parts.l_s.item()])
            seen += bs

        mean = sums / max(seen, 1)
        row = {"epoch": epoch, "lr": lr, "L_seg": mean[0], "L_loc": mean[1], "L_s": mean[2],
               "val_dice_liver": float("nan"), "val_dice_lesion": float("nan")}

        if validate is not None and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            model.eval()
            d_liver, d_lesion = validate(model)
            row["val_dice_liver"], row["val_dice_lesion"] = d_liver, d_lesion
            score = (d_liver + d_lesion) / 2
            if score > best_score:
                best_score, best_epoch = score, epoch
                best_state = copy.deepcopy(model.state_dict())
            log.info(
                f"[{tag}] epoch {epoch}/{cfg.epochs} lr={lr:.3g} L_s={mean[2]:.4f} "
                f"val liver={d_liver:.4f} lesion={d_lesion:.4f}"
            )
        rows.append(row)
        bar.set_postfix(L_s=f"{mean[2]:.4f}")

    if best_state is None:
        best_epoch, best_score = cfg.epochs, float("nan")
    else:
        model.load_state_dict(best_state)
    model.eval()
    log.info(f"[{tag}] done: {cfg.epochs} epochs, best epoch {best_epoch} (score {best_score:.4f})")
    return TrainResult(model, pd.DataFrame(rows, columns=TRACE_COLUMNS), best_epoch, best_score)


def write_trace(trace: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_csv(path, index=False)
    return path
