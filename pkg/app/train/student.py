import logging
from typing import Any, Dict, Sequence, Tuple

from app.config import DEVICE, TrainConfig
from app.data.samples import TrainCase
from app.eval.metrics import aggregate_dice
from app.eval.postprocess import sweep_infer
from app.nets.student import StudentNet
from app.train.loop import TrainResult, fit
from app.train.losses import LossParts, student_loss

log = logging.getLogger("mixseg")


def student_step(cfg: TrainConfig):
    def step(model: StudentNet, batch: Dict[str, Any]) -> LossParts:
        out = model(batch["image"])
        return student_loss(out.seg_logits, out.loc_logits, batch["target"], batch["loc_target"], cfg)
    return step


def validate_student(val: Sequence[TrainCase], device: str = DEVICE):
    def run(model: StudentNet) -> Tuple[float, float]:
        pairs = [(sweep_infer(c.volume, model, device=device), c.mask) for c in val]
        return aggregate_dice(pairs, "liver")[0], aggregate_dice(pairs, "lesion")[0]
    return run


def train_student(
    strong: Sequence[TrainCase],
    pseudo: Sequence[TrainCase],
    cfg: TrainConfig,
    val: Sequence[TrainCase] = (),
    device: str = DEVICE,
) -> TrainResult:
    """Hard CE on strong cases, soft CE on pseudo cases, box-region CE on both."""
    if cfg.role != "student":
        raise ValueError(f"train_student needs a student config, got role {cfg.role!r}")
    if not strong and not pseudo:
        raise ValueError("train_student: empty mixture (no strong and no pseudo cases)")
    log.info(
        f"[STUDENT] training on {len(strong)} strong + {len(pseudo)} pseudo case(s), "
        f"loc_branch={cfg.loc_branch}, alpha={cfg.alpha}, balance={cfg.balance_mixture}, "
        f"pseudo_mode={cfg.pseudo_mode}, epochs={cfg.epochs}"
    )
    model = StudentNet(cfg.net, loc_branch=cfg.loc_branch, loc_channels=cfg.loc_channels, seed=cfg.seed)
    validate = validate_student(val, device) if val else None
    cases = list(strong) + list(pseudo)
    return fit(model, cfg, cases, student_step(cfg), validate, n_strong=len(strong), tag="STUDENT", device=device)
