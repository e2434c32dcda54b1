"""
Five-stage pipeline: split -> teacher -> annotate -> student -> evaluate.

Every stage records a hash in the run manifest; a rerun with the same
config skips stages whose hash and artifacts are already in place.
"""
import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from app.config import ExperimentConfig, config_hash
from app.data.ingest import perturb_boxes, truncate_hu
from app.data.model import BoxSet, SegMask, split_dataset
from app.data.samples import TrainCase
from app.data.store import (
    list_cases,
    load_json,
    read_case,
    read_provenance,
    read_soft_label,
    save_json,
    write_prediction,
)
from app.errors import ConfigError, DivergenceError, MixsegError, StageError
from app.eval.metrics import MetricsReport, evaluate_cases
from app.eval.postprocess import postprocess, sweep_infer
from app.nets.checkpoint import load_model, read_manifest, save_checkpoint
from app.pipeline.manifest import RunManifest, run_lock, stage_hash
from app.train.loop import write_trace
from app.train.student import train_student
from app.train.teacher import generate_pseudo_labels, train_teacher
from app.utils.text import _mask_key, sha256_file
from app.utils.time import Stopwatch, utc_now_iso
from app.utils.seed import sample_rng

log = logging.getLogger("mixseg")

STAGES = ("split", "teacher", "annotate", "student", "evaluate")

SPLIT_FILE = "split.json"
TEACHER_CKPT = "teacher/teacher.ckpt"
TEACHER_TRACE = "teacher/trace.csv"
PSEUDO_DIR = "pseudo"
STUDENT_CKPT = "student/student.ckpt"
STUDENT_TRACE = "student/trace.csv"
EVAL_DIR = "eval"

# rng key for box perturbation streams
_PERTURB_KEY = 7_000_001


# =========================================================
# CASE LOADING
# =========================================================

def _boxes_for_run(cfg: ExperimentConfig, boxes: BoxSet, case_index: int, hw: Tuple[int, int]) -> BoxSet:
    if not cfg.perturb.enabled:
        return boxes
    rng = sample_rng(cfg.seed, _PERTURB_KEY, case_index)
    return perturb_boxes(boxes, rng, hw, cfg.perturb)


def load_train_cases(cfg: ExperimentConfig, case_ids: Sequence[str], all_ids: Sequence[str],
                     with_mask: bool) -> List[TrainCase]:
    """Truncated volumes + (possibly perturbed) boxes; masks only when with_mask."""
    index = {cid: i for i, cid in enumerate(all_ids)}
    out = []
    for cid in case_ids:
        rec = read_case(cfg.dataset_root, cid, with_mask=with_mask)
        if with_mask and rec.mask is None:
            raise ValueError(f"{cid}: case needs a dense mask but has none")
        vol = truncate_hu(rec.volume)
        boxes = _boxes_for_run(cfg, rec.boxes, index[cid], vol.shape[1:])
        out.append(TrainCase(vol, boxes, rec.mask if with_mask else None))
    return out


def load_val_cases(cfg: ExperimentConfig, case_ids: Sequence[str]) -> List[TrainCase]:
    """Validation cases keep their exact boxes and masks."""
    out = []
    for cid in case_ids:
        rec = read_case(cfg.dataset_root, cid, with_mask=True)
        if rec.mask is None:
            raise ValueError(f"validation case {cid} has no mask")
        out.append(TrainCase(truncate_hu(rec.volume), rec.boxes, rec.mask))
    return out


# =========================================================
# STAGES
# =========================================================

class PipelineRun:
    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.hash = config_hash(cfg)
        self.manifest: Optional[RunManifest] = None
        self.split: Dict[str, List[str]] = {}
        self.all_ids: List[str] = []

    def _stage(self, name: str, fn: Callable[[], None]) -> None:
        watch = Stopwatch()
        try:
            fn()
        except (ConfigError, StageError):
            raise
        except DivergenceError as e:
            raise StageError(name, f"training diverged: {e}") from e
        except (MixsegError, ValueError, OSError, RuntimeError, KeyError) as e:
            raise StageError(name, f"{type(e).__name__}: {e}") from e
        log.info(f"[{name.upper()}] stage finished in {watch}")

    # ----- split -----
    def stage_split(self) -> None:
        cfg = self.cfg
        self.all_ids = list_cases(cfg.dataset_root)
        if not self.all_ids:
            raise ValueError(f"no cases under {cfg.dataset_root}")
        h = stage_hash("split", self.hash, *self.all_ids)
        if self.manifest.stage_done("split", h):
            self.split = load_json(self.out / SPLIT_FILE)
            log.info("[RESUME] split up to date, skipping")
            return
        strong, weak, val = split_dataset(self.all_ids, cfg.ratio, cfg.seed)
        self.split = {"strong": strong, "weak": weak, "val": val}
        save_json(self.out / SPLIT_FILE, {**self.split, "ratio": list(cfg.ratio), "seed": cfg.seed})
        self.manifest.mark("split", h, {"split": SPLIT_FILE})

    # ----- teacher -----
    def _teacher_needed(self) -> bool:
        return bool(self.split["weak"])

    def stage_teacher(self) -> None:
        if not self._teacher_needed():
            log.info("[TEACHER] no weak share in this ratio, teacher not needed")
            return
        h = stage_hash("teacher", self.hash, self.manifest.stage("split")["hash"])
        if self.manifest.stage_done("teacher", h):
            log.info("[RESUME] teacher up to date, skipping")
            return
        cfg = self.cfg
        strong = load_train_cases(cfg, self.split["strong"], self.all_ids, with_mask=True)
        val = load_val_cases(cfg, self.split["val"])
        result = train_teacher(strong, cfg.teacher, val)
        save_checkpoint(self.out / TEACHER_CKPT, result.model, cfg.teacher, result.best_epoch, self.hash)
        write_trace(result.trace, self.out / TEACHER_TRACE)
        self.manifest.mark("teacher", h, {"checkpoint": TEACHER_CKPT, "trace": TEACHER_TRACE},
                           best_epoch=result.best_epoch, best_score=result.best_score)

    # ----- annotate -----
    def stage_annotate(self) -> None:
        if not self._teacher_needed():
            log.info("[ANNOTATE] no weak cases, nothing to annotate")
            return
        h = stage_hash("annotate", self.hash, self.manifest.stage("teacher")["hash"])
        if self.manifest.stage_done("annotate", h):
            log.info("[RESUME] pseudo labels up to date, skipping")
            return
        cfg = self.cfg
        ckpt = self.out / TEACHER_CKPT
        teacher, manifest = load_model(ckpt)
        if manifest.get("config_hash") != self.hash:
            raise ConfigError(f"{ckpt} was produced by config {_mask_key(manifest.get('config_hash', ''))}")
        weak = load_train_cases(cfg, self.split["weak"], self.all_ids, with_mask=False)
        provenance = {"teacher_sha256": sha256_file(ckpt), "config_hash": self.hash, "created_at": utc_now_iso()}
        generate_pseudo_labels(teacher, weak, self.out / PSEUDO_DIR, provenance)
        self.manifest.mark("annotate", h, {"pseudo": PSEUDO_DIR}, cases=len(weak))

    def _pseudo_cases(self) -> List[TrainCase]:
        weak = load_train_cases(self.cfg, self.split["weak"], self.all_ids, with_mask=False)
        out = []
        for case in weak:
            d = self.out / PSEUDO_DIR / case.case_id
            if read_provenance(d).get("config_hash") != self.hash:
                raise ConfigError(f"{d}: pseudo label belongs to another config")
            soft = read_soft_label(d)
            if soft.shape[1:] != case.volume.shape:
                raise ValueError(f"{case.case_id}: pseudo label {soft.shape} vs volume {case.volume.shape}")
            out.append(TrainCase(case.volume, case.boxes, None, soft))
        return out

    # ----- student -----
    def stage_student(self) -> None:
        upstream = self.manifest.stage("annotate")["hash"] if self._teacher_needed() else ""
        h = stage_hash("student", self.hash, self.manifest.stage("split")["hash"], upstream)
        if self.manifest.stage_done("student", h):
            log.info("[RESUME] student up to date, skipping")
            return
        cfg = self.cfg
        strong = load_train_cases(cfg, self.split["strong"], self.all_ids, with_mask=True)
        pseudo = self._pseudo_cases() if self._teacher_needed() else []
        val = load_val_cases(cfg, self.split["val"])
        result = train_student(strong, pseudo, cfg.student, val)
        save_checkpoint(self.out / STUDENT_CKPT, result.model, cfg.student, result.best_epoch, self.hash)
        write_trace(result.trace, self.out / STUDENT_TRACE)
        self.manifest.mark("student", h, {"checkpoint": STUDENT_CKPT, "trace": STUDENT_TRACE},
                           best_epoch=result.best_epoch, best_score=result.best_score)

    # ----- evaluate -----
    def stage_evaluate(self) -> MetricsReport:
        h = stage_hash("evaluate", self.hash, self.manifest.stage("student")["hash"])
        report_path = self.out / EVAL_DIR / "report.json"
        if self.manifest.stage_done("evaluate", h) and report_path.exists():
            log.info("[RESUME] evaluation up to date, loading report")
            return MetricsReport.from_json(load_json(report_path))
        ckpt = self.out / STUDENT_CKPT
        if read_manifest(ckpt).get("config_hash") != self.hash:
            raise ConfigError(f"{ckpt} was produced by another config")
        report = evaluate_checkpoint(ckpt, self.cfg, self.split["val"], self.out / EVAL_DIR)
        self.manifest.mark("evaluate", h, {"report": f"{EVAL_DIR}/report.json"})
        return report

    def run(self, until: str = "evaluate") -> Optional[MetricsReport]:
        """Runs stages in order up to and including `until`; earlier stages resume from the manifest."""
        if until not in STAGES:
            raise ValueError(f"unknown stage {until!r}, expected one of {STAGES}")
        cfg = self.cfg
        log.info(
            f"[SPLIT] run {self.out} config={_mask_key(self.hash)} seed={cfg.seed} ratio={cfg.ratio} "
            f"perturb={cfg.perturb.enabled} until={until}"
        )
        steps = {
            "split": self.stage_split,
            "teacher": self.stage_teacher,
            "annotate": self.stage_annotate,
            "student": self.stage_student,
        }
        report: List[MetricsReport] = []
        watch = Stopwatch()
        with run_lock(self.out):
            self.manifest = RunManifest.open(self.out, self.hash, cfg.seed)
            for name in STAGES[:STAGES.index(until) + 1]:
                if name == "evaluate":
                    self._stage(name, lambda: report.append(self.stage_evaluate()))
                else:
                    self._stage(name, steps[name])
        log.info(f"[{until.upper()}] pipeline finished in {watch}")
        return report[0] if report else None


def evaluate_checkpoint(ckpt: Path, cfg: ExperimentConfig, case_ids: Sequence[str], out_dir: Path) -> MetricsReport:
    """Sweep + postprocess every case, write predictions and the report."""
    model, _ = load_model(ckpt)
    pairs: List[Tuple[SegMask, SegMask]] = []
    for cid in case_ids:
        rec = read_case(cfg.dataset_root, cid, with_mask=True)
        if rec.mask is None:
            raise ValueError(f"{cid}: evaluation needs a ground-truth mask")
        pred = postprocess(sweep_infer(truncate_hu(rec.volume), model))
        write_prediction(Path(out_dir) / "preds" / cid, pred)
        pairs.append((pred, rec.mask))
    report = evaluate_cases(pairs)
    report.write(out_dir)
    return report


def cmd_run_pipeline(cfg: ExperimentConfig) -> MetricsReport:
    return PipelineRun(cfg).run()


def read_split(out_dir: Path) -> Dict[str, List[str]]:
    return load_json(Path(out_dir) / SPLIT_FILE)
