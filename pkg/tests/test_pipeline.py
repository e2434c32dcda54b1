import json
import zipfile
from pathlib import Path

import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from app.config import ExperimentConfig, config_hash
from app.data.store import list_cases, read_case
from app.errors import ConfigError, StageError
from app.main import cli, main
from app.nets.checkpoint import build_model, save_checkpoint
from app.nets.teacher import TeacherNet
from app.pipeline.manifest import LOCK_FILE, MANIFEST_FILE, RunManifest, run_lock, stage_hash
from app.pipeline.runner import (
    EVAL_DIR,
    PSEUDO_DIR,
    SPLIT_FILE,
    STUDENT_CKPT,
    TEACHER_CKPT,
    PipelineRun,
    load_train_cases,
    read_split,
)
from app.pipeline.studies import METRIC_COLUMNS, cmd_perturb_study, cmd_sweep_ratio, ratio_dir_name


def _params(ckpt: Path) -> dict:
    with zipfile.ZipFile(ckpt) as zf:
        return {n: zf.read(n) for n in zf.namelist() if n.startswith("params/")}


# =========================================================
# MANIFEST
# =========================================================

def test_stage_hash_depends_on_every_input():
    h = stage_hash("teacher", "cfg", "up")
    assert h == stage_hash("teacher", "cfg", "up")
    assert len({h, stage_hash("student", "cfg", "up"), stage_hash("teacher", "cfg2", "up"),
                stage_hash("teacher", "cfg", "up2")}) == 4


def test_manifest_marks_and_resumes(tmp_path: Path, mixseg_logs):
    m = RunManifest.open(tmp_path, "abc", seed=1)
    assert (tmp_path / MANIFEST_FILE).exists()
    assert not m.stage_done("split", "h1")

    (tmp_path / "split.json").write_text("{}")
    m.mark("split", "h1", {"split": "split.json"}, cases=3)
    again = RunManifest.open(tmp_path, "abc", seed=1)
    assert again.stage_done("split", "h1")
    assert not again.stage_done("split", "other")
    assert again.stage("split")["cases"] == 3

    (tmp_path / "split.json").unlink()
    assert not again.stage_done("split", "h1")
    assert "recorded artifact(s) missing" in mixseg_logs.text


def test_manifest_refuses_another_config(tmp_path: Path):
    RunManifest.open(tmp_path, "abc", seed=0)
    with pytest.raises(ConfigError, match="another --out"):
        RunManifest.open(tmp_path, "xyz", seed=0)

    (tmp_path / MANIFEST_FILE).write_text(json.dumps([1, 2]))
    with pytest.raises(ConfigError, match="not a run manifest"):
        RunManifest.open(tmp_path, "abc", seed=0)


def test_run_lock_is_exclusive(tmp_path: Path):
    with run_lock(tmp_path) as path:
        assert path.exists()
        with pytest.raises(StageError, match="locked"):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / LOCK_FILE).exists()


# =========================================================
# PIPELINE
# =========================================================

def test_full_run_writes_artifacts_and_resumes(tiny_experiment: ExperimentConfig, mixseg_logs):
    out = Path(tiny_experiment.out_dir)
    report = PipelineRun(tiny_experiment).run()
    for rel in (SPLIT_FILE, TEACHER_CKPT, "teacher/trace.csv", STUDENT_CKPT, "student/trace.csv",
                f"{EVAL_DIR}/report.json", f"{EVAL_DIR}/report.txt", f"{EVAL_DIR}/per_case.csv"):
        assert (out / rel).exists(), rel

    split = read_split(out)
    assert (len(split["strong"]), len(split["weak"]), len(split["val"])) == (3, 6, 1)
    assert sorted(p.name for p in (out / PSEUDO_DIR).iterdir()) == sorted(split["weak"])
    for cid in split["val"]:
        assert (out / EVAL_DIR / "preds" / cid).is_dir()
    assert 0.0 <= report.dice_global_liver <= 1.0

    manifest = json.loads((out / MANIFEST_FILE).read_text())
    assert manifest["config_hash"] == config_hash(tiny_experiment)
    assert all(manifest["stages"][s]["ok"] for s in ("split", "teacher", "annotate", "student", "evaluate"))

    mixseg_logs.clear()
    again = PipelineRun(tiny_experiment).run()
    assert again == report
    for stage in ("split", "teacher", "pseudo labels", "student"):
        assert f"[RESUME] {stage} up to date, skipping" in mixseg_logs.text
    assert not (out / LOCK_FILE).exists()


def test_changed_config_in_same_out_dir_is_refused(tiny_experiment: ExperimentConfig):
    PipelineRun(tiny_experiment).run(until="split")
    with pytest.raises(ConfigError):
        PipelineRun(tiny_experiment.with_seed(1)).run(until="split")


def test_no_weak_share_skips_the_teacher(tiny_experiment: ExperimentConfig, tmp_path: Path, mixseg_logs):
    cfg = tiny_experiment.with_ratio((90, 0, 10), tmp_path / "r90")
    report = PipelineRun(cfg).run()
    assert report is not None
    assert not (tmp_path / "r90" / "teacher").exists()
    assert not (tmp_path / "r90" / PSEUDO_DIR).exists()
    assert "teacher not needed" in mixseg_logs.text


def test_pipeline_is_deterministic_across_out_dirs(tiny_experiment: ExperimentConfig, tmp_path: Path):
    a = tiny_experiment.model_copy(update={"out_dir": tmp_path / "a"})
    b = tiny_experiment.model_copy(update={"out_dir": tmp_path / "b"})
    PipelineRun(a).run(until="student")
    PipelineRun(b).run(until="student")
    assert read_split(tmp_path / "a") == read_split(tmp_path / "b")
    pa, pb = _params(tmp_path / "a" / STUDENT_CKPT), _params(tmp_path / "b" / STUDENT_CKPT)
    assert pa.keys() == pb.keys() and pa
    assert all(pa[k] == pb[k] for k in pa)


def test_stage_failures_surface_as_stage_errors(tiny_experiment: ExperimentConfig, tmp_path: Path):
    cfg = tiny_experiment.model_copy(update={"dataset_root": tmp_path / "empty", "out_dir": tmp_path / "x"})
    (tmp_path / "empty").mkdir()
    with pytest.raises(StageError, match=r"\[SPLIT\]"):
        PipelineRun(cfg).run(until="split")
    with pytest.raises(ValueError, match="unknown stage"):
        PipelineRun(cfg).run(until="deploy")


def test_perturbation_moves_boxes_not_masks(tiny_experiment: ExperimentConfig):
    ids = list_cases(tiny_experiment.dataset_root)
    on = tiny_experiment.model_copy(update={"perturb": tiny_experiment.perturb.model_copy(update={"enabled": True})})
    exact = load_train_cases(tiny_experiment, ids, ids, with_mask=True)
    moved = load_train_cases(on, ids, ids, with_mask=True)
    assert any(e.boxes.boxes != m.boxes.boxes for e, m in zip(exact, moved))
    for e, m in zip(exact, moved):
        assert (e.mask.labels == m.mask.labels).all()
        assert len(e.boxes) == len(m.boxes)
    # same stream on every load
    again = load_train_cases(on, ids, ids, with_mask=True)
    assert [c.boxes.boxes for c in again] == [c.boxes.boxes for c in moved]


# =========================================================
# STUDIES
# =========================================================

def test_ratio_sweep_records_failures(tiny_experiment: ExperimentConfig, mixseg_logs):
    cfg = tiny_experiment.model_copy(update={
        "teacher": tiny_experiment.teacher.model_copy(update={"epochs": 1}),
        "student": tiny_experiment.student.model_copy(update={"epochs": 1}),
    })
    curve = cmd_sweep_ratio(cfg, [(0, 90, 10), (30, 60, 10)])
    out = Path(cfg.out_dir)
    assert curve["status"].tolist()[1] == "ok"
    assert curve["status"].tolist()[0].startswith("failed")
    assert curve[METRIC_COLUMNS].iloc[0].isna().all()
    for name in ("curve.csv", "curve.json", "dice_vs_ratio.png"):
        assert (out / name).exists()
    assert (out / ratio_dir_name((30, 60, 10)) / STUDENT_CKPT).exists()
    assert len(pd.read_csv(out / "curve.csv")) == 2
    assert "[SWEEP] ratio (0, 90, 10) failed" in mixseg_logs.text


def test_ratio_sweep_needs_one_validation_set(tiny_experiment: ExperimentConfig):
    cfg = tiny_experiment.model_copy(update={
        "teacher": tiny_experiment.teacher.model_copy(update={"epochs": 1}),
        "student": tiny_experiment.student.model_copy(update={"epochs": 1}),
    })
    with pytest.raises(StageError, match=r"\[SWEEP\] validation ids differ"):
        cmd_sweep_ratio(cfg, [(30, 60, 10), (30, 50, 20)])
    curve = pd.read_csv(Path(cfg.out_dir) / "curve.csv")
    assert curve["status"].tolist() == ["ok", "ok"]


def test_perturb_study_outputs(tiny_experiment: ExperimentConfig):
    cfg = tiny_experiment.model_copy(update={
        "teacher": tiny_experiment.teacher.model_copy(update={"epochs": 1}),
        "student": tiny_experiment.student.model_copy(update={"epochs": 1}),
    })
    before = {cid: read_case(cfg.dataset_root, cid).mask.labels.copy() for cid in list_cases(cfg.dataset_root)}
    result = cmd_perturb_study(cfg)
    out = Path(cfg.out_dir)
    assert set(result) == set(METRIC_COLUMNS)
    for v in result.values():
        assert v["delta"] == pytest.approx(v["perturbed"] - v["baseline"], nan_ok=True)
    for name in ("perturb.json", "perturb.csv", "perturb_deltas.png"):
        assert (out / name).exists()
    assert read_split(out / "baseline") == read_split(out / "perturbed")
    for cid, labels in before.items():
        assert (read_case(cfg.dataset_root, cid).mask.labels == labels).all()


# =========================================================
# CLI
# =========================================================

def _write_config(tmp_path: Path, cfg: ExperimentConfig, epochs: int = 1) -> Path:
    data = cfg.model_dump(mode="json")
    data["teacher"]["epochs"] = epochs
    data["student"]["epochs"] = epochs
    data["student"]["decay_start"] = 1
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_cli_exit_codes(tiny_experiment: ExperimentConfig, tmp_path: Path):
    assert main(["--config", str(tmp_path / "missing.yaml"), "split"]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["split", "--bogus"]) == 2

    missing = _write_config(tmp_path, tiny_experiment.model_copy(update={"dataset_root": tmp_path / "gone"}))
    assert main(["--config", str(missing), "split"]) == 2
    assert main(["--config", str(missing), "run"]) == 2
    assert not (Path(tiny_experiment.out_dir) / MANIFEST_FILE).exists()

    path = _write_config(tmp_path, tiny_experiment)
    assert main(["--config", str(path), "run"]) == 0
    out = Path(tiny_experiment.out_dir)
    assert (out / EVAL_DIR / "report.json").exists()

    (out / LOCK_FILE).write_text("123")
    assert main(["--config", str(path), "split"]) == 3
    (out / LOCK_FILE).unlink()

    assert main(["--config", str(path), "--seed", "9", "split"]) == 2    # same out dir, other config


def test_cli_export(tmp_path: Path, make_teacher_cfg, make_student_cfg):
    t_cfg = make_teacher_cfg()
    teacher = save_checkpoint(tmp_path / "t.ckpt", TeacherNet(t_cfg.net), t_cfg, epoch=1)
    assert main(["export-checkpoint", str(teacher), str(tmp_path / "t_out.ckpt")]) == 3

    s_cfg = make_student_cfg()
    student = save_checkpoint(tmp_path / "s.ckpt", build_model(s_cfg), s_cfg, epoch=1)
    assert main(["export-checkpoint", str(student), str(tmp_path / "s_out.ckpt")]) == 0
    assert (tmp_path / "s_out.ckpt").exists()


def test_cli_phantom_gen(tmp_path: Path, phantom_cfg):
    path = tmp_path / "phantom.json"
    path.write_text(json.dumps({"phantom": phantom_cfg.model_dump(mode="json")}), encoding="utf-8")
    args = ["--config", str(path), "phantom-gen", "--cases", "2", "--root", str(tmp_path / "p")]
    result = CliRunner().invoke(cli, args)
    assert result.exit_code == 0, result.output
    assert "2 phantom case(s)" in result.output
    assert list_cases(tmp_path / "p") == ["phantom_000", "phantom_001"]
