#!/usr/bin/env python3
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import click

from app.config import (
    DATA_ROOT,
    DEVICE,
    LOG_LEVEL,
    NUM_WORKERS,
    SHOW_PROGRESS,
    ExperimentConfig,
    load_experiment_config,
    require_dataset_root,
)
from app.errors import EXIT_CONFIG, EXIT_OK, EXIT_STAGE, ConfigError, MixsegError, StageError

# =========================================================
# LOGGING
# =========================================================

logging.basicConfig(
    level=getattr(logging, LOG_LEVEL, logging.INFO),
    format="%(asctime)s %(levelname)s mixseg: %(message)s",
)
log = logging.getLogger("mixseg")


# =========================================================
# HELPERS
# =========================================================

def _cfg(ctx: click.Context, needs_data: bool = False) -> ExperimentConfig:
    obj = ctx.find_root().obj
    if "cfg" not in obj:
        obj["cfg"] = load_experiment_config(obj["config"], obj["desk_scale"], obj["seed"], obj["out"])
    return require_dataset_root(obj["cfg"]) if needs_data else obj["cfg"]


def _parse_ratio(text: str) -> Tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.replace(",", ":").split(":"))
    except ValueError:
        raise ConfigError(f"bad ratio {text!r}, expected S:W:V")
    if len(parts) != 3:
        raise ConfigError(f"bad ratio {text!r}, expected three parts S:W:V")
    return parts


def _run_until(ctx: click.Context, stage: str):
    from app.pipeline.runner import PipelineRun

    return PipelineRun(_cfg(ctx, needs_data=True)).run(until=stage)


# =========================================================
# CLI
# =========================================================

@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
              help="Experiment config (.yaml / .yml / .json).")
@click.option("--seed", type=int, default=None, help="Override the experiment seed.")
@click.option("--out", type=click.Path(path_type=Path), default=None, help="Output directory for this run.")
@click.option("--desk-scale", is_flag=True, default=False, help="Reduced preset: 64x64 crops, base 8, short schedules.")
@click.pass_context
def cli(ctx: click.Context, config_path: Optional[Path], seed: Optional[int], out: Optional[Path],
        desk_scale: bool) -> None:
    """Mixed-supervision liver and lesion segmentation: teacher, pseudo labels, student."""
    ctx.ensure_object(dict)
    ctx.obj.update(config=config_path, seed=seed, out=out, desk_scale=desk_scale)
    log.info(
        f"boot: device={DEVICE} workers={NUM_WORKERS} progress={SHOW_PROGRESS} "
        f"data_root={DATA_ROOT} log_level={LOG_LEVEL}"
    )


@cli.command("phantom-gen")
@click.option("--cases", "n_cases", type=int, default=None, help="Number of phantoms (default from config).")
@click.option("--root", type=click.Path(path_type=Path), default=None, help="Target dataset root.")
@click.pass_context
def phantom_gen(ctx: click.Context, n_cases: Optional[int], root: Optional[Path]) -> None:
    """Write a synthetic phantom corpus in the case layout."""
    from app.phantom.generator import write_corpus

    cfg = _cfg(ctx)
    root = root or cfg.dataset_root
    ids = write_corpus(root, cfg.phantom, n_cases if n_cases is not None else cfg.phantom_cases)
    click.echo(f"{len(ids)} phantom case(s) in {root}")


@cli.command("import")
@click.argument("volume", type=click.Path(exists=True, path_type=Path))
@click.option("--mask", type=click.Path(exists=True, path_type=Path), default=None, help="Label map (0/1/2).")
@click.option("--case-id", required=True, help="Case id to store under.")
@click.option("--root", type=click.Path(path_type=Path), default=None, help="Target dataset root.")
@click.pass_context
def import_cmd(ctx: click.Context, volume: Path, mask: Optional[Path], case_id: str, root: Optional[Path]) -> None:
    """Import a NIfTI scan (and optional label map) into the dataset root."""
    from app.data.store import import_nifti

    root = root or _cfg(ctx).dataset_root
    try:
        d = import_nifti(volume, root, case_id, mask)
    except (ValueError, OSError) as e:
        raise StageError("import", str(e)) from e
    click.echo(str(d))


@cli.command("split")
@click.pass_context
def split_cmd(ctx: click.Context) -> None:
    """Seeded strong / weak / validation split of the dataset root."""
    from app.pipeline.runner import read_split

    _run_until(ctx, "split")
    split = read_split(_cfg(ctx).out_dir)
    click.echo(f"strong={len(split['strong'])} weak={len(split['weak'])} val={len(split['val'])}")


@cli.command("train-teacher")
@click.pass_context
def train_teacher_cmd(ctx: click.Context) -> None:
    """Train the box-guided teacher on the strong set."""
    _run_until(ctx, "teacher")


@cli.command("annotate")
@click.pass_context
def annotate_cmd(ctx: click.Context) -> None:
    """Write teacher soft labels for every weak case."""
    _run_until(ctx, "annotate")


@cli.command("train-student")
@click.pass_context
def train_student_cmd(ctx: click.Context) -> None:
    """Train the student on strong plus pseudo-labeled cases."""
    _run_until(ctx, "student")


@cli.command("infer")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--case", "case_ids", multiple=True, required=True, help="Case id in the dataset root (repeatable).")
@click.option("--raw", is_flag=True, default=False, help="Skip postprocessing.")
@click.pass_context
def infer_cmd(ctx: click.Context, checkpoint: Path, case_ids: Sequence[str], raw: bool) -> None:
    """Sweep a student checkpoint over cases; writes pred.raw per case."""
    from app.data.ingest import truncate_hu
    from app.data.store import read_case, write_prediction
    from app.eval.postprocess import postprocess, sweep_infer
    from app.nets.checkpoint import load_model

    cfg = _cfg(ctx, needs_data=True)
    try:
        model, manifest = load_model(checkpoint)
        if manifest["role"] != "student":
            raise ValueError(f"{checkpoint} is a {manifest['role']} checkpoint; infer needs a student")
        for cid in case_ids:
            rec = read_case(cfg.dataset_root, cid, with_mask=False)
            pred = sweep_infer(truncate_hu(rec.volume), model)
            if not raw:
                pred = postprocess(pred)
            d = write_prediction(Path(cfg.out_dir) / "infer" / cid, pred)
            click.echo(str(d))
    except (ValueError, OSError) as e:
        raise StageError("infer", str(e)) from e


@cli.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), default=None,
              help="Evaluate this checkpoint instead of the run's student.")
@click.option("--case", "case_ids", multiple=True, help="Case ids (default: the run's validation split).")
@click.pass_context
def evaluate_cmd(ctx: click.Context, checkpoint: Optional[Path], case_ids: Sequence[str]) -> None:
    """Metrics report: Dice global / per case and tumor burden RMSE."""
    from app.pipeline.runner import evaluate_checkpoint, read_split

    cfg = _cfg(ctx, needs_data=True)
    if checkpoint is None:
        report = _run_until(ctx, "evaluate")
    else:
        try:
            ids: List[str] = list(case_ids) or read_split(cfg.out_dir)["val"]
            report = evaluate_checkpoint(checkpoint, cfg, ids, Path(cfg.out_dir) / "eval_external")
        except (ValueError, OSError, KeyError) as e:
            raise StageError("evaluate", str(e)) from e
    click.echo(report.table())


@cli.command("run")
@click.pass_context
def run_cmd(ctx: click.Context) -> None:
    """Full pipeline: split, teacher, annotate, student, evaluate (resumable)."""
    from app.pipeline.runner import cmd_run_pipeline

    report = cmd_run_pipeline(_cfg(ctx, needs_data=True))
    click.echo(report.table())


@cli.command("sweep-ratio")
@click.option("--ratio", "ratios", multiple=True, help="S:W:V, repeatable (default from config).")
@click.pass_context
def sweep_ratio_cmd(ctx: click.Context, ratios: Sequence[str]) -> None:
    """Pipeline per supervision ratio; writes curve.csv and dice_vs_ratio.png."""
    from app.pipeline.studies import cmd_sweep_ratio

    parsed = [_parse_ratio(r) for r in ratios] or None
    curve = cmd_sweep_ratio(_cfg(ctx, needs_data=True), parsed)
    click.echo(curve.to_string(index=False))


@cli.command("perturb-study")
@click.pass_context
def perturb_study_cmd(ctx: click.Context) -> None:
    """Exact-box baseline vs perturbed boxes; writes perturb.json and a plot."""
    from app.pipeline.studies import cmd_perturb_study

    result = cmd_perturb_study(_cfg(ctx, needs_data=True))
    for k, v in result.items():
        click.echo(f"{k:22s} {v['baseline']:.4f} -> {v['perturbed']:.4f} ({v['delta']:+.4f})")


@cli.command("export-checkpoint")
@click.argument("src", type=click.Path(exists=True, path_type=Path))
@click.argument("dst", type=click.Path(path_type=Path))
def export_checkpoint_cmd(src: Path, dst: Path) -> None:
    """Copy a student checkpoint without its localization branch."""
    from app.nets.checkpoint import export_checkpoint

    try:
        out = export_checkpoint(src, dst)
    except (ValueError, OSError, KeyError) as e:
        raise StageError("export", str(e)) from e
    click.echo(str(out))


# =========================================================
# ENTRY
# =========================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="mixseg", standalone_mode=False)
    except click.exceptions.Abort:
        log.error("aborted")
        return EXIT_STAGE
    except click.ClickException as e:
        e.show()
        return EXIT_CONFIG
    except ConfigError as e:
        log.error(f"config error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        log.error(f"stage failed: {e}")
        return EXIT_STAGE
    except MixsegError as e:
        log.error(str(e))
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
