"""
Multi-run studies on top of the pipeline: supervision-ratio sweep and
box-perturbation robustness.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import pandas as pd  # noqa: E402

from app.config import ExperimentConfig  # noqa: E402
from app.data.store import save_json  # noqa: E402
from app.errors import StageError  # noqa: E402
from app.eval.metrics import MetricsReport  # noqa: E402
from app.pipeline.runner import cmd_run_pipeline, read_split  # noqa: E402
from app.utils.text import sha256_json  # noqa: E402

log = logging.getLogger("mixseg")

METRIC_COLUMNS = ["dice_global_liver", "dice_per_case_liver", "dice_global_lesion",
                  "dice_per_case_lesion", "tumor_burden_rmse"]


def ratio_dir_name(ratio: Sequence[int]) -> str:
    return "ratio_" + "_".join(str(int(r)) for r in ratio)


# =========================================================
# RATIO SWEEP
# =========================================================

def cmd_sweep_ratio(cfg: ExperimentConfig, ratios: Optional[Sequence[Tuple[int, int, int]]] = None) -> pd.DataFrame:
    """
    One pipeline run per ratio under <out>/<ratio_s_w_v>/. A failing ratio
    is logged and recorded with empty metrics; the others still run.
    Ratios that end up with different validation ids stop the sweep.
    """
    ratios = list(ratios or cfg.sweep_ratios)
    out = Path(cfg.out_dir)
    rows: List[Dict[str, object]] = []
    val_sets: Dict[str, str] = {}

    for ratio in ratios:
        sub = cfg.with_ratio(tuple(ratio), out / ratio_dir_name(ratio))
        row: Dict[str, object] = {"strong": ratio[0], "weak": ratio[1], "val": ratio[2]}
        log.info(f"[SWEEP] ratio {ratio[0]}:{ratio[1]}:{ratio[2]} -> {sub.out_dir}")
        try:
            report = cmd_run_pipeline(sub)
        except StageError as e:
            log.error(f"[SWEEP] ratio {ratio} failed: {e}")
            row.update({k: float("nan") for k in METRIC_COLUMNS})
            row["status"] = f"failed: {e}"
            rows.append(row)
            continue
        row.update(report.summary())
        row["status"] = "ok"
        row["val_ids_sha256"] = sha256_json(sorted(read_split(sub.out_dir)["val"]))
        val_sets[ratio_dir_name(ratio)] = row["val_ids_sha256"]
        rows.append(row)
        _write_curve(out, rows)
        # every ratio is scored on one shared validation set
        if len(set(val_sets.values())) > 1:
            raise StageError("sweep", f"validation ids differ across ratios: {val_sets}")

    curve = _write_curve(out, rows)
    if (curve["status"] == "ok").any():
        plot_ratio_curve(curve, out / "dice_vs_ratio.png")
    return curve


def _write_curve(out: Path, rows: List[Dict[str, object]]) -> pd.DataFrame:
    curve = pd.DataFrame(rows)
    out.mkdir(parents=True, exist_ok=True)
    curve.to_csv(out / "curve.csv", index=False)
    save_json(out / "curve.json", curve.to_dict(orient="records"))
    return curve


def plot_ratio_curve(curve: pd.DataFrame, path: Path) -> Path:
    ok = curve[curve["status"] == "ok"].sort_values("strong")
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, kind in zip(axes, ("global", "per_case")):
        for cls, marker in (("liver", "o"), ("lesion", "s")):
            ax.plot(ok["strong"], ok[f"dice_{kind}_{cls}"], marker=marker, label=cls)
        ax.set_title(f"Dice {kind.replace('_', ' ')}")
        ax.set_xlabel("strong share (%)")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("Dice")
    axes[0].legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# =========================================================
# PERTURBATION STUDY
# =========================================================

def cmd_perturb_study(cfg: ExperimentConfig) -> Dict[str, Dict[str, float]]:
    """Baseline run with exact boxes vs a run with perturbed boxes; dense labels are never touched."""
    out = Path(cfg.out_dir)
    perturb_on = cfg.perturb.model_copy(update={"enabled": True})
    perturb_off = cfg.perturb.model_copy(update={"enabled": False})
    base_cfg = cfg.model_copy(update={"perturb": perturb_off, "out_dir": out / "baseline"})
    pert_cfg = cfg.model_copy(update={"perturb": perturb_on, "out_dir": out / "perturbed"})

    log.info(f"[PERTURB] baseline -> {base_cfg.out_dir}")
    baseline = cmd_run_pipeline(base_cfg)
    log.info(f"[PERTURB] perturbed boxes -> {pert_cfg.out_dir}")
    perturbed = cmd_run_pipeline(pert_cfg)

    result = perturb_deltas(baseline, perturbed)
    save_json(out / "perturb.json", result)
    frame = pd.DataFrame(result).T.reset_index().rename(columns={"index": "metric"})
    frame.to_csv(out / "perturb.csv", index=False)
    plot_perturb(frame, out / "perturb_deltas.png")
    log.info(
        f"[PERTURB] delta liver global={result['dice_global_liver']['delta']:+.4f} "
        f"lesion global={result['dice_global_lesion']['delta']:+.4f}"
    )
    return result


def perturb_deltas(baseline: MetricsReport, perturbed: MetricsReport) -> Dict[str, Dict[str, float]]:
    b, p = baseline.summary(), perturbed.summary()
    return {k: {"baseline": b[k], "perturbed": p[k], "delta": p[k] - b[k]} for k in METRIC_COLUMNS}


def plot_perturb(frame: pd.DataFrame, path: Path) -> Path:
    dice_rows = frame[frame["metric"].str.startswith("dice")]
    fig, ax = plt.subplots(figsize=(7, 4))
    x = range(len(dice_rows))
    ax.bar([i - 0.2 for i in x], dice_rows["baseline"], width=0.4, label="exact boxes")
    ax.bar([i + 0.2 for i in x], dice_rows["perturbed"], width=0.4, label="perturbed boxes")
    ax.set_xticks(list(x))
    ax.set_xticklabels([m.replace("dice_", "") for m in dice_rows["metric"]], rotation=20)
    ax.set_ylabel("Dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
