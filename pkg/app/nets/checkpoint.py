"""
Checkpoint archive: a zip holding manifest.json plus one params/<name>
entry per state-dict tensor, raw little-endian float32.
"""
import json
import logging
import os
import zipfile
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from app.config import TrainConfig
from app.nets.student import StudentNet
from app.nets.teacher import TeacherNet
from app.utils.time import utc_now_iso

log = logging.getLogger("mixseg")

MANIFEST = "manifest.json"
PARAM_PREFIX = "params/"
FORMAT_VERSION = 1


def build_model(cfg: TrainConfig) -> nn.Module:
    if cfg.role == "teacher":
        return TeacherNet(cfg.net, cfg.attention, seed=cfg.seed)
    return StudentNet(cfg.net, loc_branch=cfg.loc_branch, loc_channels=cfg.loc_channels, seed=cfg.seed)


def save_checkpoint(
    path: Union[str, Path],
    model: nn.Module,
    cfg: TrainConfig,
    epoch: int,
    config_hash: str = "",
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {
        "format": FORMAT_VERSION,
        "role": cfg.role,
        "config": cfg.model_dump(mode="json"),
        "epoch": int(epoch),
        "seed": cfg.seed,
        "config_hash": config_hash,
        "has_loc_branch": bool(getattr(model, "has_loc_branch", False)),
        "params": {k: list(v.shape) for k, v in state.items()},
        "saved_at": utc_now_iso(),
        **(extra or {}),
    }
    tmp_path = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp_path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST, json.dumps(manifest, indent=2, sort_keys=True))
        for name, t in state.items():
            arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4")
            zf.writestr(PARAM_PREFIX + name, arr.tobytes(order="C"))
    os.replace(tmp_path, path)
    return path


def read_manifest(path: Union[str, Path]) -> Dict[str, Any]:
    with zipfile.ZipFile(path, "r") as zf:
        return json.loads(zf.read(MANIFEST).decode("utf-8"))


def load_state(path: Union[str, Path], model: nn.Module) -> Dict[str, Any]:
    """Loads tensors into a live module; dtypes follow the module."""
    live = model.state_dict()
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read(MANIFEST).decode("utf-8"))
        names = {n[len(PARAM_PREFIX):] for n in zf.namelist() if n.startswith(PARAM_PREFIX)}
        missing = sorted(set(live) - names)
        if missing:
            raise ValueError(f"{path}: checkpoint lacks {len(missing)} tensor(s), first {missing[0]!r}")
        new_state = {}
        for name, ref in live.items():
            raw = np.frombuffer(zf.read(PARAM_PREFIX + name), dtype="<f4")
            if raw.size != ref.numel():
                raise ValueError(f"{path}: {name} holds {raw.size} values, module expects {tuple(ref.shape)}")
            new_state[name] = torch.from_numpy(raw.copy()).reshape(ref.shape).to(ref.dtype)
    model.load_state_dict(new_state, strict=True)
    return manifest


def load_model(path: Union[str, Path]) -> Tuple[nn.Module, Dict[str, Any]]:
    manifest = read_manifest(path)
    cfg = TrainConfig.model_validate(manifest["config"])
    if cfg.role == "student" and not manifest.get("has_loc_branch", False):
        cfg = cfg.model_copy(update={"loc_branch": False})
    model = build_model(cfg)
    load_state(path, model)
    model.eval()
    return model, manifest


def export_checkpoint(src: Union[str, Path], dst: Union[str, Path]) -> Path:
    """Deployment copy of a student checkpoint: localization parameters removed."""
    model, manifest = load_model(src)
    if manifest["role"] != "student":
        raise ValueError(f"{src}: only student checkpoints can be exported, got {manifest['role']!r}")
    cfg = TrainConfig.model_validate(manifest["config"]).model_copy(update={"loc_branch": False})
    stripped = build_model(cfg)
    stripped.backbone.load_state_dict(model.backbone.state_dict())
    out = save_checkpoint(dst, stripped, cfg, manifest["epoch"], manifest.get("config_hash", ""),
                          extra={"exported_from": str(src)})
    log.info(f"[STUDENT] exported {src} -> {out} (loc branch removed)")
    return out
