"""
Run manifest: one manifest.json per output directory recording the config
hash, seed and per-stage completion hashes, plus a lock file so only one
run owns the directory at a time.
"""
import logging
import os
from contextlib import contextmanager
from pathlib import Path
from threading import Lock
from typing import Any, Dict, Iterator, Optional, Union

from app.data.store import load_json, save_json
from app.errors import ConfigError, StageError
from app.utils.text import _mask_key, sha256_json
from app.utils.time import utc_now_iso

log = logging.getLogger("mixseg")

MANIFEST_FILE = "manifest.json"
LOCK_FILE = ".lock"


def stage_hash(stage: str, config_hash: str, *upstream: str) -> str:
    return sha256_json({"stage": stage, "config": config_hash, "upstream": list(upstream)})


class RunManifest:
    def __init__(self, out_dir: Union[str, Path], config_hash: str, seed: int):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / MANIFEST_FILE
        self._lock = Lock()
        self.data: Dict[str, Any] = {
            "config_hash": config_hash,
            "seed": seed,
            "created_at": utc_now_iso(),
            "stages": {},
        }

    @classmethod
    def open(cls, out_dir: Union[str, Path], config_hash: str, seed: int) -> "RunManifest":
        """Loads an existing manifest; refuses one written under another config."""
        m = cls(out_dir, config_hash, seed)
        try:
            loaded = load_json(m.path)
        except FileNotFoundError:
            log.info(f"[RESUME] no manifest in {m.out_dir}, starting fresh")
            m.save()
            return m
        if not isinstance(loaded, dict) or "stages" not in loaded:
            raise ConfigError(f"{m.path}: not a run manifest")
        if loaded.get("config_hash") != config_hash:
            raise ConfigError(
                f"{m.out_dir} holds artifacts of config {_mask_key(str(loaded.get('config_hash')))}, "
                f"current config is {_mask_key(config_hash)}; use another --out"
            )
        m.data = loaded
        done = [k for k, v in loaded["stages"].items() if v.get("ok")]
        log.info(f"[RESUME] manifest loaded from {m.path}, completed stages: {done or 'none'}")
        return m

    @property
    def config_hash(self) -> str:
        return self.data["config_hash"]

    def save(self) -> None:
        with self._lock:
            save_json(self.path, self.data)

    def stage(self, name: str) -> Optional[Dict[str, Any]]:
        return self.data["stages"].get(name)

    def stage_done(self, name: str, expected_hash: str) -> bool:
        entry = self.stage(name)
        if not entry or not entry.get("ok") or entry.get("hash") != expected_hash:
            return False
        missing = [a for a in entry.get("artifacts", {}).values() if not (self.out_dir / a).exists()]
        if missing:
            log.warning(f"[RESUME] stage {name}: recorded artifact(s) missing ({missing[0]}), rerunning")
            return False
        return True

    def mark(self, name: str, hash_: str, artifacts: Optional[Dict[str, str]] = None, **info: Any) -> None:
        with self._lock:
            self.data["stages"][name] = {
                "ok": True,
                "hash": hash_,
                "artifacts": artifacts or {},
                "finished_at": utc_now_iso(),
                **info,
            }
        self.save()


@contextmanager
def run_lock(out_dir: Union[str, Path]) -> Iterator[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("run", f"{out_dir} is locked by another run ({path}); remove it if that run is dead")
    try:
        os.write(fd, f"{os.getpid()} {utc_now_iso()}\n".encode("utf-8"))
        os.close(fd)
        yield path
    finally:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass
