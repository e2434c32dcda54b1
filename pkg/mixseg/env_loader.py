import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

log = logging.getLogger("mixseg")


def load_env_robust(env_path: Optional[str] = None) -> Optional[Path]:
    """
    Robust .env loader:
    - looks at the explicit path, then ./.env, then the repo root .env
    - never overrides variables already set in the process env
    - a missing file is fine (process env only)
    """
    here = Path(__file__).resolve().parent.parent
    candidates = [Path(env_path)] if env_path else [Path.cwd() / ".env", here / ".env"]

    for p in candidates:
        if not p.exists():
            continue
        try:
            load_dotenv(p, override=False)
            log.info("ENV | .env loaded from %s", p.resolve())
            return p
        except Exception as e:
            log.exception("ENV | failed to read %s: %s", p, e)

    log.info("ENV | .env not found, using process env only")
    return None
