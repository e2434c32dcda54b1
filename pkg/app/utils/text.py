import hashlib
import json
from pathlib import Path
from typing import Any, Union


def _mask_key(key: str, show: int = 8) -> str:
    """Short form of a hash for log lines."""
    if not key:
        return "***empty***"
    if len(key) <= show:
        return key
    return key[:show]


def _is_ascii(s: str) -> bool:
    try:
        s.encode("ascii")
        return True
    except Exception:
        return False


def stable_json(obj: Any) -> str:
    # canonical form: sorted keys, no whitespace
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_json(obj: Any) -> str:
    return sha256_text(stable_json(obj))


def sha256_file(path: Union[str, Path], chunk: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        while True:
            buf = f.read(chunk)
            if not buf:
                break
            h.update(buf)
    return h.hexdigest()
