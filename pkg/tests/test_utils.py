import os
from pathlib import Path

import numpy as np

from app.utils.seed import sample_rng
from app.utils.text import _is_ascii, _mask_key, sha256_file, sha256_json, stable_json
from app.utils.time import Stopwatch, fmt_duration, utc_now_iso
from mixseg.env_loader import load_env_robust


def test_hash_helpers(tmp_path: Path):
    assert stable_json({"b": 1, "a": [1, 2]}) == '{"a":[1,2],"b":1}'
    assert sha256_json({"a": 1, "b": 2}) == sha256_json({"b": 2, "a": 1})
    f = tmp_path / "x.bin"
    f.write_bytes(b"abc")
    assert sha256_file(f, chunk=1) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    assert _mask_key("") == "***empty***"
    assert _mask_key("0123456789abcdef") == "01234567"
    assert _is_ascii("case_001") and not _is_ascii("случай")


def test_time_helpers():
    assert fmt_duration(5) == "5s"
    assert fmt_duration(65) == "1m05s"
    assert fmt_duration(3725) == "1h02m05s"
    assert fmt_duration(-3) == "0s"
    assert utc_now_iso().endswith("+00:00")
    assert Stopwatch().elapsed() >= 0


def test_sample_rng_is_keyed_not_ordered():
    a = sample_rng(0, 1, 2).random(3)
    sample_rng(0, 5).random(10)
    np.testing.assert_array_equal(a, sample_rng(0, 1, 2).random(3))
    assert not np.array_equal(a, sample_rng(0, 2, 1).random(3))


def test_env_loader_never_overrides(tmp_path: Path, monkeypatch):
    env = tmp_path / ".env"
    env.write_text("MIXSEG_TEST_A=from_file\nMIXSEG_TEST_B=from_file\n", encoding="utf-8")
    monkeypatch.setenv("MIXSEG_TEST_A", "from_process")
    monkeypatch.delenv("MIXSEG_TEST_B", raising=False)
    assert load_env_robust(str(env)) == env
    assert os.environ["MIXSEG_TEST_A"] == "from_process"
    assert os.environ["MIXSEG_TEST_B"] == "from_file"
    monkeypatch.delenv("MIXSEG_TEST_B")
    assert load_env_robust(str(tmp_path / "missing.env")) is None
