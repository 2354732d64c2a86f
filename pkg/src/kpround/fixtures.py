"""Versioned calibration fixture: frozen constants behind every statistical
bound the test batteries assert. Tests fail loudly if the fixture is missing;
they never auto-calibrate."""

from __future__ import annotations

import json
import os
from pathlib import Path

ENV_VAR = "KPROUND_FIXTURES"
FIXTURE_NAME = "calibration.json"
FIXTURE_VERSION = 1


def fixture_dir() -> Path:
    env = os.environ.get(ENV_VAR)
    return Path(env) if env else Path(__file__).parent / "fixtures"


def load_calibration() -> dict:
    path = fixture_dir() / FIXTURE_NAME
    if not path.exists():
        raise FileNotFoundError(
            f"calibration fixture missing at {path}; generate it with "
            f"`kpround calibrate` (tests never calibrate silently)")
    data = json.loads(path.read_text())
    if data.get("version") != FIXTURE_VERSION:
        raise ValueError(f"fixture version {data.get('version')} != {FIXTURE_VERSION}")
    return data


def constant(name: str) -> float:
    consts = load_calibration()["constants"]
    if name not in consts:
        raise KeyError(f"no frozen constant {name!r}; re-run `kpround calibrate`")
    return float(consts[name])
