"""Shared fixtures.  Expensive artifacts (the default LUT, trained models,
datasets) are cached in $HKEST_CACHE or <repo>/.cache and rebuilt when
missing."""
import os
from pathlib import Path

import pytest

from hkest.forward import FeatureLUT, build_lut

ROOT = Path(__file__).resolve().parents[1]


def cache_root() -> Path:
    path = Path(os.environ.get("HKEST_CACHE", ROOT / ".cache"))
    path.mkdir(parents=True, exist_ok=True)
    return path


def default_lut() -> FeatureLUT:
    path = cache_root() / "lut-161x126.bin"
    if path.exists():
        return FeatureLUT.load(path)
    lut = build_lut()
    lut.save(path)
    return lut


@pytest.fixture(scope="session")
def cache_dir() -> Path:
    return cache_root()


@pytest.fixture(scope="session")
def lut() -> FeatureLUT:
    return default_lut()
