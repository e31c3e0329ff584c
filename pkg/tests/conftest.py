import functools
import warnings

import pytest

from witten_lab.pipeline import run_scenario
from witten_lab.scenarios import load_scenario


@functools.lru_cache(maxsize=None)
def scenario_run(name: str, stage: str = "verify", seed: int = 0):
    """Full pipeline runs are expensive; share them across the session."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return run_scenario(load_scenario(name), stage=stage, seed=seed)


@pytest.fixture(scope="session")
def run():
    return scenario_run


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("WITTEN_LAB_CACHE", str(tmp_path / "cache"))
