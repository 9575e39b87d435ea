"""Shared fixtures: trained model studies are expensive, so they are built
once per session and reused by the training and acceptance tests."""

import json
from pathlib import Path

import pytest

from mcbm import pipeline

GOLDEN = Path(__file__).parent / "golden"
STUDY_SEEDS = (0, 1, 2)

_runs: dict[int, dict[str, pipeline.TrainedRun]] = {}
_evals: dict[int, dict[str, dict]] = {}


def factor_runs(seed: int) -> dict[str, pipeline.TrainedRun]:
    """VM, CBM, HCBM and MCBM at three gamma levels on the default factor
    dataset, trained with the default schedule."""
    if seed not in _runs:
        cfg = pipeline.ExperimentConfig(seed=seed)
        splits = pipeline.split_dataset(cfg, pipeline.build_dataset(cfg, seed), seed)
        _runs[seed] = {lab: pipeline.train_one(cfg, mc, seed, splits, lab) for lab, mc in pipeline.default_points()}
    return _runs[seed]


def factor_evals(seed: int) -> dict[str, dict]:
    if seed not in _evals:
        cfg = pipeline.ExperimentConfig(seed=seed)
        _evals[seed] = {lab: pipeline.evaluate_run(cfg, run) for lab, run in factor_runs(seed).items()}
    return _evals[seed]


@pytest.fixture(scope="session")
def study_runs():
    return {s: factor_runs(s) for s in STUDY_SEEDS}


@pytest.fixture(scope="session")
def study_evals():
    return {s: factor_evals(s) for s in STUDY_SEEDS}


@pytest.fixture(scope="session")
def golden():
    def load(name):
        return json.loads((GOLDEN / name).read_text())

    return load


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion this test checks")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call" and key != "error":
                continue
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props:
                continue
            status = "PASS" if rep.outcome == "passed" else "FAIL"
            lines.append((props["criterion"], f"criterion {props['criterion']:>2} {status}  {props.get('title', '')}  {props.get('detail', '')}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)


@pytest.fixture(scope="session")
def seed0_runs():
    return factor_runs(0)
