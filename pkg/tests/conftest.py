"""Shared, expensive fixtures: the P1 runs are reused by several modules."""

import csv
from pathlib import Path

import pytest

from nashgp.cli import main

ROOT = Path(__file__).resolve().parent.parent
EXPERIMENTS = ROOT / "experiments"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cli(tmp_path_factory, command, name):
    out = tmp_path_factory.mktemp(name)
    code = main([command, str(EXPERIMENTS / f"{name}.yaml"), "--out", str(out), "--quiet"])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def p1_pe_dir(tmp_path_factory):
    return _cli(tmp_path_factory, "solve", "p1_pe")


@pytest.fixture(scope="session")
def p1_sur_dir(tmp_path_factory):
    return _cli(tmp_path_factory, "solve", "p1_sur")


@pytest.fixture(scope="session")
def p1_baseline_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("p1_baseline")
    assert main(["baseline", str(EXPERIMENTS / "p1_pe.yaml"), "--out", str(out), "--quiet"]) == 0
    return out


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
