import json
import sys
import time
from pathlib import Path

import pytest

# make the sibling helper modules (oracles) importable
sys.path.insert(0, str(Path(__file__).parent))

from racestack import cli  # noqa: E402
from racestack.sim import tracks  # noqa: E402
from racestack.sim.loop import run_closed_loop  # noqa: E402
from racestack.sim.scenario import ScenarioConfig  # noqa: E402

_FSG_RUNS: dict = {}
WALL_TIME: dict = {}  # run label -> seconds


def fsg_run(seed: int):
    """Closed-loop FSG-like run, computed once per session and seed."""
    if seed not in _FSG_RUNS:
        t0 = time.perf_counter()
        _FSG_RUNS[seed] = run_closed_loop(tracks.fsg_like(), ScenarioConfig(name="fsg", track="fsg_like", seed=seed))
        WALL_TIME[f"fsg-{seed}"] = time.perf_counter() - t0
    return _FSG_RUNS[seed]


@pytest.fixture(scope="session")
def fsg_log():
    return fsg_run(0)


@pytest.fixture(scope="session")
def oval_run_dir(tmp_path_factory):
    """Oval fixture run through the command line; returns (exit code, run directory)."""
    out = tmp_path_factory.mktemp("oval") / "run"
    t0 = time.perf_counter()
    code = cli.main(["run", "--track", "oval", "--seed", "0", "--out", str(out)])
    WALL_TIME["oval-0"] = time.perf_counter() - t0
    return code, out


@pytest.fixture(scope="session")
def oval_metrics(oval_run_dir):
    return json.loads((oval_run_dir[1] / "metrics.json").read_text())


# one PASS/FAIL line per acceptance criterion in the terminal summary
_CRITERIA: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("acceptance criteria")
    for i, (name, title) in enumerate(CRITERIA, 1):
        outcome = _CRITERIA.get(name)
        if outcome is None:
            continue
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {i:2d} {status}: {title}")
