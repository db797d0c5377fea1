import pytest

import acceptance_log
from fluorosynth import datapipe as dp
from fluorosynth import workflow as wf
from fluorosynth.config import load_config


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_log.lines():
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def phantom_run(tmp_path_factory):
    """Small toy study (3 cases x 2 frames) taken through make-dataset; returns (cfg, run_dir)."""
    run = tmp_path_factory.mktemp("phantom_run")
    cfg = load_config(
        toy=True,
        overrides={"out": str(run), "phantom": {"cases": 3, "frames_per_case": 2}, "datapipe": {"test_cases": 1}},
    )
    wf.make_phantoms(cfg, run)
    wf.project_study(cfg, run)
    wf.simulate_study(cfg, run)
    wf.build_dataset(cfg, run)
    return cfg, run


@pytest.fixture(scope="session")
def phantom_patches(phantom_run):
    _, run = phantom_run
    return dp.PatchDataset.from_subimages(dp.load_dataset(run / wf.DATASET / "subimages"))
