import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from thinkroute.pipeline import PipelineConfig, SynthConfig, run_pipeline  # noqa: E402
from thinkroute.router import TrainConfig  # noqa: E402


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A quick end-to-end synthetic run shared by the pipeline tests."""
    cfg = PipelineConfig(
        workdir=tmp_path_factory.mktemp("run"),
        synth=SynthConfig(n_instances=200),
        train=TrainConfig(n_rounds=40),
    )
    run_pipeline(cfg, with_synth=True)
    return cfg


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
