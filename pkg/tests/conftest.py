import json
import time
from pathlib import Path

import pytest

from pcrnn.training import TrainConfig, train

ACCEPTANCE_LINES: list[str] = []
CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def trained():
    """Weights trained once per session with the shipped paper config."""
    doc = json.loads((CONFIGS / "paper.json").read_text())
    cfg = TrainConfig.from_dict({**doc, "log_every": 0})
    start = time.perf_counter()
    w, losses = train(cfg)
    return cfg, w, losses, time.perf_counter() - start
