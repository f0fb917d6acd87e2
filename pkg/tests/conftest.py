import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from transferlab.config import ExperimentConfig  # noqa: E402
from transferlab.data import DATA_ENV, MNIST_FILES, find_file  # noqa: E402

RUN_DIR = Path(__file__).resolve().parents[1] / "runs" / "acceptance"


def _mnist_available(root: Path) -> bool:
    try:
        for split in MNIST_FILES.values():
            for stem in split:
                find_file(root, stem)
    except FileNotFoundError:
        return False
    return True


@pytest.fixture(scope="session")
def mnist_dir() -> Path:
    root = os.environ.get(DATA_ENV)
    if not root or not _mnist_available(Path(root)):
        pytest.skip(f"MNIST not found; set ${DATA_ENV}")
    return Path(root)


@pytest.fixture(scope="session")
def experiment(mnist_dir):
    """Default experiment under runs/acceptance: train, compress and sweep.

    Artefacts carry recipe digests, so later sessions reuse them.
    """
    from transferlab.pipeline import Experiment

    exp = Experiment(ExperimentConfig(output_dir=str(RUN_DIR), data={"root": str(mnist_dir)}))
    exp.train_baseline()
    result = exp.compress()
    assert not result.failures, result.failures
    reports = [exp.reports / f"{k}_sweep.csv" for k in ("prune", "quant")]
    newest = max(p.stat().st_mtime for p in exp.checkpoints.glob("*.ckpt"))
    if not all(p.exists() and p.stat().st_mtime >= newest for p in reports):
        exp.sweep()
    return exp


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
