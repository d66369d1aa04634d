import os
from pathlib import Path

import pytest

DATA_ROOT = Path(os.environ.get("BADSAD_DATA_ROOT", "/root/data"))
MNIST_DIR = DATA_ROOT / "mnist"


def have_mnist() -> bool:
    return (MNIST_DIR / "train-labels-idx1-ubyte").exists() or (MNIST_DIR / "train-labels-idx1-ubyte.gz").exists()


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST files not found under {MNIST_DIR}")


@pytest.fixture(scope="session")
def mnist_partitions():
    if not have_mnist():
        pytest.skip(f"MNIST files not found under {MNIST_DIR}")
    from badsad.datasets import load_partitions

    return load_partitions("mnist", MNIST_DIR)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    def record(label: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} {label}" + (f": {detail}" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
