from pathlib import Path

import numpy as np
import pytest

from moeprune.calib import ToyDims, gen_toy_model
from moeprune.checkpoint import open_model

DATA = Path(__file__).parent / "data"
DOCS = Path(__file__).parents[1] / "docs"

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy") / "model"
    gen_toy_model(7, ToyDims(2, 4, 2, 8, 4), out)
    return out


@pytest.fixture(scope="session")
def toy(toy_dir):
    return open_model(toy_dir, "qwen3-like")


@pytest.fixture(scope="session")
def medium_dir(tmp_path_factory):
    """L=4, n=8, k=2, d=64, m=32, sharded into several files."""
    out = tmp_path_factory.mktemp("medium") / "model"
    gen_toy_model(42, ToyDims(4, 8, 2, 64, 32), out, shard_limit=200_000)
    return out
