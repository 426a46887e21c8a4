"""Shared fixtures. The default replicate grid takes ~35 minutes and is only
built when a test actually requests it."""
import time

import pytest

from confrd.cli import main, read_csv


@pytest.fixture(scope="session")
def default_grid(tmp_path_factory):
    """Full default grid (1800 replicates, K=16) generated end-to-end through
    the CLI, plus the wall-clock time the run took."""
    out = tmp_path_factory.mktemp("default_grid")
    t0 = time.monotonic()
    rc = main(["simulate", "--out", str(out)])
    elapsed = time.monotonic() - t0
    assert rc == 0, "default simulate run failed"
    rows = read_csv(out / "results.csv")
    return out, rows, elapsed
