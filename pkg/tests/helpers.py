"""Make tests a little nicer."""

import os
import tomllib
from pathlib import Path

import numpy as np
import pytest

from expertbits.moe import MoEModel, TokenSet


PROJECT = Path(__file__).parent.parent
DATA_DIR = PROJECT / "tests/data"

# The full-size synthetic runs take minutes.
SLOW = os.environ.get("EXPERTBITS_SLOW", "") == "1"

slow = pytest.mark.skipif(not SLOW, reason="set EXPERTBITS_SLOW=1 to run full-size runs")


def read_toml(name: str) -> dict:
    """Read a .toml test data file."""
    with (DATA_DIR / f"{name}.toml").open("rb") as f:
        return tomllib.load(f)


def data_cases(name: str, table: str) -> list:
    """Pytest parameters from an array of tables in a data file.

    Each table must have an `id`, which becomes the test id.  The table itself
    is the single parameter.
    """
    cases = read_toml(name)[table]
    assert all("id" in case for case in cases), "Test cases must have an id"
    return [pytest.param(case, id=case["id"]) for case in cases]


def aligned_model(ts: TokenSet, scale: float = 10.0) -> MoEModel:
    """A synthetic model whose experts are already specialized.

    Expert 0 routes to +o1, expert 1 to -o1, expert 2 to +o2 and expert 3 to
    -o2, and each has two neurons pointing at its token.  Every router scores
    task-irrelevant tokens 1, so an expert whose token is missing picks an
    irrelevant one.
    """
    o1 = ts.P[:, ts.o1_index]
    o2 = ts.P[:, ts.o2_index]
    directions = np.stack([o1, -o1, o2, -o2])
    irrelevant = ts.P[:, ts.irrelevant_indices].sum(axis=1)
    return MoEModel(
        routers=scale * directions + irrelevant,
        experts=np.stack([np.tile(v, (2, 1)) for v in directions]),
        signs=np.array([1.0, 1.0, -1.0, -1.0]),
        l=1,
    )
