import numpy as np
import pytest

from conveyor_marl.env import DispatchContext
from conveyor_marl.topology import build_default_preset, build_layout


@pytest.fixture(scope="session")
def preset():
    return build_default_preset()


def two_loop_layout(section_capacity=1, incoming_proc_s=0.1, loop_steps=30, section_steps=5):
    """L0: I0 -> S00 -> J0 -> I0 and L1: S01 -> J1 -> O0 -> S01, sections J0 <-> J1."""
    return build_layout(
        {"L0": ["I0", "S00", "J0"], "L1": ["S01", "J1", "O0"]},
        {"J0": "J1", "J1": "J0"},
        loop_steps=loop_steps,
        section_steps=section_steps,
        section_capacity=section_capacity,
        node_params={"incoming": (4, incoming_proc_s)},
    )


@pytest.fixture
def two_loop():
    return two_loop_layout()


def make_ctx(
    inbound,
    outbound=None,
    storage_loop=None,
    loop=0,
    loop_totals=None,
    same=None,
    other=None,
    loop_pallets=(0, 0, 0),
    direction_loops=None,
    seed=0,
):
    n = len(inbound)
    storage_loop = tuple(storage_loop if storage_loop is not None else [0] * n)
    if same is None:
        same = tuple(k for k in range(n) if storage_loop[k] == loop)
    if other is None:
        other = tuple(k for k in range(n) if k not in same)
    inbound = np.asarray(inbound, dtype=np.int64)
    if loop_totals is None:
        loop_totals = np.zeros(max(storage_loop) + 1, dtype=np.int64)
        for k, lp in enumerate(storage_loop):
            loop_totals[lp] += inbound[k]
    return DispatchContext(
        agent_id="I0",
        node_id="I0",
        loop=loop,
        same=tuple(same),
        other=tuple(other),
        all=tuple(range(n)),
        storage_loop=storage_loop,
        inbound=inbound,
        outbound=np.asarray(outbound if outbound is not None else [0] * n, dtype=np.int64),
        loop_totals=np.asarray(loop_totals, dtype=np.int64),
        loop_pallets=np.asarray(loop_pallets, dtype=np.int64),
        direction_loops=direction_loops,
        rng=np.random.default_rng(seed),
        observation=np.zeros(45),
    )
