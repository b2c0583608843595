"""Expert dispatching rules for receiving and junction decisions.

Receiving rules return a storage action index; the junction rule returns a
direction (0 stay on the loop, 1 take the connecting section). Every rule is
a pure function of its :class:`~conveyor_marl.env.DispatchContext`, the
parameters and the context's rng state.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .env import DispatchContext

Heuristic = Callable[[DispatchContext], int]


class HeuristicError(ValueError):
    pass


def _default_costs() -> tuple[tuple[float, ...], ...]:
    # chain L0 - L1 - L2: same loop free, neighbour 0.25, far loop 0.5
    return ((0.0, 0.25, 0.5), (0.25, 0.0, 0.25), (0.5, 0.25, 0.0))


@dataclass(frozen=True)
class HeuristicParams:
    c1_medium: float = 4
    c1_high: float = 25
    c2_high: float = 25
    c3_high: float = 4
    cost_matrix: tuple[tuple[float, ...], ...] = field(default_factory=_default_costs)

    def __post_init__(self) -> None:
        vals = [self.c1_medium, self.c1_high, self.c2_high, self.c3_high]
        vals += [c for row in self.cost_matrix for c in row]
        if any(v < 0 for v in vals):
            raise HeuristicError("heuristic constants must be >= 0")
        n = len(self.cost_matrix)
        if any(len(row) != n for row in self.cost_matrix):
            raise HeuristicError("cost_matrix must be square")
        object.__setattr__(self, "cost_matrix", tuple(tuple(float(c) for c in r) for r in self.cost_matrix))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost_matrix"] = [list(r) for r in self.cost_matrix]
        return d


def _argmin(values: Sequence[float], candidates: Sequence[int]) -> int:
    # smallest value, ties to smallest index
    return min(candidates, key=lambda k: (values[k], k))


def heuristic_low(ctx: DispatchContext) -> int:
    """Random storage point on the incoming point's own loop."""
    if not ctx.same:
        raise HeuristicError(f"{ctx.agent_id}: no storage points on its loop")
    return int(ctx.same[int(ctx.rng.integers(len(ctx.same)))])


def random_baseline(ctx: DispatchContext) -> int:
    """Uniform over every storage point, regardless of loop."""
    return int(ctx.all[int(ctx.rng.integers(len(ctx.all)))])


def loop_cost(ctx: DispatchContext, loop: int, costs) -> float:
    """Normalized load of ``loop`` plus the routing cost from the agent's loop."""
    totals = ctx.loop_totals
    x_min, x_max = totals.min(), totals.max()
    load = 0.0 if x_max == x_min else (totals[loop] - x_min) / (x_max - x_min)
    return float(load + costs[ctx.loop][loop])


def min_cost(ctx: DispatchContext, loops: Sequence[int], costs) -> int:
    if not loops:
        raise HeuristicError("min_cost needs at least one candidate loop")
    return min(sorted(set(loops)), key=lambda j: (loop_cost(ctx, j, costs), j))


def _filtered(ctx: DispatchContext, pool: Sequence[int], cap: float) -> list[int]:
    kept = [k for k in pool if ctx.inbound[k] <= cap]
    # nothing under the cap: dispatch from the unfiltered pool
    return kept or list(pool)


def heuristic_medium(ctx: DispatchContext, params: HeuristicParams = HeuristicParams()) -> int:
    pool = _filtered(ctx, ctx.all, params.c1_medium)
    loop = min_cost(ctx, [ctx.storage_loop[k] for k in pool], params.cost_matrix)
    pool = [k for k in pool if ctx.storage_loop[k] == loop]
    if len(pool) == 1:
        return pool[0]
    return _argmin(ctx.inbound, pool)


def high_selection(x_same: float, x_other: float, c1: float, c2: float) -> str:
    """Which storage set the High rule starts from: 'all', 'same' or 'other'."""
    if x_same < c1 and x_other < c2:
        return "all"
    if x_same < c1 and x_other > c2:
        return "same"
    if x_same > c1 and x_other < c2:
        return "other"
    return "all"


def heuristic_high(ctx: DispatchContext, params: HeuristicParams = HeuristicParams()) -> int:
    branch = high_selection(ctx.x_same, ctx.x_other, params.c1_high, params.c2_high)
    pool = {"all": ctx.all, "same": ctx.same, "other": ctx.other}[branch]
    pool = _filtered(ctx, pool, params.c3_high)
    other = set(ctx.other)
    without_other = [k for k in pool if k not in other]
    if without_other:
        pool = without_other
    if len(pool) == 1:
        return pool[0]
    diff = ctx.outbound - ctx.inbound
    return _argmin(diff, pool)


def junction_least_pallets(ctx: DispatchContext) -> int:
    """Send the empty pallet toward the loop currently holding fewer pallets."""
    if ctx.direction_loops is None:
        raise HeuristicError(f"{ctx.agent_id} is not a junction")
    stay, cross = ctx.direction_loops
    return 1 if ctx.loop_pallets[cross] < ctx.loop_pallets[stay] else 0


RECEIVING_HEURISTICS = ("random", "low", "medium", "high")


def receiving_heuristic(name: str, params: HeuristicParams | None = None) -> Heuristic:
    params = params or HeuristicParams()
    if name == "random":
        return random_baseline
    if name == "low":
        return heuristic_low
    if name == "medium":
        return lambda ctx: heuristic_medium(ctx, params)
    if name == "high":
        return lambda ctx: heuristic_high(ctx, params)
    raise HeuristicError(f"unknown receiving heuristic {name!r}")


def frozen_policy_heuristic(checkpoint, agent_spec=None) -> Heuristic:
    """Greedy rule backed by a frozen actor network.

    ``checkpoint`` is a :class:`~conveyor_marl.neural.Checkpoint` or a path
    to one. The actor's parameters are copied read-only and never updated.
    """
    from .neural import Checkpoint, forward, load_checkpoint

    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    if agent_spec is not None:
        meta = checkpoint.meta
        if checkpoint.params.sizes[-1] != agent_spec.action_dim:
            raise HeuristicError(
                f"checkpoint action_dim {checkpoint.params.sizes[-1]} != {agent_spec.action_dim} "
                f"for {agent_spec.agent_id}"
            )
        if meta.get("agent_class") not in (None, agent_spec.agent_class):
            raise HeuristicError(
                f"checkpoint is for a {meta.get('agent_class')} agent, not {agent_spec.agent_class}"
            )
    params = checkpoint.params.frozen_copy()

    def act(ctx: DispatchContext) -> int:
        return int(np.argmax(forward(params, ctx.observation)))

    act.params = params
    return act
