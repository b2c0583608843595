"""Multi-agent environment over the conveyor simulator.

Every agent sees the same global features plus its own process identifier.
Rewards are shared. Actions are only accepted for agents whose event
indicator was raised by the previous reset/step.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import sim
from .sim import ActionRangeError, DemandModel, ExtraActionError, MissingActionError  # noqa: F401
from .topology import Topology, build_default_preset

RECEIVING = "receiving"
JUNCTION = "junction"


@dataclass
class EnvConfig:
    seed: int = 0
    episode_steps: int = sim.DEFAULT_EPISODE_STEPS
    reward_scale: float = sim.DEFAULT_REWARD_SCALE
    total_pallets: int = sim.DEFAULT_TOTAL_PALLETS
    heading_cap: float = 50.0
    diff_span: float | None = None  # defaults to 2 x storage buffer
    junction_state_dim: int = 4
    demand_rates: tuple[float, ...] = sim.DEFAULT_DEMAND_RATES

    def __post_init__(self) -> None:
        if self.junction_state_dim not in (4, 8):
            raise ValueError("junction_state_dim must be 4 or 8")
        if self.episode_steps < 1 or self.total_pallets < 1:
            raise ValueError("episode_steps and total_pallets must be >= 1")
        if self.heading_cap <= 0 or (self.diff_span is not None and self.diff_span <= 0):
            raise ValueError("normalization caps must be positive")
        self.demand_rates = tuple(float(r) for r in self.demand_rates)

    def normalization(self, topology: Topology) -> dict:
        span = self.diff_span
        if span is None:
            span = 2.0 * topology.node(topology.storages[0]).buffer_capacity
        return {
            "heading_cap": float(self.heading_cap),
            "section_cap": float(topology.connecting_section_capacity),
            "diff_span": float(span),
            "junction_state_dim": self.junction_state_dim,
        }


def normalization_hash(norm: Mapping) -> str:
    return hashlib.sha256(json.dumps(dict(norm), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AgentSpec:
    agent_id: str
    agent_class: str
    node_id: str
    action_dim: int
    index: int


@dataclass
class DispatchContext:
    """Everything a dispatching rule may look at for one decision.

    Storage sets hold action indices (positions in ``topology.storages``).
    """

    agent_id: str
    node_id: str
    loop: int
    same: tuple[int, ...]
    other: tuple[int, ...]
    all: tuple[int, ...]
    storage_loop: tuple[int, ...]
    inbound: np.ndarray  # In(s)
    outbound: np.ndarray  # Out(s)
    loop_totals: np.ndarray  # sum of In(s) per loop
    loop_pallets: np.ndarray  # pallets currently on each loop
    direction_loops: tuple[int, int] | None
    rng: np.random.Generator
    observation: np.ndarray

    @property
    def x_same(self) -> int:
        return int(self.loop_totals[self.loop])

    @property
    def x_other(self) -> int:
        return int(self.loop_totals.sum() - self.loop_totals[self.loop])


@dataclass
class StepResult:
    clock: int
    indicators: dict[str, bool]
    reward: float
    done: bool
    raw: tuple = field(repr=False)
    encode: Callable[[tuple], np.ndarray] = field(repr=False)
    agent_order: tuple[str, ...] = field(repr=False, default=())
    _features: np.ndarray | None = field(repr=False, default=None)

    @property
    def features(self) -> np.ndarray:
        if self._features is None:
            self._features = self.encode(self.raw)
        return self._features

    def observation(self, agent_id: str) -> np.ndarray:
        try:
            k = self.agent_order.index(agent_id)
        except ValueError:
            raise KeyError(f"unknown agent {agent_id!r}") from None
        obs = np.empty(len(self.features) + 1)
        obs[0] = k / max(1, len(self.agent_order) - 1)
        obs[1:] = self.features
        return obs

    @property
    def observations(self) -> dict[str, np.ndarray]:
        return {a: self.observation(a) for a in self.agent_order}

    def flagged(self) -> list[str]:
        return [a for a, on in self.indicators.items() if on]


class ConveyorEnv:
    def __init__(
        self,
        config: EnvConfig | None = None,
        topology: Topology | None = None,
        demand: DemandModel | None = None,
    ):
        self.config = config or EnvConfig()
        self.topology = topology or build_default_preset()
        self.demand = demand or DemandModel.default(self.topology, self.config.demand_rates)
        t = self.topology
        self.norm = self.config.normalization(t)
        specs = []
        for k, node in enumerate(t.incoming + t.junctions):
            cls = RECEIVING if t.node(node).kind == "incoming" else JUNCTION
            dim = len(t.storages) if cls == RECEIVING else 2
            specs.append(AgentSpec(node, cls, node, dim, k))
        self.agent_specs = {s.agent_id: s for s in specs}
        self.agents = tuple(s.agent_id for s in specs)
        self.obs_dim = 1 + 2 * len(t.storages) + (
            len(t.junctions) if self.config.junction_state_dim == 4 else 2 * len(t.junctions)
        )
        self._storage_loop = tuple(t.loop_index(t.node(s).loop) for s in t.storages)
        self._same = {}
        for a in t.incoming:
            same = t.same_loop_storages(a)
            self._same[a] = (
                tuple(k for k, s in enumerate(t.storages) if s in same),
                tuple(k for k, s in enumerate(t.storages) if s not in same),
            )
        self._jloops = {j: tuple(t.loop_index(x) for x in t.junction_loops(j)) for j in t.junctions}
        caps = []
        for j in t.junctions:
            link = t.junction(j)
            caps += [t.segment_capacity(link.dir0), t.segment_capacity(link.dir1)]
        self._jdir_caps = np.asarray(caps, dtype=float)
        self.state: sim.SimState | None = None
        self.last: StepResult | None = None
        self.heuristic_rng: np.random.Generator | None = None

    def agents_of(self, agent_class: str) -> tuple[str, ...]:
        return tuple(a for a in self.agents if self.agent_specs[a].agent_class == agent_class)

    def reset(self, seed: int | None = None, record_trace: bool = False) -> StepResult:
        if seed is None:
            seed = self.config.seed
        ss = np.random.SeedSequence(seed)
        sim_seq, heur_seq = ss.spawn(2)
        self.state = sim.init(
            self.topology,
            self.demand,
            self.config.total_pallets,
            seed=int(sim_seq.generate_state(1, np.uint64)[0]),
            episode_steps=self.config.episode_steps,
            reward_scale=self.config.reward_scale,
            record_trace=record_trace,
        )
        self.heuristic_rng = np.random.Generator(np.random.PCG64(heur_seq))
        self.last = self._result(0.0)
        return self.last

    def step(self, actions: Mapping[str, int]) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        flagged = self.state.events.pending
        extra = [a for a in actions if a not in flagged]
        if extra:
            unknown = [a for a in extra if a not in self.agent_specs]
            if unknown:
                raise ExtraActionError(f"unknown agent(s) {unknown}")
            raise ExtraActionError(f"action(s) given for unflagged agent(s) {extra}")
        missing = [a for a in flagged if a not in actions]
        if missing:
            raise MissingActionError(f"missing action(s) for flagged agent(s) {missing}")
        for a, act in actions.items():
            dim = self.agent_specs[a].action_dim
            if isinstance(act, bool) or not 0 <= int(act) < dim or int(act) != act:
                raise ActionRangeError(f"action {act!r} out of range for {a} (valid 0..{dim - 1})")
        _, reward = self.state.step(actions)
        self.last = self._result(reward)
        return self.last

    def observe(self, agent_id: str) -> np.ndarray:
        if agent_id not in self.agent_specs:
            raise KeyError(f"unknown agent {agent_id!r}")
        return self.last.observation(agent_id)

    def features(self) -> np.ndarray:
        """Normalized global features (everything but the process identifier)."""
        return self.encode(self._raw_counts())

    def _raw_counts(self) -> tuple:
        s = self.state
        heading, sections, diff = s.feature_counts()
        jdir = s.junction_direction_counts() if self.config.junction_state_dim == 8 else None
        return heading, sections, diff, jdir

    def encode(self, raw: tuple) -> np.ndarray:
        heading, sections, diff, jdir = raw
        n = self.norm
        head = np.minimum(np.asarray(heading, dtype=float) / n["heading_cap"], 1.0)
        if self.config.junction_state_dim == 4:
            junc = np.asarray(sections, dtype=float) / n["section_cap"]
        else:
            junc = np.asarray(jdir, dtype=float) / self._jdir_caps
        junc = np.minimum(junc, 1.0)
        span = n["diff_span"]
        dif = np.clip((np.asarray(diff, dtype=float) + span) / (2 * span), 0.0, 1.0)
        return np.concatenate([head, junc, dif])

    def _result(self, reward: float) -> StepResult:
        s = self.state
        return StepResult(
            clock=s.clock,
            indicators=dict(s.events.indicators),
            reward=reward,
            done=s.done,
            raw=self._raw_counts(),
            encode=self.encode,
            agent_order=self.agents,
        )

    def dispatch_context(self, agent_id: str) -> DispatchContext:
        spec = self.agent_specs[agent_id]
        s = self.state
        t = self.topology
        loop = t.loop_index(t.node(spec.node_id).loop)
        same, other = self._same.get(agent_id, ((), ()))
        totals = s.loop_totals_in()
        return DispatchContext(
            agent_id=agent_id,
            node_id=spec.node_id,
            loop=loop,
            same=same,
            other=other,
            all=tuple(range(len(t.storages))),
            storage_loop=self._storage_loop,
            inbound=np.asarray(s.heading, dtype=np.int64),
            outbound=np.asarray(s.outflight, dtype=np.int64),
            loop_totals=np.asarray([totals[x] for x in t.loops], dtype=np.int64),
            loop_pallets=np.asarray([s.loop_count[x] for x in t.loops], dtype=np.int64),
            direction_loops=self._jloops.get(agent_id),
            rng=self.heuristic_rng,
            observation=self.observe(agent_id),
        )

    def config_dict(self) -> dict:
        d = asdict(self.config)
        d["demand_rates"] = list(d["demand_rates"])
        return d
