"""Step-based conveyor simulator.

One step is one simulation tick (0.1 s by default). Internally the simulator
keeps an agenda of timed events (segment arrivals, service completions,
demand arrivals) bucketed by step, so quiet steps cost almost nothing.

Decision protocol: after each step the returned :class:`EventSet` flags the
agents that have a pallet waiting for a dispatch decision. The next call to
:meth:`SimState.step` must carry one action for each flagged agent; the
decision is applied at the current clock, before time advances.
"""

from __future__ import annotations

import hashlib
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .topology import Topology

CIRCULATING_EMPTY = "circulating_empty"
QUEUED = "queued"
PROCESSING = "processing"
LOADED_RECEIVING = "in_transit_loaded_receiving"
LOADED_SHIPPING = "in_transit_loaded_shipping"
EMPTY_DIRECTED = "in_transit_empty_directed"

BUFFER_FULL_REROUTE = "buffer_full_reroute"
SECTION_FULL_REDIRECT = "junction_section_full_redirect"
SECTION_FULL_HOLD = "junction_section_full_hold"

DEFAULT_EPISODE_STEPS = 36000
DEFAULT_REWARD_SCALE = 0.01
DEFAULT_TOTAL_PALLETS = 500
DEFAULT_DEMAND_RATES = (420.0, 360.0, 300.0, 240.0, 180.0, 120.0)

_TRAVEL_PHASE = {None: CIRCULATING_EMPTY, "receiving": LOADED_RECEIVING, "shipping": LOADED_SHIPPING}


class SimError(RuntimeError):
    pass


class DispatchError(ValueError):
    pass


class MissingActionError(DispatchError):
    pass


class ExtraActionError(DispatchError):
    pass


class ActionRangeError(DispatchError):
    pass


class EpisodeOverError(SimError):
    pass


@dataclass
class DemandModel:
    """Poisson shipping demand per outgoing point.

    ``rates_per_hour[o]`` is the arrival rate at outgoing point ``o``;
    ``source_weights[o]`` is a probability vector over storage points.
    """

    rates_per_hour: dict[str, float]
    source_weights: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        for o, rate in self.rates_per_hour.items():
            if rate < 0 or not math.isfinite(rate):
                raise ValueError(f"demand rate for {o} must be finite and >= 0")
            w = np.asarray(self.source_weights[o], dtype=float)
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise ValueError(f"source weights for {o} must lie on the simplex")
            self.source_weights[o] = w

    @classmethod
    def default(cls, topology: Topology, rates=DEFAULT_DEMAND_RATES) -> "DemandModel":
        n = len(topology.storages)
        # even-indexed storages are requested twice as often as odd ones
        w = np.array([2.0 if k % 2 == 0 else 1.0 for k in range(n)])
        w /= w.sum()
        outs = topology.outgoing
        if len(rates) != len(outs):
            raise ValueError(f"need {len(outs)} demand rates, got {len(rates)}")
        return cls(dict(zip(outs, map(float, rates))), {o: w.copy() for o in outs})

    @classmethod
    def zero(cls, topology: Topology) -> "DemandModel":
        return cls.default(topology, rates=[0.0] * len(topology.outgoing))


@dataclass(slots=True)
class Pallet:
    id: int
    phase: str = CIRCULATING_EMPTY
    cargo: str | None = None  # None, "receiving" or "shipping"
    node: str | None = None
    segment: str | None = None
    arrive_at: int = 0
    destination: str | None = None
    route: deque = field(default_factory=deque)
    source: str | None = None  # storage a shipping pallet was loaded at
    target: str | None = None  # outgoing point of a claimed demand request
    loop: str = ""
    ready_at: int = 0
    direction: int | None = None
    held: bool = False


@dataclass
class ThroughputCounters:
    receiving: int = 0
    shipping: int = 0
    per_step_delta: int = 0

    @property
    def total(self) -> int:
        return self.receiving + self.shipping


@dataclass(frozen=True)
class ActionOverride:
    """A dispatch decision the layout refused.

    For junction causes, actions are directions (0 stay, 1 section) and a
    hold has ``applied == -1``. For ``buffer_full_reroute`` the requested
    action is 1 (enter the buffer) and the applied action 0 (pass by).
    """

    step: int
    node: str
    requested: int
    applied: int
    cause: str


@dataclass(frozen=True)
class TraceRecord:
    step: int
    agent_id: str
    event: str
    requested_action: int
    applied_action: int
    override_cause: str
    reward_delta: float

    def as_dict(self) -> dict:
        return {
            "step": self.step,
            "agent_id": self.agent_id,
            "event": self.event,
            "requested_action": self.requested_action,
            "applied_action": self.applied_action,
            "override_cause": self.override_cause,
            "reward_delta": self.reward_delta,
        }


@dataclass
class EventSet:
    indicators: dict[str, bool]
    pending: dict[str, tuple[str, int]]  # agent -> (node, pallet id)

    def flagged(self) -> list[str]:
        return [a for a, on in self.indicators.items() if on]


class SimState:
    """Mutable world state. Build with :func:`init`."""

    def __init__(
        self,
        topology: Topology,
        demand: DemandModel,
        total_pallets: int = DEFAULT_TOTAL_PALLETS,
        seed: int = 0,
        episode_steps: int = DEFAULT_EPISODE_STEPS,
        reward_scale: float = DEFAULT_REWARD_SCALE,
        record_trace: bool = False,
    ):
        if total_pallets < 1:
            raise ValueError("total_pallets must be >= 1")
        if episode_steps < 1:
            raise ValueError("episode_steps must be >= 1")
        t = topology
        self.topology = t
        self.demand = demand
        self.total_pallets = total_pallets
        self.episode_steps = episode_steps
        self.reward_scale = reward_scale
        self.record_trace = record_trace
        self.seed = seed
        self.rng = np.random.Generator(np.random.PCG64(seed))
        self.clock = 0
        self.counters = ThroughputCounters()
        self.override_log: list[ActionOverride] = []
        self.trace: list[TraceRecord] = []

        self.receiving_agents = t.incoming
        self.junction_agents = t.junctions
        self.agents = self.receiving_agents + self.junction_agents
        self.storages = t.storages
        self._storage_idx = {s: k for k, s in enumerate(self.storages)}
        self._kind = {n.id: n.kind for n in t.nodes}
        self._cap = {n.id: n.buffer_capacity for n in t.nodes}
        self._proc = {n.id: t.processing_steps(n.id) for n in t.nodes}
        self._loop_of = {n.id: n.loop for n in t.nodes}
        self._loop_next = {n.id: t.loop_next(n.id) for n in t.nodes}
        self._seg = {s.id: s for s in t.segments}
        self._seg_cap = {s.id: t.segment_capacity(s.id) for s in t.segments}
        self._sections = {j.dir1 for j in t.junction_links}
        self._jdirs = {j.junction: (j.dir0, j.dir1) for j in t.junction_links}

        self.seg_count = {s.id: 0 for s in t.segments}
        self.load = {n.id: 0 for n in t.nodes}
        self._queue = {n.id: deque() for n in t.nodes}
        self._server: dict[str, int | None] = {n.id: None for n in t.nodes}
        self.node_busy_until = {n.id: 0 for n in t.nodes}
        self._blocked = {j: deque() for j in self.junction_agents}
        self._pending = {a: deque() for a in self.agents}
        self.requests = {s: deque() for s in self.storages}
        self.heading = [0] * len(self.storages)
        self.outflight = [0] * len(self.storages)
        self.loop_count = {loop: 0 for loop in t.loops}
        self._agenda: dict[int, list] = {}
        self._delta = 0
        self._step_trace: list = []

        cells = [(s.id, off) for s in t.segments if s.id not in self._sections for off in range(s.steps)]
        if total_pallets > len(cells):
            raise ValueError(
                f"{total_pallets} pallets exceed the {len(cells)} loop cells of the layout"
            )
        picks = self.rng.choice(len(cells), size=total_pallets, replace=False)
        self.pallets: list[Pallet] = []
        for pid, c in enumerate(picks):
            sid, off = cells[int(c)]
            p = Pallet(pid, loop=self._loop_of[self._seg[sid].dst])
            self.pallets.append(p)
            self.loop_count[p.loop] += 1
            p.segment = sid
            self.seg_count[sid] += 1
            p.arrive_at = self._seg[sid].steps - off
            self._schedule(p.arrive_at, ("arrive", pid))

        self._out_mean_steps = {}
        self._demand_time = {}
        self._cum_weights = {}
        for k, o in enumerate(t.outgoing):
            rate = demand.rates_per_hour.get(o, 0.0)
            self._cum_weights[o] = np.cumsum(demand.source_weights[o])
            if rate > 0:
                mean = 3600.0 / rate / t.resolution_s
                self._out_mean_steps[o] = mean
                self._demand_time[o] = float(self.rng.exponential(mean))
                self._schedule(max(1, math.ceil(self._demand_time[o])), ("demand", o))
        self.events = self._event_set()

    # -- public queries --------------------------------------------------

    @property
    def done(self) -> bool:
        return self.clock >= self.episode_steps

    @property
    def total_throughput(self) -> int:
        return self.counters.total

    @property
    def node_queues(self) -> dict[str, list[int]]:
        """Pallet ids held in each node's buffer (waiting, in service, awaiting dispatch)."""
        out = {}
        for n, kind in self._kind.items():
            if kind == "junction":
                out[n] = list(self._queue[n])
            else:
                held = list(self._queue[n])
                if self._server[n] is not None:
                    held.insert(0, self._server[n])
                if kind == "incoming":
                    held.extend(self._pending[n])
                out[n] = held
        return out

    @property
    def demand_queue(self) -> dict[str, list[str]]:
        """Unclaimed requests per outgoing point, as source storage ids."""
        out = {o: [] for o in self.topology.outgoing}
        for s, reqs in self.requests.items():
            for o in reqs:
                out[o].append(s)
        return out

    def located_pallets(self) -> int:
        """Pallets accounted for on segments or inside node buffers."""
        return sum(self.seg_count.values()) + sum(self.load.values())

    def buffer_violations(self) -> list[str]:
        return [n for n, c in self.load.items() if c > self._cap[n]]

    def feature_counts(self) -> tuple[list[int], list[int], list[int]]:
        """(pallets heading to each storage, pallets on each junction section, Out - In per storage)."""
        sections = [self.seg_count[self._jdirs[j][1]] for j in self.junction_agents]
        diff = [o - i for o, i in zip(self.outflight, self.heading)]
        return list(self.heading), sections, diff

    def junction_direction_counts(self) -> list[int]:
        """Pallets on both downstream segments of every junction, [j0d0, j0d1, j1d0, ...]."""
        out = []
        for j in self.junction_agents:
            d0, d1 = self._jdirs[j]
            out += [self.seg_count[d0], self.seg_count[d1]]
        return out

    def loop_totals_in(self) -> dict[str, int]:
        """Sum of In(s) over the storages of each loop."""
        out = {loop: 0 for loop in self.topology.loops}
        for s, k in self._storage_idx.items():
            out[self._loop_of[s]] += self.heading[k]
        return out

    def snapshot(self) -> dict:
        """Plain-data copy of the full state, for equality checks."""
        return {
            "clock": self.clock,
            "pallets": [
                (p.id, p.phase, p.cargo, p.node, p.segment, p.arrive_at, p.destination, tuple(p.route),
                 p.source, p.target, p.loop, p.ready_at, p.direction, p.held)
                for p in self.pallets
            ],
            "queues": {n: tuple(q) for n, q in self._queue.items()},
            "server": dict(self._server),
            "pending": {a: tuple(q) for a, q in self._pending.items()},
            "blocked": {j: tuple(q) for j, q in self._blocked.items()},
            "requests": {s: tuple(q) for s, q in self.requests.items()},
            "counters": (self.counters.receiving, self.counters.shipping, self.counters.per_step_delta),
            "heading": tuple(self.heading),
            "outflight": tuple(self.outflight),
            "agenda": {k: tuple(v) for k, v in sorted(self._agenda.items())},
            "overrides": tuple(self.override_log),
            "rng": repr(self.rng.bit_generator.state),
        }

    def fingerprint(self) -> str:
        return hashlib.sha256(repr(self.snapshot()).encode()).hexdigest()

    def action_dim(self, agent_id: str) -> int:
        if agent_id in self._jdirs:
            return 2
        if self._kind.get(agent_id) == "incoming":
            return len(self.storages)
        raise KeyError(f"unknown agent {agent_id!r}")

    # -- stepping --------------------------------------------------------

    def step(self, dispatch: Mapping[str, int | None] | None = None) -> tuple[EventSet, float]:
        """Apply pending decisions, advance one tick, and report new events."""
        if self.done:
            raise EpisodeOverError(f"episode finished at step {self.episode_steps}")
        dispatch = dispatch or {}
        pending = self.events.pending
        for agent, action in dispatch.items():
            if action is not None and agent not in pending:
                if agent not in self._pending:
                    raise ExtraActionError(f"unknown agent {agent!r}")
                raise ExtraActionError(f"agent {agent} has no pending decision")
        decisions = []
        for agent in pending:
            action = dispatch.get(agent)
            if action is None:
                raise MissingActionError(f"agent {agent} is flagged but no action was given")
            action = int(action)
            if not 0 <= action < self.action_dim(agent):
                raise ActionRangeError(
                    f"action {action} out of range for {agent} (dim {self.action_dim(agent)})"
                )
            decisions.append((agent, action))

        self._delta = 0
        self._step_trace = []
        now = self.clock
        for agent, action in decisions:
            self._apply(agent, action, now)

        now = self.clock = now + 1
        for ev in self._agenda.pop(now, ()):
            kind = ev[0]
            if kind == "arrive":
                self._arrive(self.pallets[ev[1]], now)
            elif kind == "done":
                self._service_done(ev[1], now)
            else:
                self._demand_arrival(ev[1], now)
        for j in self.junction_agents:
            if self._queue[j]:
                self._junction_depart(j, now)

        self.counters.per_step_delta = self._delta
        reward = self._delta * self.reward_scale
        if self.record_trace:
            for agent, event, req, app, cause in self._step_trace:
                self.trace.append(TraceRecord(now, agent, event, req, app, cause, reward))
        self.events = self._event_set()
        return self.events, reward

    def _event_set(self) -> EventSet:
        pend = {}
        for a, q in self._pending.items():
            if q:
                pid = q[0]
                pend[a] = (a, pid)
        return EventSet({a: a in pend for a in self.agents}, pend)

    # -- internals -------------------------------------------------------

    def _schedule(self, when: int, event: tuple) -> None:
        bucket = self._agenda.get(when)
        if bucket is None:
            self._agenda[when] = [event]
        else:
            bucket.append(event)

    def _log_override(self, now, node, requested, applied, cause):
        self.override_log.append(ActionOverride(now, node, requested, applied, cause))
        if self.record_trace:
            self._step_trace.append((node, "override", requested, applied, cause))

    def _enter_segment(self, p: Pallet, sid: str, now: int) -> None:
        p.node = None
        p.segment = sid
        self.seg_count[sid] += 1
        if sid in self._sections:
            new_loop = self._loop_of[self._seg[sid].dst]
            self.loop_count[p.loop] -= 1
            self.loop_count[new_loop] += 1
            p.loop = new_loop
            p.phase = EMPTY_DIRECTED if p.cargo is None else _TRAVEL_PHASE[p.cargo]
        else:
            p.phase = _TRAVEL_PHASE[p.cargo]
        p.arrive_at = now + self._seg[sid].steps
        self._schedule(p.arrive_at, ("arrive", p.id))

    def _pass(self, p: Pallet, node: str, now: int) -> None:
        if p.cargo is not None:
            sid = p.route.popleft()
        else:
            sid = self._loop_next[node]
        self.seg_count[p.segment] -= 1
        self._enter_segment(p, sid, now)

    def _reroute(self, p: Pallet, node: str, now: int) -> None:
        nxt = self._loop_next[node]
        p.route = deque((nxt,) + self.topology.shortest_route(self._seg[nxt].dst, p.destination))
        self._log_override(now, node, 1, 0, BUFFER_FULL_REROUTE)
        self._pass(p, node, now)

    def _enqueue(self, p: Pallet, node: str, now: int) -> None:
        self.seg_count[p.segment] -= 1
        p.segment = None
        p.node = node
        p.phase = QUEUED
        self.load[node] += 1
        self._queue[node].append(p.id)
        if self._server[node] is None:
            self._start_service(node, now)

    def _start_service(self, node: str, now: int) -> None:
        pid = self._queue[node].popleft()
        self._server[node] = pid
        self.pallets[pid].phase = PROCESSING
        self._begin(node, now)

    def _begin(self, node: str, now: int) -> None:
        until = now + self._proc[node]
        self.node_busy_until[node] = until
        self._schedule(until, ("done", node))

    def _release(self, p: Pallet, node: str, now: int) -> None:
        self.load[node] -= 1
        self._enter_segment(p, p.route.popleft() if p.cargo else self._loop_next[node], now)

    def _arrive(self, p: Pallet, now: int) -> None:
        node = self._seg[p.segment].dst
        kind = self._kind[node]
        if kind == "junction":
            if self.load[node] < self._cap[node]:
                self._junction_admit(p, node, now)
            else:
                self._blocked[node].append(p.id)
            return
        room = self.load[node] < self._cap[node]
        if p.cargo is not None:
            if p.destination == node:
                if room:
                    self._enqueue(p, node, now)
                else:
                    self._reroute(p, node, now)
            else:
                self._pass(p, node, now)
        elif kind == "incoming" and room:
            self._enqueue(p, node, now)
        elif kind == "storage" and room and self.requests[node]:
            p.target = self.requests[node].popleft()
            self._enqueue(p, node, now)
        else:
            self._pass(p, node, now)

    def _service_done(self, node: str, now: int) -> None:
        p = self.pallets[self._server[node]]
        kind = self._kind[node]
        if kind == "incoming":
            p.cargo = "receiving"
            p.phase = QUEUED
            self._pending[node].append(p.id)
        elif kind == "storage":
            k = self._storage_idx[node]
            if p.cargo == "receiving":
                self.counters.receiving += 1
                self._delta += 1
                self.heading[k] -= 1
                p.cargo = None
                p.destination = None
                if self.requests[node]:
                    p.target = self.requests[node].popleft()
                    self._begin(node, now)
                    return
                self._release(p, node, now)
            else:
                p.cargo = "shipping"
                p.source = node
                p.destination = p.target
                p.target = None
                p.route = deque(self.topology.shortest_route(node, p.destination))
                self.outflight[k] += 1
                self._release(p, node, now)
        else:
            self.counters.shipping += 1
            self._delta += 1
            self.outflight[self._storage_idx[p.source]] -= 1
            p.cargo = None
            p.destination = None
            p.source = None
            self._release(p, node, now)
        self._server[node] = None
        if self._queue[node]:
            self._start_service(node, now)

    def _demand_arrival(self, outgoing: str, now: int) -> None:
        mean = self._out_mean_steps[outgoing]
        cum = self._cum_weights[outgoing]
        while True:
            k = min(int(np.searchsorted(cum, self.rng.random(), side="right")), len(cum) - 1)
            self.requests[self.storages[k]].append(outgoing)
            self._demand_time[outgoing] += float(self.rng.exponential(mean))
            nxt = max(1, math.ceil(self._demand_time[outgoing]))
            if nxt > now:
                self._schedule(nxt, ("demand", outgoing))
                return

    def _junction_admit(self, p: Pallet, j: str, now: int) -> None:
        self.seg_count[p.segment] -= 1
        p.segment = None
        p.node = j
        p.phase = QUEUED
        p.ready_at = now + self._proc[j]
        p.held = False
        self.load[j] += 1
        self._queue[j].append(p.id)
        if p.cargo is None:
            p.direction = None
            self._pending[j].append(p.id)
        else:
            p.direction = 1 if p.route[0] == self._jdirs[j][1] else 0

    def _junction_depart(self, j: str, now: int) -> None:
        q = self._queue[j]
        dirs = self._jdirs[j]
        while q:
            p = self.pallets[q[0]]
            if p.ready_at > now or p.direction is None:
                break
            req = p.direction
            if self.seg_count[dirs[req]] < self._seg_cap[dirs[req]]:
                applied = req
            elif self.seg_count[dirs[1 - req]] < self._seg_cap[dirs[1 - req]]:
                applied = 1 - req
                self._log_override(now, j, req, applied, SECTION_FULL_REDIRECT)
            else:
                if not p.held:
                    p.held = True
                    self._log_override(now, j, req, -1, SECTION_FULL_HOLD)
                break
            q.popleft()
            self.load[j] -= 1
            sid = dirs[applied]
            if p.cargo is not None:
                if applied == req:
                    p.route.popleft()
                else:
                    p.route = deque(self.topology.shortest_route(self._seg[sid].dst, p.destination))
            p.direction = None
            p.held = False
            self._enter_segment(p, sid, now)
            blocked = self._blocked[j]
            while blocked and self.load[j] < self._cap[j]:
                self._junction_admit(self.pallets[blocked.popleft()], j, now)

    def _apply(self, agent: str, action: int, now: int) -> None:
        pid = self._pending[agent].popleft()
        p = self.pallets[pid]
        if agent in self._jdirs:
            p.direction = action
        else:
            storage = self.storages[action]
            p.destination = storage
            p.route = deque(self.topology.shortest_route(agent, storage))
            self.heading[action] += 1
            self._release(p, agent, now)
        if self.record_trace:
            self._step_trace.append((agent, "dispatch", action, action, ""))


def init(
    topology: Topology,
    demand: DemandModel | None = None,
    total_pallets: int = DEFAULT_TOTAL_PALLETS,
    seed: int = 0,
    **kwargs,
) -> SimState:
    if demand is None:
        demand = DemandModel.default(topology)
    return SimState(topology, demand, total_pallets, seed, **kwargs)


Policy = Callable[[str, SimState], int]


def run_episode_with_policy(
    state: SimState, policy: Policy, record_trace: bool = False
) -> tuple[int, list[TraceRecord]]:
    """Step ``state`` to the end of its episode, asking ``policy(agent, state)`` for every decision."""
    if record_trace:
        state.record_trace = True
    while not state.done:
        actions = {a: policy(a, state) for a in state.events.pending}
        state.step(actions)
    return state.total_throughput, list(state.trace)
