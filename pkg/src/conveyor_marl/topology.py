"""Conveyor layout: loops of timed segments connecting decision points.

The layout is a directed graph. Every node sits on exactly one loop; the
loop segments of a loop form a single directed cycle. Junction nodes have a
second outgoing segment (a connecting section) that leads onto another loop.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Any, Iterable

import yaml

NODE_KINDS = ("incoming", "storage", "outgoing", "junction")

DEFAULT_RESOLUTION_S = 0.1
DEFAULT_LOOP_STEPS = 1200
DEFAULT_SECTION_STEPS = 100
DEFAULT_SECTION_CAPACITY = 10

# kind -> (buffer capacity, processing time in seconds)
DEFAULT_NODE_PARAMS = {
    "incoming": (4, 5.0),
    "storage": (8, 10.0),
    "outgoing": (10, 6.0),
    "junction": (DEFAULT_SECTION_CAPACITY, 0.5),
}


class TopologyError(ValueError):
    pass


class SchemaError(TopologyError):
    """The layout document is malformed."""


class InvariantError(TopologyError):
    """The layout is well-formed but violates a structural invariant."""


class NoPathError(TopologyError):
    pass


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    loop: str | None
    buffer_capacity: int
    processing_time_s: float


@dataclass(frozen=True)
class Segment:
    id: str
    src: str
    dst: str
    steps: int


@dataclass(frozen=True)
class JunctionLink:
    junction: str
    dir0: str  # stays on the junction's own loop
    dir1: str  # connecting section onto the neighbouring loop


@dataclass(frozen=True, eq=False)
class Topology:
    loops: tuple[str, ...]
    nodes: tuple[Node, ...]
    segments: tuple[Segment, ...]
    junction_links: tuple[JunctionLink, ...]
    connecting_section_capacity: int = DEFAULT_SECTION_CAPACITY
    resolution_s: float = DEFAULT_RESOLUTION_S
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        _validate(self)
        idx = self._index
        idx["node"] = {n.id: n for n in self.nodes}
        idx["segment"] = {s.id: s for s in self.segments}
        idx["junction"] = {j.junction: j for j in self.junction_links}
        out: dict[str, list[Segment]] = {n.id: [] for n in self.nodes}
        for s in self.segments:
            out[s.src].append(s)
        for v in out.values():
            v.sort(key=lambda s: s.id)
        idx["out"] = out
        sections = {j.dir1 for j in self.junction_links}
        idx["loop_next"] = {
            n.id: next(s.id for s in out[n.id] if s.id not in sections) for n in self.nodes
        }
        idx["dist"] = _all_pairs(self)
        idx["routes"] = {}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Topology):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def _key(self) -> tuple:
        return (
            self.loops,
            self.nodes,
            self.segments,
            self.junction_links,
            self.connecting_section_capacity,
            self.resolution_s,
        )

    # -- lookups ---------------------------------------------------------

    def node(self, node_id: str) -> Node:
        try:
            return self._index["node"][node_id]
        except KeyError:
            raise KeyError(f"unknown node {node_id!r}") from None

    def segment(self, segment_id: str) -> Segment:
        try:
            return self._index["segment"][segment_id]
        except KeyError:
            raise KeyError(f"unknown segment {segment_id!r}") from None

    def junction(self, junction_id: str) -> JunctionLink:
        try:
            return self._index["junction"][junction_id]
        except KeyError:
            raise KeyError(f"unknown junction {junction_id!r}") from None

    def ids_of_kind(self, kind: str) -> tuple[str, ...]:
        return tuple(n.id for n in self.nodes if n.kind == kind)

    @property
    def incoming(self) -> tuple[str, ...]:
        return self.ids_of_kind("incoming")

    @property
    def storages(self) -> tuple[str, ...]:
        return self.ids_of_kind("storage")

    @property
    def outgoing(self) -> tuple[str, ...]:
        return self.ids_of_kind("outgoing")

    @property
    def junctions(self) -> tuple[str, ...]:
        return self.ids_of_kind("junction")

    def out_segments(self, node_id: str) -> list[Segment]:
        return list(self._index["out"][node_id])

    def loop_next(self, node_id: str) -> str:
        """Id of the loop segment leaving ``node_id``."""
        return self._index["loop_next"][node_id]

    def is_section(self, segment_id: str) -> bool:
        s = self.segment(segment_id)
        return self.node(s.src).loop != self.node(s.dst).loop

    def processing_steps(self, node_id: str) -> int:
        return max(1, round(self.node(node_id).processing_time_s / self.resolution_s))

    def segment_capacity(self, segment_id: str) -> int:
        """Pallets a segment can hold: one per cell, sections capped separately."""
        if self.is_section(segment_id):
            return self.connecting_section_capacity
        return self.segment(segment_id).steps

    # -- routing ---------------------------------------------------------

    def distance(self, src: str, dst: str) -> float:
        return self._index["dist"][src][dst]

    def shortest_route(self, src: str, dst: str) -> tuple[str, ...]:
        """Minimal-steps segment path; ties go to the smallest segment id at each hop."""
        self.node(src)
        self.node(dst)
        cache = self._index["routes"]
        key = (src, dst)
        if key in cache:
            return cache[key]
        dist = self._index["dist"]
        if dist[src][dst] == float("inf"):
            raise NoPathError(f"no path from {src} to {dst}")
        route = []
        here = src
        while here != dst:
            best = min(
                self._index["out"][here],
                key=lambda s: (s.steps + dist[s.dst][dst], s.id),
            )
            route.append(best.id)
            here = best.dst
        cache[key] = tuple(route)
        return cache[key]

    def route_cost(self, route: Iterable[str]) -> int:
        return sum(self.segment(s).steps for s in route)

    # -- loop membership -------------------------------------------------

    def loop_membership(self, node_id: str) -> str:
        return self.node(node_id).loop

    def loop_index(self, loop_id: str) -> int:
        return self.loops.index(loop_id)

    def storages_on_loop(self, loop_id: str) -> tuple[str, ...]:
        return tuple(s for s in self.storages if self.node(s).loop == loop_id)

    def same_loop_storages(self, incoming_id: str) -> frozenset[str]:
        node = self.node(incoming_id)
        if node.kind != "incoming":
            raise TopologyError(f"{incoming_id} is a {node.kind} node, not an incoming point")
        return frozenset(self.storages_on_loop(node.loop))

    def other_loop_storages(self, incoming_id: str) -> frozenset[str]:
        return frozenset(self.storages) - self.same_loop_storages(incoming_id)

    def junction_loops(self, junction_id: str) -> tuple[str, str]:
        """Loops reached by direction 0 and direction 1 of a junction."""
        link = self.junction(junction_id)
        return (
            self.node(self.segment(link.dir0).dst).loop,
            self.node(self.segment(link.dir1).dst).loop,
        )

    # -- serialization ---------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        return {
            "loops": list(self.loops),
            "nodes": [
                {
                    "id": n.id,
                    "kind": n.kind,
                    "loop": n.loop,
                    "buffer": n.buffer_capacity,
                    "proc_time_s": n.processing_time_s,
                }
                for n in self.nodes
            ],
            "segments": [
                {"id": s.id, "from": s.src, "to": s.dst, "steps": s.steps} for s in self.segments
            ],
            "junctions": [
                {"id": j.junction, "dir0_segment": j.dir0, "dir1_segment": j.dir1}
                for j in self.junction_links
            ],
            "limits": {
                "connecting_section_capacity": self.connecting_section_capacity,
                "resolution_s": self.resolution_s,
            },
        }

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_document(), sort_keys=False)


def _all_pairs(t: Topology) -> dict[str, dict[str, float]]:
    out: dict[str, list[Segment]] = {n.id: [] for n in t.nodes}
    for s in t.segments:
        out[s.src].append(s)
    table = {}
    for src in out:
        dist = {n: float("inf") for n in out}
        dist[src] = 0
        heap = [(0, src)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for s in out[u]:
                nd = d + s.steps
                if nd < dist[s.dst]:
                    dist[s.dst] = nd
                    heapq.heappush(heap, (nd, s.dst))
        table[src] = dist
    return table


def _validate(t: Topology) -> None:
    node_ids = [n.id for n in t.nodes]
    if len(set(node_ids)) != len(node_ids):
        raise SchemaError("duplicated node id")
    seg_ids = [s.id for s in t.segments]
    dup = {s for s in seg_ids if seg_ids.count(s) > 1}
    if dup:
        raise SchemaError(f"duplicated segment id(s): {sorted(dup)}")
    if len(set(t.loops)) != len(t.loops):
        raise SchemaError("duplicated loop id")
    if t.connecting_section_capacity < 1:
        raise SchemaError("connecting_section_capacity must be >= 1")
    if t.resolution_s <= 0:
        raise SchemaError("resolution_s must be positive")
    nodes = {n.id: n for n in t.nodes}
    for n in t.nodes:
        if n.kind not in NODE_KINDS:
            raise SchemaError(f"node {n.id}: unknown kind {n.kind!r}")
        if n.buffer_capacity < 1:
            raise SchemaError(f"node {n.id}: buffer must be >= 1")
        if n.processing_time_s < 0:
            raise SchemaError(f"node {n.id}: negative processing time")
        if n.loop not in t.loops:
            raise InvariantError(f"node {n.id} lies on no loop")
    for s in t.segments:
        if s.src not in nodes or s.dst not in nodes:
            raise SchemaError(f"segment {s.id} references an unknown node")
        if s.steps < 1:
            raise SchemaError(f"segment {s.id}: steps must be >= 1")

    links = {j.junction: j for j in t.junction_links}
    seg_by_id = {s.id: s for s in t.segments}
    for j in t.junction_links:
        if j.junction not in nodes or nodes[j.junction].kind != "junction":
            raise SchemaError(f"junction link {j.junction} does not name a junction node")
        for sid in (j.dir0, j.dir1):
            if sid not in seg_by_id:
                raise SchemaError(f"junction {j.junction}: unknown segment {sid}")
            if seg_by_id[sid].src != j.junction:
                raise InvariantError(f"junction {j.junction}: segment {sid} does not leave it")
        if nodes[seg_by_id[j.dir0].dst].loop != nodes[j.junction].loop:
            raise InvariantError(f"junction {j.junction}: dir0 must stay on its loop")
        if nodes[seg_by_id[j.dir1].dst].loop == nodes[j.junction].loop:
            raise InvariantError(f"junction {j.junction}: dir1 must lead to another loop")

    out: dict[str, list[Segment]] = {n: [] for n in nodes}
    for s in t.segments:
        out[s.src].append(s)
    for n in t.nodes:
        want = 2 if n.kind == "junction" else 1
        if len(out[n.id]) != want:
            raise InvariantError(
                f"node {n.id} ({n.kind}) has {len(out[n.id])} downstream segments, expected {want}"
            )
        if n.kind == "junction" and n.id not in links:
            raise InvariantError(f"junction {n.id} has no junction link")
    for s in t.segments:
        src, dst = nodes[s.src], nodes[s.dst]
        if src.loop != dst.loop and (src.kind != "junction" or links[src.id].dir1 != s.id):
            raise InvariantError(f"segment {s.id} crosses loops outside a junction section")

    for loop in t.loops:
        members = [n.id for n in t.nodes if n.loop == loop]
        if not members:
            raise InvariantError(f"loop {loop} has no nodes")
        succ = {}
        for s in t.segments:
            if nodes[s.src].loop == loop and nodes[s.dst].loop == loop:
                succ[s.src] = s.dst
        seen = [members[0]]
        here = succ.get(members[0])
        while here is not None and here != members[0] and here not in seen:
            seen.append(here)
            here = succ.get(here)
        if here != members[0] or len(seen) != len(members):
            raise InvariantError(f"loop {loop} segments do not form a single cycle")

    dist = _all_pairs(t)
    for i in (n.id for n in t.nodes if n.kind == "incoming"):
        for s in (n.id for n in t.nodes if n.kind == "storage"):
            if dist[i][s] == float("inf"):
                raise InvariantError(f"storage {s} unreachable from incoming {i}")


def _split_even(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


# Cycle order of each loop in the default preset.
DEFAULT_LOOP_ORDER = {
    "L0": ["I0", "S00", "S01", "O0", "S02", "S03", "J0", "I1", "S04", "S05", "O1", "S06"],
    "L1": ["I2", "S07", "S08", "J1", "S09", "O2", "S10", "J2", "S11", "S12", "O3", "S13"],
    "L2": ["I3", "S14", "S15", "O4", "S16", "J3", "S17", "S18", "O5", "S19"],
}
# junction -> its partner junction on the neighbouring loop
DEFAULT_JUNCTION_PAIRS = {"J0": "J1", "J1": "J0", "J2": "J3", "J3": "J2"}


def build_layout(
    loop_order: dict[str, list[str]],
    junction_pairs: dict[str, str],
    loop_steps: int = DEFAULT_LOOP_STEPS,
    section_steps: int = DEFAULT_SECTION_STEPS,
    section_capacity: int = DEFAULT_SECTION_CAPACITY,
    node_params: dict[str, tuple[int, float]] | None = None,
    resolution_s: float = DEFAULT_RESOLUTION_S,
) -> Topology:
    """Build a layout from loop cycle orders and junction pairings.

    Node kinds are read from the id prefix (I/S/O/J). Each loop's
    circumference is split evenly over its segments; a junction's section
    enters the partner loop at the node right after the partner junction.
    """
    params = dict(DEFAULT_NODE_PARAMS)
    if node_params:
        params.update(node_params)
    params["junction"] = (section_capacity, params["junction"][1])
    prefix = {"I": "incoming", "S": "storage", "O": "outgoing", "J": "junction"}

    nodes, segments, links = [], [], []
    successor = {}
    for loop, order in loop_order.items():
        lengths = _split_even(loop_steps, len(order))
        for k, nid in enumerate(order):
            kind = prefix[nid[0]]
            buf, proc = params[kind]
            nodes.append(Node(nid, kind, loop, buf, proc))
            nxt = order[(k + 1) % len(order)]
            successor[nid] = nxt
            segments.append(Segment(f"{loop}.{k:02d}", nid, nxt, lengths[k]))
    loop_seg = {s.src: s.id for s in segments}
    for j in sorted(junction_pairs):
        sid = f"X.{j}"
        segments.append(Segment(sid, j, successor[junction_pairs[j]], section_steps))
        links.append(JunctionLink(j, loop_seg[j], sid))
    return Topology(
        loops=tuple(loop_order),
        nodes=tuple(nodes),
        segments=tuple(segments),
        junction_links=tuple(links),
        connecting_section_capacity=section_capacity,
        resolution_s=resolution_s,
    )


def build_default_preset() -> Topology:
    """Three loops chained L0 <-> L1 <-> L2; 4 incoming, 20 storage, 6 outgoing, 4 junctions."""
    return build_layout(DEFAULT_LOOP_ORDER, DEFAULT_JUNCTION_PAIRS)


_REQUIRED = {
    "nodes": ("id", "kind", "loop", "buffer", "proc_time_s"),
    "segments": ("id", "from", "to", "steps"),
    "junctions": ("id", "dir0_segment", "dir1_segment"),
}


def load_topology(document: str | dict, resolution_s: float | None = None) -> Topology:
    """Parse and validate a layout document (YAML text or an already-parsed mapping)."""
    if isinstance(document, str):
        try:
            document = yaml.safe_load(document)
        except yaml.YAMLError as exc:
            raise SchemaError(f"unparseable layout: {exc}") from exc
    if not isinstance(document, dict):
        raise SchemaError("layout must be a mapping")
    for key in ("loops", "nodes", "segments", "junctions"):
        if not isinstance(document.get(key), list):
            raise SchemaError(f"layout section [{key}] missing or not a list")
    for section, fields in _REQUIRED.items():
        for k, item in enumerate(document[section]):
            if not isinstance(item, dict):
                raise SchemaError(f"[{section}] entry {k} is not a mapping")
            missing = [f for f in fields if f not in item]
            if missing:
                raise SchemaError(f"[{section}] entry {k} missing {missing}")
    limits = document.get("limits") or {}
    if resolution_s is None:
        resolution_s = float(limits.get("resolution_s", DEFAULT_RESOLUTION_S))

    def _int(v, what):
        if isinstance(v, bool) or not isinstance(v, int):
            raise SchemaError(f"{what} must be an integer, got {v!r}")
        return v

    try:
        nodes = tuple(
            Node(
                str(n["id"]),
                str(n["kind"]),
                None if n["loop"] is None else str(n["loop"]),
                _int(n["buffer"], f"node {n['id']} buffer"),
                float(n["proc_time_s"]),
            )
            for n in document["nodes"]
        )
        segments = tuple(
            Segment(str(s["id"]), str(s["from"]), str(s["to"]), _int(s["steps"], f"segment {s['id']} steps"))
            for s in document["segments"]
        )
        links = tuple(
            JunctionLink(str(j["id"]), str(j["dir0_segment"]), str(j["dir1_segment"]))
            for j in document["junctions"]
        )
        capacity = _int(
            limits.get("connecting_section_capacity", DEFAULT_SECTION_CAPACITY),
            "connecting_section_capacity",
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, TopologyError):
            raise
        raise SchemaError(str(exc)) from exc
    return Topology(
        loops=tuple(str(x) for x in document["loops"]),
        nodes=nodes,
        segments=segments,
        junction_links=links,
        connecting_section_capacity=capacity,
        resolution_s=resolution_s,
    )
