"""Seeded evaluation, summaries, experiment presets and report I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import tempfile
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from . import marl
from .env import JUNCTION, RECEIVING, ConveyorEnv, EnvConfig, normalization_hash
from .heuristics import RECEIVING_HEURISTICS, HeuristicParams
from .marl import MarlError, PolicySet, TrainConfig
from .topology import Topology, TopologyError, build_default_preset, load_topology

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STRATEGIES = RECEIVING_HEURISTICS + ("marl_checkpoint", "hybrid_marl_checkpoint")
ASSIST_MODES = ("assisted", "non_assisted")
PRESETS = ("heuristic_comparison", "marl_vs_heuristics", "hybrid_critics", "marl_star")
CSV_COLUMNS = ["schema_version", "preset", "config_hash", "complete", "strategy", "seed", "total"]


class ConfigError(ValueError):
    pass


# -- configuration -------------------------------------------------------

BUILTIN_CONFIGS: dict[str, dict] = {
    "full": {
        "env": {"episode_steps": 36000},
        "train": {"episodes": 300},
        "eval": {"episodes": 150, "base_seed": 0},
    },
    "desk": {
        "env": {"episode_steps": 3600},
        "train": {"episodes": 60},
        "eval": {"episodes": 30, "base_seed": 0},
    },
}

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"env", "heuristics", "frozen_bundle"}
_ENV_KEYS = {f.name for f in fields(EnvConfig)}
_HEUR_KEYS = {f.name for f in fields(HeuristicParams)}
_EVAL_KEYS = {"episodes", "base_seed"}


@dataclass
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    topology: Topology = field(default_factory=build_default_preset)
    heuristics: HeuristicParams = field(default_factory=HeuristicParams)
    train: dict = field(default_factory=dict)
    eval_episodes: int = 150
    eval_base_seed: int = 0

    def make_env(self) -> ConveyorEnv:
        return ConveyorEnv(self.env, self.topology)

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(self.train)
        kw.update(overrides)
        try:
            return TrainConfig(env=self.env, heuristics=self.heuristics, **kw)
        except (MarlError, TypeError, ValueError) as exc:
            raise ConfigError(f"train section: {exc}") from exc

    def to_dict(self) -> dict:
        env = self.env.__dict__.copy()
        env["demand_rates"] = list(env["demand_rates"])
        return {
            "env": env,
            "topology": self.topology.to_document(),
            "heuristics": self.heuristics.to_dict(),
            "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.train.items())},
            "eval": {"episodes": self.eval_episodes, "base_seed": self.eval_base_seed},
        }

    def config_hash(self, extra: Mapping | None = None) -> str:
        doc = {"config": self.to_dict(), "extra": dict(extra or {})}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def _section(doc: Mapping, name: str, allowed: set[str]) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, Mapping):
        raise ConfigError(f"[{name}] must be a mapping")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"[{name}] has unknown keys {sorted(unknown)}")
    return dict(sec)


def config_from_document(doc: Mapping | None, base_dir: Path | None = None) -> RunConfig:
    doc = doc or {}
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a mapping")
    unknown = set(doc) - {"env", "topology", "heuristics", "train", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    try:
        env = EnvConfig(**_section(doc, "env", _ENV_KEYS))
        h = _section(doc, "heuristics", _HEUR_KEYS)
        if "cost_matrix" in h:
            h["cost_matrix"] = tuple(tuple(r) for r in h["cost_matrix"])
        heur = HeuristicParams(**h)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    topo_doc = doc.get("topology")
    try:
        if topo_doc is None:
            topology = build_default_preset()
        elif isinstance(topo_doc, Mapping) and set(topo_doc) == {"file"}:
            path = Path(topo_doc["file"])
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            topology = load_topology(path.read_text())
        else:
            topology = load_topology(topo_doc)
    except (OSError, TopologyError) as exc:
        raise ConfigError(f"topology: {exc}") from exc
    train = _section(doc, "train", _TRAIN_KEYS)
    ev = _section(doc, "eval", _EVAL_KEYS)
    rc = RunConfig(env, topology, heur, train, int(ev.get("episodes", 150)), int(ev.get("base_seed", 0)))
    if rc.eval_episodes < 1:
        raise ConfigError("eval episodes must be >= 1")
    rc.train_config()  # validate early
    return rc


def load_config(source: str | Path | None = None) -> RunConfig:
    """Load a YAML config file, or one of the built-in names ``full`` / ``desk``."""
    if source is None:
        return config_from_document(BUILTIN_CONFIGS["full"])
    if str(source) in BUILTIN_CONFIGS:
        return config_from_document(BUILTIN_CONFIGS[str(source)])
    path = Path(source)
    try:
        doc = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return config_from_document(doc, path.parent)


# -- evaluation ----------------------------------------------------------


@dataclass
class EvalConfig:
    strategy: str = "high"
    assist: str = "non_assisted"
    episodes: int = 150
    base_seed: int = 0
    episode_steps: int | None = None
    checkpoint: str | None = None

    def __post_init__(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.assist not in ASSIST_MODES:
            raise ConfigError(f"assist must be one of {ASSIST_MODES}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        is_marl = self.strategy.endswith("checkpoint")
        if is_marl and not self.checkpoint:
            raise ConfigError(f"strategy {self.strategy} needs a checkpoint")
        if self.assist == "assisted" and not is_marl:
            raise ConfigError("assisted evaluation needs a checkpoint strategy with a bound heuristic")

    @property
    def seeds(self) -> list[int]:
        return [self.base_seed + k for k in range(self.episodes)]


def rollout_heuristic(env: ConveyorEnv, name: str, seed: int, params: HeuristicParams | None = None,
                      record_trace: bool = False) -> int:
    binding = marl.base_binding(env, name, params)
    res = env.reset(seed, record_trace=record_trace)
    while not res.done:
        res = env.step({a: binding[a](env.dispatch_context(a)) for a in res.flagged()})
    return env.state.total_throughput


def load_checkpoint_for_env(env: ConveyorEnv, path, strategy: str) -> tuple[PolicySet, dict]:
    try:
        ps, manifest = PolicySet.load(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint bundle {path}: {exc}") from exc
    if manifest["norm_hash"] != normalization_hash(env.norm):
        raise ConfigError("checkpoint observation encoding does not match the env config")
    unknown = set(ps.actors) - set(env.agents)
    if unknown:
        raise ConfigError(f"checkpoint has actors for unknown agents {sorted(unknown)}")
    for a, p in ps.actors.items():
        if p.sizes[0] != env.obs_dim or p.sizes[-1] != env.agent_specs[a].action_dim:
            raise ConfigError(f"checkpoint actor {a} has shape {p.sizes} incompatible with the env")
    classes = set(ps.agent_class.values())
    if strategy == "hybrid_marl_checkpoint" and classes != {RECEIVING, JUNCTION}:
        raise ConfigError("hybrid_marl_checkpoint needs receiving and junction actors")
    if strategy == "marl_checkpoint" and JUNCTION in classes:
        raise ConfigError("marl_checkpoint expects receiving actors only; use hybrid_marl_checkpoint")
    return ps, manifest


def run_eval(cfg: EvalConfig, run: RunConfig | None = None) -> list[int]:
    """Per-episode throughput for seeds base, base+1, ..."""
    run = run or RunConfig()
    if cfg.episode_steps is not None:
        run = replace(run, env=replace(run.env, episode_steps=cfg.episode_steps))
    env = run.make_env()
    if not cfg.strategy.endswith("checkpoint"):
        return [rollout_heuristic(env, cfg.strategy, s, run.heuristics) for s in cfg.seeds]
    ps, manifest = load_checkpoint_for_env(env, cfg.checkpoint, cfg.strategy)
    try:
        binding = marl.binding_from_manifest(env, manifest, run.heuristics)
    except (MarlError, OSError) as exc:
        raise ConfigError(f"checkpoint heuristic binding: {exc}") from exc
    bufs = marl.evaluate_policy(env, ps, cfg.seeds, binding, cfg.assist == "assisted",
                                manifest.get("parity", "global"))
    return [b.throughput for b in bufs]


# -- statistics ----------------------------------------------------------


@dataclass(frozen=True)
class ThroughputSummary:
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float
    n: int

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("min", "q1", "median", "q3", "max", "mean", "n")}


def _median(xs: Sequence[float]) -> float:
    n = len(xs)
    mid = n // 2
    return float(xs[mid]) if n % 2 else (xs[mid - 1] + xs[mid]) / 2.0


def summarize(totals: Sequence[float]) -> ThroughputSummary:
    """Five-number summary; quartiles are medians of the lower/upper halves,
    leaving out the middle element when n is odd."""
    if len(totals) == 0:
        raise ValueError("cannot summarize an empty list")
    xs = sorted(float(t) for t in totals)
    n = len(xs)
    med = _median(xs)
    if n == 1:
        q1 = q3 = med
    else:
        q1 = _median(xs[: n // 2])
        q3 = _median(xs[(n + 1) // 2 :])
    return ThroughputSummary(xs[0], q1, med, q3, xs[-1], float(np.mean(xs)), n)


def percent_improvement(baseline: float, candidate: float) -> float:
    if baseline <= 0:
        raise ValueError("baseline median must be positive")
    return 100.0 * (candidate - baseline) / baseline


# -- reports -------------------------------------------------------------


@dataclass
class StrategyResult:
    name: str
    seeds: list[int]
    totals: list[int]

    @property
    def summary(self) -> ThroughputSummary:
        return summarize(self.totals)


@dataclass
class ExperimentReport:
    preset: str
    config_hash: str
    strategies: list[StrategyResult]
    pairs: list[tuple[str, str]]
    complete: bool = True
    provenance: dict = field(default_factory=dict, compare=False)

    def result(self, name: str) -> StrategyResult:
        for s in self.strategies:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def improvements(self) -> list[dict]:
        out = []
        for base, cand in self.pairs:
            b, c = self.result(base).summary.median, self.result(cand).summary.median
            out.append({"baseline": base, "candidate": cand, "percent": percent_improvement(b, c)})
        return out

    def to_json_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "preset": self.preset,
            "config_hash": self.config_hash,
            "complete": self.complete,
            "strategies": [
                {"name": s.name, "seeds": list(s.seeds), "totals": list(s.totals), "summary": s.summary.as_dict()}
                for s in self.strategies
            ],
            "improvements": self.improvements,
            "provenance": self.provenance,
        }


def default_pairs(preset: str, names: Sequence[str]) -> list[tuple[str, str]]:
    """Improvement pairs (baseline, candidate) compiled for a preset."""
    names = list(names)
    if preset == "marl_vs_heuristics":
        out = []
        for h in ("low", "medium", "high"):
            for mode in ("assisted", "non_assisted"):
                cand = f"marl_{h}_{mode}"
                if h in names and cand in names:
                    out.append((h, cand))
        return out
    if preset == "hybrid_critics":
        return [("high", n) for n in names if n.startswith("hybrid_")]
    if preset == "marl_star":
        wanted = [("high", "marl"), ("high", "marl_star"), ("marl", "marl_star")]
        return [p for p in wanted if p[0] in names and p[1] in names]
    return list(itertools.combinations(names, 2))


def schema() -> dict:
    return json.loads(resources.files("conveyor_marl").joinpath("report_schema.json").read_text())


def validate_report_json(doc: Mapping) -> None:
    import jsonschema

    jsonschema.validate(dict(doc), schema())


def export_report(report: ExperimentReport, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(report.to_json_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in report.strategies:
            for seed, total in zip(s.seeds, s.totals):
                w.writerow([SCHEMA_VERSION, report.preset, report.config_hash, int(report.complete), s.name, seed, total])
        return buf.getvalue()
    raise ValueError(f"unknown report format {fmt!r}")


def import_report(text: str, fmt: str = "json") -> ExperimentReport:
    """Parse an exported report; summaries and improvements are recomputed from the raw totals."""
    if fmt == "json":
        doc = json.loads(text)
        validate_report_json(doc)
        strategies = [StrategyResult(s["name"], list(s["seeds"]), list(s["totals"])) for s in doc["strategies"]]
        pairs = [(i["baseline"], i["candidate"]) for i in doc["improvements"]]
        return ExperimentReport(doc["preset"], doc["config_hash"], strategies, pairs, doc["complete"],
                                doc.get("provenance", {}))
    if fmt == "csv":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != CSV_COLUMNS:
            raise ValueError(f"CSV header must be {CSV_COLUMNS}")
        order: dict[str, StrategyResult] = {}
        preset = config_hash = ""
        complete = True
        for r in rows[1:]:
            if int(r[0]) != SCHEMA_VERSION:
                raise ValueError(f"unsupported schema version {r[0]}")
            preset, config_hash, complete = r[1], r[2], bool(int(r[3]))
            s = order.setdefault(r[4], StrategyResult(r[4], [], []))
            s.seeds.append(int(r[5]))
            s.totals.append(int(r[6]))
        strategies = list(order.values())
        return ExperimentReport(preset, config_hash, strategies,
                                default_pairs(preset, [s.name for s in strategies]), complete)
    raise ValueError(f"unknown report format {fmt!r}")


def write_report(report: ExperimentReport, path, fmt: str = "json") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(export_report(report, fmt))
    return path


# -- presets -------------------------------------------------------------


def _seeds(run: RunConfig) -> list[int]:
    return [run.eval_base_seed + k for k in range(run.eval_episodes)]


def _heuristic_results(run: RunConfig, names) -> list[StrategyResult]:
    env = run.make_env()
    seeds = _seeds(run)
    return [StrategyResult(n, seeds, [rollout_heuristic(env, n, s, run.heuristics) for s in seeds]) for n in names]


def _checkpoint_result(run: RunConfig, name: str, bundle: Path, strategy: str, assist: str) -> StrategyResult:
    ec = EvalConfig(strategy, assist, run.eval_episodes, run.eval_base_seed, checkpoint=str(bundle))
    return StrategyResult(name, ec.seeds, run_eval(ec, run))


def _train(run: RunConfig, out: Path, **overrides) -> tuple[Path, dict]:
    cfg = run.train_config(**overrides)
    env = run.make_env()
    result = marl.train(cfg, out_dir=out, env=env)
    manifest = json.loads((out / "best" / marl.MANIFEST).read_text())
    log.info("trained %s: best eval return %.3f", out.name, result.best_eval)
    return out / "best", manifest


def _bundle_hashes(bundle: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(bundle.glob("*.ckpt"))}


def _heuristic_comparison(run, work, results, prov):
    results += _heuristic_results(run, RECEIVING_HEURISTICS)


def _marl_vs_heuristics(run, work, results, prov):
    for h in ("low", "medium", "high"):
        results += _heuristic_results(run, [h])
        bundle, manifest = _train(run, work / f"marl_{h}", learners=(RECEIVING,), receiving_heuristic=h)
        prov[f"marl_{h}"] = {"files": manifest["files"], "binding": manifest["heuristic_binding"]}
        for mode in ("assisted", "non_assisted"):
            results.append(_checkpoint_result(run, f"marl_{h}_{mode}", bundle, "marl_checkpoint", mode))


def _hybrid_critics(run, work, results, prov):
    results += _heuristic_results(run, ["high"])
    for arch in ("joint", "separate"):
        bundle, manifest = _train(run, work / f"hybrid_{arch}", learners=(RECEIVING, JUNCTION),
                                  critic_arch=arch, receiving_heuristic="high")
        prov[f"hybrid_{arch}"] = {"files": manifest["files"], "architecture": manifest["architecture"]}
        results.append(_checkpoint_result(run, f"hybrid_{arch}", bundle, "hybrid_marl_checkpoint", "non_assisted"))


def _marl_star(run, work, results, prov):
    results += _heuristic_results(run, ["high"])
    first, m1 = _train(run, work / "marl", receiving_heuristic="high")
    strategy = "hybrid_marl_checkpoint" if JUNCTION in m1["agents"].values() else "marl_checkpoint"
    prov["first_iteration_files"] = m1["files"]
    results.append(_checkpoint_result(run, "marl", first, strategy, "non_assisted"))
    before = _bundle_hashes(first)
    second = marl.make_second_iteration_config(first, run.train_config(), run.topology)
    out2 = work / "marl_star"
    marl.train(second, out_dir=out2, env=run.make_env())
    m2 = json.loads((out2 / "best" / marl.MANIFEST).read_text())
    frozen = m2["heuristic_binding"]["frozen_hashes"]
    prov["second_iteration_frozen_hashes"] = frozen
    prov["binding_matches_first_iteration"] = bool(frozen) and all(
        m1["files"].get(f"actor_{a}.ckpt") == h for a, h in frozen.items()
    )
    prov["frozen_checkpoints_unchanged"] = before == _bundle_hashes(first)
    results.append(_checkpoint_result(run, "marl_star", out2 / "best", strategy, "non_assisted"))


_PRESET_RUNNERS = {
    "heuristic_comparison": _heuristic_comparison,
    "marl_vs_heuristics": _marl_vs_heuristics,
    "hybrid_critics": _hybrid_critics,
    "marl_star": _marl_star,
}


def run_experiment_preset(name: str, run: RunConfig | None = None, work_dir=None) -> ExperimentReport:
    """Train (where needed) and evaluate every strategy of a preset.

    If a step fails, the strategies finished so far are returned in a report
    flagged incomplete, with the error recorded in its provenance.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; expected one of {PRESETS}")
    run = run or RunConfig()
    tmp = None
    if work_dir is None:
        tmp = tempfile.TemporaryDirectory(prefix=f"{name}_")
        work = Path(tmp.name)
    else:
        work = Path(work_dir)
        work.mkdir(parents=True, exist_ok=True)
    chash = run.config_hash({"preset": name})
    results: list[StrategyResult] = []
    prov: dict = {}
    complete = True
    try:
        _PRESET_RUNNERS[name](run, work, results, prov)
    except (ConfigError, MarlError):
        raise
    except Exception as exc:  # keep whatever finished, flag the report
        log.exception("preset %s failed", name)
        prov["error"] = f"{type(exc).__name__}: {exc}"
        complete = False
    finally:
        if tmp is not None:
            tmp.cleanup()
    pairs = default_pairs(name, [r.name for r in results])
    return ExperimentReport(name, chash, results, pairs, complete, prov)
