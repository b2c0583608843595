"""Event-based Monte-Carlo multi-agent PPO with heuristic interleaving.

Decentralized actors (one network per learning agent) act only when their
event indicator is raised. Centralized critics score the shared global
state. During collection the actor and a bound heuristic alternate by step
parity; every decision is stored with its source and the actor's log
probability of the chosen action, so heuristic decisions enter the clipped
objective as off-policy samples.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import neural
from .env import JUNCTION, RECEIVING, ConveyorEnv, EnvConfig, normalization_hash
from .heuristics import (
    Heuristic,
    HeuristicError,
    HeuristicParams,
    frozen_policy_heuristic,
    junction_least_pallets,
    receiving_heuristic,
)
from .neural import AdamW, MlpParams

log = logging.getLogger(__name__)

ACTOR = "actor"
HEURISTIC = "heuristic"
INTERLEAVE_MODES = ("alternate_by_step", "actor_only", "heuristic_only")
MANIFEST = "manifest.json"


class MarlError(ValueError):
    pass


@dataclass
class Transition:
    agent_id: str
    state: np.ndarray
    action: int
    source: str
    old_log_prob: float
    step: int
    ret: float = math.nan


@dataclass
class EpisodeBuffer:
    transitions: dict[str, list[Transition]]
    rewards: np.ndarray
    indicator_counts: dict[str, int]
    throughput: int = 0
    complete: bool = False

    @property
    def episode_return(self) -> float:
        return float(self.rewards.sum())

    def all_transitions(self) -> list[Transition]:
        return [tr for a in self.transitions for tr in self.transitions[a]]


@dataclass
class InterleavePolicy:
    mode: str = "alternate_by_step"
    heuristics: dict[str, Heuristic] = field(default_factory=dict)
    parity: str = "global"  # or "per_agent"

    def __post_init__(self) -> None:
        if self.mode not in INTERLEAVE_MODES:
            raise MarlError(f"unknown interleave mode {self.mode!r}")
        if self.parity not in ("global", "per_agent"):
            raise MarlError(f"unknown parity rule {self.parity!r}")

    def source(self, step: int, agent_events: int) -> str:
        if self.mode == "actor_only":
            return ACTOR
        if self.mode == "heuristic_only":
            return HEURISTIC
        tick = step if self.parity == "global" else agent_events
        return ACTOR if tick % 2 == 0 else HEURISTIC


@dataclass
class PolicySet:
    actors: dict[str, MlpParams]
    critics: dict[str, MlpParams]
    agent_class: dict[str, str]
    critic_arch: str = "separate"
    gamma: float = 0.99
    clip_eps: float = 0.2
    actor_opt: dict[str, AdamW] = field(default_factory=dict)
    critic_opt: dict[str, AdamW] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.critic_arch not in ("joint", "separate"):
            raise MarlError("critic architecture must be 'joint' or 'separate'")
        if not 0 < self.gamma < 1 or self.clip_eps <= 0:
            raise MarlError("need 0 < gamma < 1 and clip_eps > 0")

    @classmethod
    def create(
        cls,
        env: ConveyorEnv,
        learners: tuple[str, ...] = (RECEIVING,),
        critic_arch: str = "separate",
        hidden: int = 64,
        rng: np.random.Generator | None = None,
        lr: float = 1e-3,
        weight_decay: float = 0.01,
        gamma: float = 0.99,
        clip_eps: float = 0.2,
    ) -> "PolicySet":
        rng = rng or np.random.default_rng(0)
        actors, classes = {}, {}
        for a in env.agents:
            spec = env.agent_specs[a]
            if spec.agent_class in learners:
                actors[a] = neural.init_mlp((env.obs_dim, hidden, hidden, spec.action_dim), rng)
                classes[a] = spec.agent_class
        if not actors:
            raise MarlError(f"no agents of classes {learners}")
        keys = ["joint"] if critic_arch == "joint" else sorted(set(classes.values()))
        critics = {k: neural.init_mlp((env.obs_dim, hidden, hidden, 1), rng) for k in keys}
        ps = cls(actors, critics, classes, critic_arch, gamma, clip_eps)
        ps.actor_opt = {a: AdamW.for_params(p, lr=lr, weight_decay=weight_decay) for a, p in actors.items()}
        ps.critic_opt = {k: AdamW.for_params(p, lr=lr, weight_decay=weight_decay) for k, p in critics.items()}
        return ps

    def critic_key(self, agent_id: str) -> str:
        key = "joint" if self.critic_arch == "joint" else self.agent_class[agent_id]
        if key not in self.critics:
            raise MarlError(f"no critic for {agent_id} ({key})")
        return key

    def value(self, agent_id: str, states: np.ndarray) -> np.ndarray:
        return neural.forward(self.critics[self.critic_key(agent_id)], states)[..., 0]

    def act(self, agent_id: str, obs: np.ndarray, rng=None, greedy: bool = False) -> tuple[int, np.ndarray]:
        logits = neural.forward(self.actors[agent_id], obs)
        if greedy:
            return int(np.argmax(logits)), logits
        return neural.sample(neural.softmax(logits), rng), logits

    def copy(self) -> "PolicySet":
        return PolicySet(
            {a: p.copy() for a, p in self.actors.items()},
            {k: p.copy() for k, p in self.critics.items()},
            dict(self.agent_class),
            self.critic_arch,
            self.gamma,
            self.clip_eps,
            {a: o.copy() for a, o in self.actor_opt.items()},
            {k: o.copy() for k, o in self.critic_opt.items()},
        )

    def save(self, directory, norm: Mapping, extra: Mapping | None = None) -> dict:
        """Write one checkpoint per network plus a manifest; returns the manifest."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        nh = normalization_hash(norm)
        files = {}
        for a, p in sorted(self.actors.items()):
            name = f"actor_{a}.ckpt"
            meta = {"role": "actor", "agent_id": a, "agent_class": self.agent_class[a], "norm_hash": nh}
            files[name] = neural.save_checkpoint(d / name, p, meta)
        for k, p in sorted(self.critics.items()):
            name = f"critic_{k}.ckpt"
            meta = {"role": "critic", "critic_key": k, "agent_class": None if k == "joint" else k, "norm_hash": nh}
            files[name] = neural.save_checkpoint(d / name, p, meta)
        manifest = {
            "architecture": self.critic_arch,
            "agents": {a: self.agent_class[a] for a in sorted(self.actors)},
            "critics": sorted(self.critics),
            "gamma": self.gamma,
            "clip_eps": self.clip_eps,
            "normalization": dict(norm),
            "norm_hash": nh,
            "files": files,
        }
        manifest.update(extra or {})
        (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return manifest

    @classmethod
    def load(cls, directory) -> tuple["PolicySet", dict]:
        d = Path(directory)
        try:
            manifest = json.loads((d / MANIFEST).read_text())
        except FileNotFoundError:
            raise MarlError(f"no checkpoint manifest in {d}") from None
        for name, digest in manifest["files"].items():
            blob = (d / name).read_bytes()
            if hashlib.sha256(blob).hexdigest() != digest:
                raise MarlError(f"{name} does not match its manifest hash")
        actors = {a: neural.load_checkpoint(d / f"actor_{a}.ckpt").params for a in manifest["agents"]}
        critics = {k: neural.load_checkpoint(d / f"critic_{k}.ckpt").params for k in manifest["critics"]}
        ps = cls(actors, critics, dict(manifest["agents"]), manifest["architecture"],
                 manifest["gamma"], manifest["clip_eps"])
        return ps, manifest


# -- collection ----------------------------------------------------------


def collect_episode(
    env: ConveyorEnv,
    policyset: PolicySet,
    interleave: InterleavePolicy,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
    greedy: bool = False,
    store: bool = True,
    record_trace: bool = False,
) -> EpisodeBuffer:
    """Run one episode, storing a transition for each learner event.

    Learners are the agents with an actor in ``policyset``; every other
    flagged agent is driven by its bound heuristic and stores nothing.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    res = env.reset(seed, record_trace=record_trace)
    steps = env.config.episode_steps
    rewards = np.zeros(steps)
    transitions = {a: [] for a in policyset.actors}
    counts = {a: 0 for a in env.agents}
    heur = interleave.heuristics
    while not res.done:
        actions = {}
        t = res.clock
        for a in res.flagged():
            n_before = counts[a]
            counts[a] += 1
            if a not in policyset.actors:
                actions[a] = heur[a](env.dispatch_context(a))
                continue
            obs = res.observation(a)
            source = interleave.source(t, n_before)
            if source == ACTOR:
                action, logits = policyset.act(a, obs, rng, greedy)
            else:
                logits = neural.forward(policyset.actors[a], obs)
                action = int(heur[a](env.dispatch_context(a)))
            actions[a] = action
            if store:
                lp = float(neural.log_softmax(logits)[action])
                transitions[a].append(Transition(a, obs, action, source, lp, t))
        res = env.step(actions)
        rewards[t] = res.reward
    return EpisodeBuffer(transitions, rewards, counts, env.state.total_throughput, complete=True)


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def compute_returns(buffer: EpisodeBuffer, gamma: float) -> EpisodeBuffer:
    if not buffer.complete:
        raise MarlError("returns need a finished episode")
    g = discounted_returns(buffer.rewards, gamma)
    buffer.returns = g
    for tr in buffer.all_transitions():
        tr.ret = float(g[tr.step])
    return buffer


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean() if len(adv) else adv
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def compute_advantages(buffer: EpisodeBuffer, policyset: PolicySet) -> dict[str, np.ndarray]:
    """Raw advantages R_t - V(s_t) per learner, in transition order."""
    out = {}
    for a, trs in buffer.transitions.items():
        if not trs:
            out[a] = np.zeros(0)
            continue
        if any(math.isnan(tr.ret) for tr in trs):
            raise MarlError("compute_returns must run before compute_advantages")
        states = np.stack([tr.state for tr in trs])
        returns = np.array([tr.ret for tr in trs])
        out[a] = returns - policyset.value(a, states)
    return out


# -- objectives ----------------------------------------------------------


def clipped_objective(ratio, adv, eps: float) -> np.ndarray:
    """Per-sample min(r A, clip(r, 1-eps, 1+eps) A)."""
    ratio = np.asarray(ratio, dtype=float)
    adv = np.asarray(adv, dtype=float)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv)


def actor_loss_and_grad(
    params: MlpParams,
    states: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    adv: np.ndarray,
    eps: float,
    entropy_coef: float = 0.0,
) -> tuple[float, list[np.ndarray], dict]:
    """Loss is the negated mean clipped surrogate (minus any entropy bonus)."""
    logits, cache = neural.forward_cache(params, states)
    n = len(actions)
    rows = np.arange(n)
    logp_all = neural.log_softmax(logits)
    probs = np.exp(logp_all)
    ratio = np.exp(logp_all[rows, actions] - old_log_probs)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
    obj = np.minimum(unclipped, clipped)
    loss = -obj.mean()
    # d obj / d log pi(a|s): r A where the unclipped branch is the minimum, else 0
    dlogp = np.where(unclipped <= clipped, unclipped, 0.0)
    onehot = np.zeros_like(logits)
    onehot[rows, actions] = 1.0
    dlogits = -(dlogp[:, None] * (onehot - probs)) / n
    entropy = -(probs * logp_all).sum(axis=1)
    if entropy_coef:
        loss -= entropy_coef * entropy.mean()
        dent = -probs * (logp_all + entropy[:, None])
        dlogits -= entropy_coef * dent / n
    grads = neural.backward(params, states, dlogits, cache)
    stats = {
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > eps)),
        "entropy": float(entropy.mean()),
    }
    return float(loss), grads, stats


def critic_loss_and_grad(params: MlpParams, states: np.ndarray, returns: np.ndarray) -> tuple[float, list]:
    v, cache = neural.forward_cache(params, states)
    err = v[:, 0] - returns
    loss = float(np.mean(err**2))
    upstream = (2.0 * err / len(returns))[:, None]
    return loss, neural.backward(params, states, upstream, cache)


def ppo_actor_update(
    params: MlpParams,
    opt: AdamW,
    states: np.ndarray,
    actions: np.ndarray,
    old_log_probs: np.ndarray,
    adv: np.ndarray,
    eps: float = 0.2,
    epochs: int = 4,
    entropy_coef: float = 0.0,
) -> dict:
    if len(actions) == 0:
        log.debug("empty actor batch, skipping update")
        return {"loss": math.nan, "clip_fraction": math.nan, "n": 0}
    actions = np.asarray(actions, dtype=int)
    stats = {}
    for _ in range(epochs):
        loss, grads, stats = actor_loss_and_grad(params, states, actions, old_log_probs, adv, eps, entropy_coef)
        neural.adamw_step(params, grads, opt)
    stats.update(loss=loss, n=len(actions))
    return stats


def critic_update(params: MlpParams, opt: AdamW, states: np.ndarray, returns: np.ndarray, epochs: int = 4) -> float:
    if len(returns) == 0:
        return math.nan
    loss = math.nan
    for _ in range(epochs):
        loss, grads = critic_loss_and_grad(params, states, returns)
        neural.adamw_step(params, grads, opt)
    return loss


def update_policies(
    ps: PolicySet,
    buffer: EpisodeBuffer,
    epochs: int = 4,
    heuristic_actor_loss: bool = True,
    entropy_coef: float = 0.0,
) -> dict:
    """Actor updates against the current critics, then critic regression."""
    adv_raw = compute_advantages(buffer, ps)
    actor_losses, clipped, total = {}, 0.0, 0
    for a, trs in buffer.transitions.items():
        keep = [k for k, tr in enumerate(trs) if heuristic_actor_loss or tr.source == ACTOR]
        if not keep:
            actor_losses[a] = math.nan
            continue
        states = np.stack([trs[k].state for k in keep])
        actions = np.array([trs[k].action for k in keep])
        old = np.array([trs[k].old_log_prob for k in keep])
        adv = normalize(adv_raw[a][keep])
        st = ppo_actor_update(ps.actors[a], ps.actor_opt[a], states, actions, old, adv,
                              ps.clip_eps, epochs, entropy_coef)
        actor_losses[a] = st["loss"]
        clipped += st["clip_fraction"] * st["n"]
        total += st["n"]
    critic_losses = {}
    groups: dict[str, list[Transition]] = {k: [] for k in ps.critics}
    for a, trs in buffer.transitions.items():
        groups[ps.critic_key(a)].extend(trs)
    for k, trs in groups.items():
        if not trs:
            critic_losses[k] = math.nan
            continue
        states = np.stack([tr.state for tr in trs])
        returns = np.array([tr.ret for tr in trs])
        critic_losses[k] = critic_update(ps.critics[k], ps.critic_opt[k], states, returns, epochs)
    return {
        "actor_loss": actor_losses,
        "critic_loss": critic_losses,
        "clip_fraction": clipped / total if total else math.nan,
    }


# -- training ------------------------------------------------------------


@dataclass
class TrainConfig:
    episodes: int = 300
    seed: int = 0
    learners: tuple[str, ...] = (RECEIVING,)
    critic_arch: str = "separate"
    interleave: str = "alternate_by_step"
    parity: str = "global"
    receiving_heuristic: str = "high"
    frozen_bundle: str | None = None
    gamma: float = 0.99
    clip_eps: float = 0.2
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 4
    hidden: int = 64
    entropy_coef: float = 0.0
    heuristic_actor_loss: bool = True
    eval_every: int = 10
    eval_episodes: int = 5
    train_seed_base: int = 500_000
    eval_seed_base: int = 900_000
    env: EnvConfig = field(default_factory=EnvConfig)
    heuristics: HeuristicParams = field(default_factory=HeuristicParams)

    def __post_init__(self) -> None:
        self.learners = tuple(self.learners)
        bad = set(self.learners) - {RECEIVING, JUNCTION}
        if bad or not self.learners:
            raise MarlError(f"learners must be drawn from receiving/junction, got {self.learners}")
        if self.episodes < 1 or self.epochs < 1 or self.eval_every < 1 or self.eval_episodes < 1:
            raise MarlError("episodes, epochs, eval_every and eval_episodes must be >= 1")
        InterleavePolicy(self.interleave, parity=self.parity)
        if self.interleave != "actor_only" and self.frozen_bundle is None:
            receiving_heuristic(self.receiving_heuristic, self.heuristics)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["learners"] = list(self.learners)
        d["env"]["demand_rates"] = list(self.env.demand_rates)
        d["heuristics"] = self.heuristics.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        if "env" in d and not isinstance(d["env"], EnvConfig):
            d["env"] = EnvConfig(**d["env"])
        if "heuristics" in d and not isinstance(d["heuristics"], HeuristicParams):
            h = dict(d["heuristics"])
            if "cost_matrix" in h:
                h["cost_matrix"] = tuple(tuple(r) for r in h["cost_matrix"])
            d["heuristics"] = HeuristicParams(**h)
        if "learners" in d:
            d["learners"] = tuple(d["learners"])
        return cls(**d)

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def base_binding(env: ConveyorEnv, receiving: str = "high", params: HeuristicParams | None = None) -> dict[str, Heuristic]:
    rule = receiving_heuristic(receiving, params)
    return {a: (rule if env.agent_specs[a].agent_class == RECEIVING else junction_least_pallets) for a in env.agents}


def frozen_binding(env: ConveyorEnv, bundle, required: tuple[str, ...] = ()) -> tuple[dict[str, Heuristic], dict]:
    """Greedy frozen actors from a first-iteration bundle, keyed by agent.

    Agents of a class listed in ``required`` must have a frozen actor;
    other agents fall back to the default rules. Returns the binding and
    the provenance record (bundle path and per-actor checkpoint hashes).
    """
    d = Path(bundle)
    ps, manifest = PolicySet.load(d)
    if manifest["norm_hash"] != normalization_hash(env.norm):
        raise MarlError("frozen bundle was trained with a different observation encoding")
    binding = base_binding(env)
    hashes = {}
    for a in env.agents:
        spec = env.agent_specs[a]
        if a in ps.actors:
            ck = neural.load_checkpoint(d / f"actor_{a}.ckpt")
            try:
                binding[a] = frozen_policy_heuristic(ck, spec)
            except HeuristicError as exc:
                raise MarlError(str(exc)) from exc
            hashes[a] = manifest["files"][f"actor_{a}.ckpt"]
        elif spec.agent_class in required:
            raise MarlError(f"frozen bundle {d} has no checkpoint for {spec.agent_class} agent {a}")
    return binding, {"frozen_bundle": str(d), "frozen_hashes": hashes}


def make_binding(env: ConveyorEnv, cfg: TrainConfig) -> tuple[dict[str, Heuristic], dict]:
    if cfg.frozen_bundle:
        return frozen_binding(env, cfg.frozen_bundle, cfg.learners)
    return base_binding(env, cfg.receiving_heuristic, cfg.heuristics), {
        "receiving_heuristic": cfg.receiving_heuristic,
        "junction_heuristic": "least_pallets",
    }


def evaluate_policy(
    env: ConveyorEnv,
    ps: PolicySet,
    seeds,
    binding: dict[str, Heuristic],
    assisted: bool = False,
    parity: str = "global",
) -> list[EpisodeBuffer]:
    """Greedy roll-outs; assisted mode interleaves the binding as in training."""
    inter = InterleavePolicy("alternate_by_step" if assisted else "actor_only", binding, parity)
    return [collect_episode(env, ps, inter, seed=s, greedy=True, store=False) for s in seeds]


@dataclass
class TrainResult:
    best: PolicySet
    log: list[dict]
    best_eval: float
    binding_info: dict
    config: TrainConfig


LOG_BASE_COLUMNS = ["episode", "train_return", "eval_return_mean"]


def log_columns(agents) -> list[str]:
    return LOG_BASE_COLUMNS + [f"actor_loss_{a}" for a in agents] + ["critic_loss", "clip_fraction", "wall_time_s"]


def train(cfg: TrainConfig, out_dir=None, env: ConveyorEnv | None = None) -> TrainResult:
    """Collect, compute returns, update actors then critics; keep the best evaluated policies."""
    env = env or ConveyorEnv(cfg.env)
    binding, binding_info = make_binding(env, cfg)
    init_rng = np.random.default_rng([cfg.seed, 1])
    sample_rng = np.random.default_rng([cfg.seed, 2])
    ps = PolicySet.create(env, cfg.learners, cfg.critic_arch, cfg.hidden, init_rng,
                          cfg.lr, cfg.weight_decay, cfg.gamma, cfg.clip_eps)
    interleave = InterleavePolicy(cfg.interleave, binding, cfg.parity)
    eval_seeds = [cfg.eval_seed_base + k for k in range(cfg.eval_episodes)]
    best, best_score = ps.copy(), -math.inf
    rows = []
    columns = log_columns(sorted(ps.actors))
    writer = fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
    try:
        for ep in range(cfg.episodes):
            t0 = time.perf_counter()
            seed = cfg.train_seed_base + 1000 * cfg.seed + ep
            buf = collect_episode(env, ps, interleave, seed=seed, rng=sample_rng)
            compute_returns(buf, cfg.gamma)
            stats = update_policies(ps, buf, cfg.epochs, cfg.heuristic_actor_loss, cfg.entropy_coef)
            eval_mean = math.nan
            if (ep + 1) % cfg.eval_every == 0 or ep == cfg.episodes - 1:
                evals = evaluate_policy(env, ps, eval_seeds, binding, assisted=False, parity=cfg.parity)
                eval_mean = float(np.mean([b.episode_return for b in evals]))
                if eval_mean > best_score:
                    best, best_score = ps.copy(), eval_mean
            row = {"episode": ep, "train_return": buf.episode_return, "eval_return_mean": eval_mean}
            for a in sorted(ps.actors):
                row[f"actor_loss_{a}"] = stats["actor_loss"][a]
            row["critic_loss"] = float(np.nanmean(list(stats["critic_loss"].values())))
            row["clip_fraction"] = stats["clip_fraction"]
            row["wall_time_s"] = time.perf_counter() - t0
            rows.append(row)
            log.info("episode %d return %.3f eval %.3f", ep, buf.episode_return, eval_mean)
            if writer:
                writer.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
                fh.flush()
    finally:
        if fh:
            fh.close()
    result = TrainResult(best, rows, best_score, binding_info, cfg)
    if out_dir is not None:
        save_bundle(result, Path(out_dir) / "best", env)
    return result


def save_bundle(result: TrainResult, directory, env: ConveyorEnv) -> dict:
    cfg = result.config
    extra = {
        "config_hash": cfg.config_hash(),
        "seeds": {"train": cfg.seed, "train_seed_base": cfg.train_seed_base, "eval_seed_base": cfg.eval_seed_base},
        "learners": list(cfg.learners),
        "interleave": cfg.interleave,
        "parity": cfg.parity,
        "heuristic_binding": result.binding_info,
        "best_eval_return": result.best_eval,
        "env": env.config_dict(),
    }
    return result.best.save(directory, env.norm, extra)


def make_second_iteration_config(first_bundle, base: TrainConfig, topology=None) -> TrainConfig:
    """Config whose interleaved heuristics are the frozen first-iteration actors."""
    d = Path(first_bundle)
    _, manifest = PolicySet.load(d)
    classes = set(manifest["agents"].values())
    for cls in base.learners:
        if cls not in classes:
            raise MarlError(f"first-iteration bundle {d} has no {cls} checkpoints")
    env = ConveyorEnv(base.env, topology)
    if manifest["norm_hash"] != normalization_hash(env.norm):
        raise MarlError("first-iteration bundle uses a different observation encoding")
    return replace(base, frozen_bundle=str(d), interleave="alternate_by_step")


def binding_from_manifest(env: ConveyorEnv, manifest: Mapping, heuristics: HeuristicParams | None = None) -> dict[str, Heuristic]:
    """Rebuild the heuristic binding a bundle was trained with."""
    info = manifest.get("heuristic_binding", {})
    if "frozen_bundle" in info:
        binding, prov = frozen_binding(env, info["frozen_bundle"])
        if prov["frozen_hashes"] != info.get("frozen_hashes"):
            raise MarlError("frozen bundle changed since training")
        return binding
    return base_binding(env, info.get("receiving_heuristic", "high"), heuristics)

