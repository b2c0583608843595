"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The two training criteria (8 and 9) share one cached desk-scale run over
training seeds 0, 1 and 2.
"""

import hashlib
import json
import math
from fractions import Fraction

import numpy as np
import pytest

from conveyor_marl import harness, marl, neural, sim
from conveyor_marl.cli import main
from conveyor_marl.env import ConveyorEnv, EnvConfig
from conveyor_marl.harness import EvalConfig, percent_improvement
from conveyor_marl.heuristics import (
    HeuristicParams,
    heuristic_high,
    heuristic_low,
    heuristic_medium,
    high_selection,
    junction_least_pallets,
    loop_cost,
    min_cost,
)
from conveyor_marl.marl import InterleavePolicy, PolicySet
from conveyor_marl.topology import build_default_preset

from conftest import make_ctx

pytestmark = pytest.mark.slow

CRITERIA = {
    1: "simulator conservation",
    2: "event-mask exactness",
    3: "gradient fidelity",
    4: "clipped objective oracle",
    5: "return recurrence",
    6: "heuristic conformance",
    7: "statistics pipeline",
    8: "MARL+High beats High at desk scale",
    9: "non-assisted >= assisted - 1%",
    10: "determinism",
    11: "MARL* pipeline integrity",
}
VERDICTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="module", autouse=True)
def verdict_lines(request):
    yield
    tr = request.config.pluginmanager.getplugin("terminalreporter")
    lines = []
    for n, name in CRITERIA.items():
        ok, detail = VERDICTS.get(n, (False, "not reached"))
        lines.append(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if tr is not None:
        tr.write_line("")
        for line in lines:
            tr.write_line(line)
    else:
        print("\n".join(lines))


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = (bool(ok), detail)
    assert ok, f"criterion {n} ({CRITERIA[n]}): {detail}"


# 1 ----------------------------------------------------------------------


def test_c01_conservation():
    topo = build_default_preset()
    wrong_count = violations = 0
    for seed in range(20):
        s = sim.init(topo, total_pallets=500, seed=seed)
        rng = np.random.default_rng(1000 + seed)
        while s.clock < 36_000:
            s.step({a: int(rng.integers(s.action_dim(a))) for a in s.events.pending})
            wrong_count += s.located_pallets() != 500 or len(s.pallets) != 500
            violations += len(s.buffer_violations())
    verdict(1, wrong_count == 0 and violations == 0,
            f"20 x 36000 steps, {wrong_count} steps off 500 pallets, {violations} buffer violations")


# 2 ----------------------------------------------------------------------


class CountingEnv(ConveyorEnv):
    """Tallies the simulator's pending decisions independently of the collector."""

    def reset(self, seed=None, record_trace=False):
        self.tally = {}
        return super().reset(seed, record_trace)

    def step(self, actions):
        for a in self.state.events.pending:
            self.tally[a] = self.tally.get(a, 0) + 1
        return super().step(actions)


def test_c02_event_mask():
    env = CountingEnv(EnvConfig())
    ps = PolicySet.create(env, ("receiving", "junction"), hidden=16, rng=np.random.default_rng(0))
    inter = InterleavePolicy("alternate_by_step", marl.base_binding(env))
    mismatches, stored = [], 0
    for seed in range(10):
        buf = marl.collect_episode(env, ps, inter, seed=seed, rng=np.random.default_rng(seed))
        for a in env.agents:
            n_stored = len(buf.transitions[a])
            stored += n_stored
            if n_stored != env.tally.get(a, 0):
                mismatches.append((seed, a, n_stored, env.tally.get(a, 0)))
    verdict(2, not mismatches and stored > 0,
            f"10 full episodes, 8 agents, {stored} transitions, mismatches {mismatches[:3]}")


# 3 ----------------------------------------------------------------------


def _rel_err(analytic, loss_fn, arrays, h=1e-5):
    worst = 0.0
    for arr, g in zip(arrays, analytic):
        for idx in np.ndindex(arr.shape):
            keep = arr[idx]
            arr[idx] = keep + h
            up = loss_fn()
            arr[idx] = keep - h
            down = loss_fn()
            arr[idx] = keep
            num = (up - down) / (2 * h)
            worst = max(worst, abs(g[idx] - num) / max(abs(g[idx]), abs(num), 1e-6))
    return worst


def test_c03_gradient_fidelity():
    rng = np.random.default_rng(2024)
    worst_actor = worst_critic = 0.0
    for _ in range(50):
        d, hidden, k, n = (int(v) for v in rng.integers([2, 2, 2, 1], [7, 9, 6, 9]))
        actor = neural.init_mlp((d, hidden, hidden, k), rng)
        states = rng.normal(size=(n, d))
        actions = rng.integers(k, size=n)
        adv = rng.normal(size=n)
        old = neural.log_prob(neural.forward(actor, states), actions) + rng.normal(0, 0.3, size=n)
        f = lambda: marl.actor_loss_and_grad(actor, states, actions, old, adv, 0.2)[0]
        _, grads, _ = marl.actor_loss_and_grad(actor, states, actions, old, adv, 0.2)
        worst_actor = max(worst_actor, _rel_err(grads, f, actor.arrays()))

        critic = neural.init_mlp((d, hidden, hidden, 1), rng)
        returns = rng.normal(size=n)
        g = lambda: marl.critic_loss_and_grad(critic, states, returns)[0]
        _, grads = marl.critic_loss_and_grad(critic, states, returns)
        worst_critic = max(worst_critic, _rel_err(grads, g, critic.arrays()))
    worst = max(worst_actor, worst_critic)
    verdict(3, worst < 1e-4, f"50 nets, max rel err actor {worst_actor:.2e} critic {worst_critic:.2e}")


# 4 ----------------------------------------------------------------------


def test_c04_clipped_objective():
    rng = np.random.default_rng(4)
    ratio = rng.uniform(0, 3, 1000)
    adv = rng.normal(0, 2, 1000)
    eps = rng.uniform(0.05, 0.5, 1000)
    got = np.array([marl.clipped_objective(r, a, e) for r, a, e in zip(ratio, adv, eps)])
    brute = []
    for r, a, e in zip(ratio, adv, eps):
        clipped = min(max(r, 1 - e), 1 + e)
        brute.append(min(r * a, clipped * a))
    err = float(np.max(np.abs(got - np.array(brute))))
    hand = (float(marl.clipped_objective(1.5, 1.0, 0.2)), float(marl.clipped_objective(0.5, -1.0, 0.2)))
    ok = err <= 1e-10 and abs(hand[0] - 1.2) <= 1e-10 and abs(hand[1] + 0.8) <= 1e-10
    verdict(4, ok, f"1000 tuples, max abs err {err:.1e}; hand cases {hand}")


# 5 ----------------------------------------------------------------------


def test_c05_return_recurrence():
    hand = [float(v) for v in marl.discounted_returns(np.array([1.0, 0.0, 2.0]), 0.5)]
    env = ConveyorEnv(EnvConfig(episode_steps=3600))
    ps = PolicySet.create(env, hidden=16, rng=np.random.default_rng(0))
    inter = InterleavePolicy("alternate_by_step", marl.base_binding(env))
    gamma, checked, broken = 0.99, 0, 0
    for seed in range(10):
        buf = marl.compute_returns(marl.collect_episode(env, ps, inter, seed=seed), gamma)
        last = len(buf.rewards) - 1
        for tr in buf.all_transitions():
            nxt = buf.returns[tr.step + 1] if tr.step < last else 0.0
            broken += tr.ret != buf.rewards[tr.step] + gamma * nxt
            checked += 1
    ok = broken == 0 and checked > 0 and hand == [1.5, 1.0, 2.0]
    verdict(5, ok, f"{checked} stored transitions over 10 episodes, {broken} violate the recurrence; hand {hand}")


# 6 ----------------------------------------------------------------------


def _heuristic_fixtures():
    p = HeuristicParams(c1_high=5, c2_high=5, c3_high=4)
    loops6 = [0, 0, 0, 1, 1, 1]
    zero_costs = ((0.0, 0.0), (0.0, 0.0))
    return [
        # cost example: (5 - 2) / (10 - 2) + 0.3
        ("loop cost", lambda: loop_cost(make_ctx([0, 0, 0], storage_loop=[0, 1, 2], loop_totals=[5, 2, 10]), 0,
                                        ((0.3, 0, 0), (0, 0, 0), (0, 0, 0))), 0.675),
        ("min cost tie", lambda: min_cost(make_ctx([0, 0, 0], storage_loop=[0, 1, 2], loop_totals=[4, 4, 4]),
                                          [2, 1, 0], ((0.1,) * 3,) * 3), 0),
        ("low singleton", lambda: heuristic_low(make_ctx([0] * 4, storage_loop=[1, 1, 0, 1])), 2),
        ("medium trace", lambda: heuristic_medium(make_ctx([1, 5, 0]), HeuristicParams(c1_medium=3)), 2),
        ("medium loop", lambda: heuristic_medium(
            make_ctx([2, 1, 0, 3], storage_loop=[0, 0, 1, 1], loop_totals=[10, 2]),
            HeuristicParams(c1_medium=4, cost_matrix=zero_costs)), 2),
        ("medium fallback", lambda: heuristic_medium(
            make_ctx([9, 8, 7, 6], storage_loop=[0, 0, 1, 1], loop_totals=[17, 13]),
            HeuristicParams(c1_medium=3, cost_matrix=zero_costs)), 3),
        ("high ladder all", lambda: high_selection(1, 1, 5, 5), "all"),
        ("high ladder same", lambda: high_selection(1, 9, 5, 5), "same"),
        ("high ladder other", lambda: high_selection(9, 1, 5, 5), "other"),
        ("high ladder else", lambda: high_selection(9, 9, 5, 5), "all"),
        ("high ladder boundary", lambda: high_selection(5, 1, 5, 5), "all"),
        ("high all", lambda: heuristic_high(make_ctx([1, 1, 1, 0, 0, 1], [3, 0, 2, 0, 0, 0], loops6), p), 1),
        ("high same", lambda: heuristic_high(make_ctx([0, 2, 0, 3, 3, 3], [2, 0, 1, 0, 0, 0], loops6), p), 1),
        ("high other", lambda: heuristic_high(make_ctx([3, 3, 3, 1, 0, 0], [0, 0, 0, 0, 2, 0], loops6), p), 3),
        ("high both above", lambda: heuristic_high(make_ctx([2, 2, 2, 3, 3, 3], [0, 1, 0, 0, 0, 0], loops6), p), 0),
        ("high out-in", lambda: heuristic_high(make_ctx([0, 1, 0], [2, 0, 0]), p), 1),
        ("junction", lambda: junction_least_pallets(make_ctx([0], loop_pallets=(120, 80, 0), direction_loops=(0, 1))), 1),
        ("junction tie", lambda: junction_least_pallets(make_ctx([0], loop_pallets=(90, 90, 0), direction_loops=(0, 1))), 0),
    ]


def test_c06_heuristic_conformance():
    failed = []
    fixtures = _heuristic_fixtures()
    for name, run, want in fixtures:
        got = run()
        same = math.isclose(got, want, abs_tol=1e-15) if isinstance(want, float) else got == want
        if not same:
            failed.append((name, got, want))
    verdict(6, not failed, f"{len(fixtures)} hand-traced fixtures, failures {failed}")


# 7 ----------------------------------------------------------------------


def test_c07_statistics():
    cases = [((4552, 4642), "1.98"), ((4150, 4459), "7.44"), ((4180, 4311), "3.13")]
    rows, ok = [], True
    for (base, cand), reported in cases:
        got = percent_improvement(base, cand)
        exact = Fraction(100 * (cand - base), base)
        ok &= abs(got - float(exact)) < 1e-12 and abs(got - float(reported)) < 0.01
        rows.append(f"{got:.4f} vs {reported}")
    verdict(7, ok, "; ".join(rows))


# 8, 9 --------------------------------------------------------------------


@pytest.fixture(scope="module")
def desk_training(tmp_path_factory):
    run = harness.load_config("desk")
    seeds = [run.eval_base_seed + k for k in range(run.eval_episodes)]
    env = run.make_env()
    high = [harness.rollout_heuristic(env, "high", s, run.heuristics) for s in seeds]
    out = []
    for train_seed in (0, 1, 2):
        d = tmp_path_factory.mktemp(f"desk_seed{train_seed}")
        cfg = run.train_config(seed=train_seed, receiving_heuristic="high")
        marl.train(cfg, out_dir=d, env=run.make_env())
        bundle = str(d / "best")
        na = harness.run_eval(EvalConfig("marl_checkpoint", "non_assisted", run.eval_episodes,
                                         run.eval_base_seed, checkpoint=bundle), run)
        a = harness.run_eval(EvalConfig("marl_checkpoint", "assisted", run.eval_episodes,
                                        run.eval_base_seed, checkpoint=bundle), run)
        out.append({"seed": train_seed, "non_assisted": harness.summarize(na).median,
                    "assisted": harness.summarize(a).median})
    return harness.summarize(high).median, out


def test_c08_marl_beats_high(desk_training):
    high, runs = desk_training
    wins = sum(r["non_assisted"] >= high for r in runs)
    detail = ", ".join(f"seed {r['seed']}: {r['non_assisted']:.1f}" for r in runs)
    verdict(8, wins >= 2, f"High median {high:.1f}; MARL+High non-assisted medians {detail}; {wins}/3 >= High")


def test_c09_non_assisted_vs_assisted(desk_training):
    _, runs = desk_training
    wins = sum(r["non_assisted"] >= 0.99 * r["assisted"] for r in runs)
    detail = ", ".join(f"seed {r['seed']}: {r['non_assisted']:.1f} vs {r['assisted']:.1f}" for r in runs)
    verdict(9, wins >= 2, f"non-assisted vs assisted medians {detail}; {wins}/3 within 1%")


# 10 ---------------------------------------------------------------------


def test_c10_determinism(tmp_path):
    reports = []
    for k in range(2):
        out = tmp_path / f"report{k}.json"
        code = main(["experiment", "heuristic_comparison", "--config", "desk", "--out", str(out)])
        reports.append((code, out.read_bytes()))
    identical = reports[0][1] == reports[1][1] and reports[0][0] == reports[1][0] == 0

    p = neural.init_mlp((45, 64, 64, 20), np.random.default_rng(10))
    meta = {"agent_class": "receiving", "agent_id": "I0"}
    path = tmp_path / "actor.ckpt"
    digest = neural.save_checkpoint(path, p, meta)
    back = neural.load_checkpoint(path)
    round_trip = (back.params.tobytes() == p.tobytes() and back.meta == meta
                  and neural.dumps_checkpoint(back.params, back.meta) == path.read_bytes()
                  and hashlib.sha256(path.read_bytes()).hexdigest() == digest)
    verdict(10, identical and round_trip,
            f"report bytes identical: {identical} ({len(reports[0][1])} bytes); checkpoint round trip: {round_trip}")


# 11 ---------------------------------------------------------------------


def test_c11_marl_star(tmp_path):
    run = harness.load_config("desk")
    rep = harness.run_experiment_preset("marl_star", run, tmp_path)
    prov = rep.provenance
    first, second = tmp_path / "marl" / "best", tmp_path / "marl_star" / "best"
    m1 = json.loads((first / marl.MANIFEST).read_text())
    m2 = json.loads((second / marl.MANIFEST).read_text())
    on_disk = {f: hashlib.sha256((first / f).read_bytes()).hexdigest() for f in m1["files"]}
    frozen = m2["heuristic_binding"]["frozen_hashes"]
    binds = (m2["heuristic_binding"]["frozen_bundle"] == str(first)
             and set(frozen) == set(m1["agents"])
             and all(frozen[a] == m1["files"][f"actor_{a}.ckpt"] for a in frozen))
    unchanged = on_disk == m1["files"] == prov["first_iteration_files"]
    ok = rep.complete and binds and unchanged and prov["binding_matches_first_iteration"] \
        and prov["frozen_checkpoints_unchanged"]
    med = {s.name: s.summary.median for s in rep.strategies}
    verdict(11, ok, f"complete {rep.complete}, binding {binds}, frozen bytes unchanged {unchanged}; "
                    f"medians (not gated) high {med.get('high')}, marl {med.get('marl')}, "
                    f"marl_star {med.get('marl_star')}")
