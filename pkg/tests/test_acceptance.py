"""Acceptance gate: every check runs at its stated tolerance and reports PASS/FAIL.

The experiment checks train every policy from scratch and take roughly half an
hour on one CPU core. Deselect them with ``-m "not slow"``.
"""

import filecmp
import itertools
import math
import time

import numpy as np
import pytest

from fedconflict import env, hmm, sac
from fedconflict.config import ExperimentConfig
from fedconflict.nn import Mlp
from fedconflict.report import summarize_run
from fedconflict.runner import run_experiment
from fedconflict.sac import SacAgent, SacConfig

from helpers import fd_grad, finite_difference_check, max_rel_err
from oracles import greedy_waterfill, hmm_conflict_after_gap, hmm_joint

pytestmark = pytest.mark.acceptance

ROUNDS = 1500
SEEDS = range(5)
SWEEP_SEEDS = range(3)
WINDOW = 200


def hmm_case(rng):
    k = int(rng.integers(1, 4))
    params = hmm.random_params(k, 2, rng)
    obs = rng.integers(0, 2, size=int(rng.integers(1, 9))).tolist()
    return params, obs


def test_hmm_forward_oracle(verdict):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        params, obs = hmm_case(rng)
        total, _ = hmm_joint(params.transition, params.emission, params.initial, obs)
        worst = max(worst, abs(math.exp(hmm.forward(params, obs).log_likelihood) - total))
    elapsed = time.perf_counter() - start
    ok = verdict(1, "hmm-forward-oracle", worst < 1e-10 and elapsed < 10,
                 f"200 cases, max |err| {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_conflict_prediction_oracle(verdict):
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    worst = 0.0
    for case in range(100):
        params, obs = hmm_case(rng)
        gap = case % 4 + 1
        history = hmm.SelectionHistory(client_id=0, observations=[])
        for t, o in enumerate(obs):
            history.record(t, o)
        history.advance(len(obs) - 1 + gap)
        want = hmm_conflict_after_gap(params.transition, params.emission, params.initial, obs, gap)
        worst = max(worst, abs(hmm.predict_conflict(params, history) - want))
    elapsed = time.perf_counter() - start
    ok = verdict(2, "conflict-prediction-oracle", worst < 1e-10 and elapsed < 10,
                 f"100 cases, gaps 1-4, max |err| {worst:.2e}, {elapsed:.2f}s")
    assert ok


def test_em_monotonicity(verdict):
    rng = np.random.default_rng(11)
    worst_drop = 0.0
    for _ in range(50):
        params = hmm.random_params(int(rng.integers(1, 4)), 2, rng)
        obs = rng.integers(0, 2, size=int(rng.integers(2, 30))).tolist()
        ll = hmm.forward(params, obs).log_likelihood
        for _ in range(10):
            params = hmm.baum_welch_step(params, obs)
            nxt = hmm.forward(params, obs).log_likelihood
            worst_drop = max(worst_drop, ll - nxt)
            ll = nxt
    ok = verdict(3, "em-monotonicity", worst_drop <= 1e-12,
                 f"50 pairs x 10 steps, largest decrease {max(worst_drop, 0.0):.2e}")
    assert ok


def test_gradient_fidelity(verdict):
    errors = {}
    rng = np.random.default_rng(3)
    for sizes in ([3, 2], [4, 6, 3], [5, 8, 8, 1], [6, 64, 64, 3]):
        net = Mlp.init(sizes, rng)
        x = rng.normal(size=(4, sizes[0]))
        errors[f"mlp{sizes}"] = finite_difference_check(net, x, rng.normal(size=(4, sizes[-1])))

    for arch in ("mlp", "shared"):
        agent = SacAgent(list(range(5)), 3, SacConfig(hidden=(8, 8), policy_hidden=(8, 8), policy_arch=arch),
                         np.random.default_rng(0))
        shared = arch == "shared"
        states = rng.uniform(size=(4, 10))
        logits = sac.policy_logits(agent.nets.policy, states, shared)
        orders = sac.sample_orders(np.repeat(logits[:, None, :], 3, axis=1), 3, rng)
        weights = rng.normal(size=(4, 3))
        policy = agent.nets.policy
        _, grads = sac.actor_surrogate(policy, states, orders, weights, shared)
        numeric = fd_grad(lambda: sac.actor_surrogate(policy, states, orders, weights, shared)[0],
                          policy.params())
        errors[f"actor/{arch}"] = max_rel_err(grads.params(), numeric)

    masks = np.zeros((4, 5))
    for row in masks:
        row[rng.choice(5, 3, replace=False)] = 1.0
    states = rng.uniform(size=(4, 10))
    targets = rng.normal(size=4)
    for name in ("q1", "q2"):
        critic = getattr(agent.nets, name)
        _, grads = sac.critic_loss_and_grads(critic, states, masks, targets)
        numeric = fd_grad(lambda: sac.critic_loss_and_grads(critic, states, masks, targets)[0], critic.params())
        errors[f"critic/{name}"] = max_rel_err(grads.params(), numeric)

    logp = rng.uniform(-5, -1, size=10)
    _, g = sac.temperature_loss_and_grad(0.3, logp, 2.0)
    h = 1e-5
    num = (sac.temperature_loss_and_grad(0.3 + h, logp, 2.0)[0]
           - sac.temperature_loss_and_grad(0.3 - h, logp, 2.0)[0]) / (2 * h)
    errors["temperature"] = abs(g - num) / (abs(g) + abs(num))

    worst = max(errors, key=errors.get)
    ok = verdict(4, "gradient-fidelity", all(e < 1e-4 for e in errors.values()),
                 f"{len(errors)} checks, worst {worst} rel err {errors[worst]:.2e}")
    assert ok


def test_plackett_luce_normalisation(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for n in range(1, 6):
        for s in range(1, n + 1):
            logits = rng.normal(size=n) * 3
            orders = np.array(list(itertools.permutations(range(n), s)))
            logp, _ = sac.pl_log_prob(logits, orders)
            worst = max(worst, abs(float(np.exp(logp).sum()) - 1.0))
    ok = verdict(5, "plackett-luce-normalisation", worst < 1e-9, f"n <= 5, all S, max |sum - 1| {worst:.2e}")
    assert ok


def test_fairness_spot_values(verdict):
    skewed = sac.fairness_metric(np.array([2, 4, 6]), 1e-8)
    equal = sac.fairness_metric(np.array([5, 5, 5]), 1e-8)
    ok = verdict(6, "fairness-spot-values", abs(skewed - 0.984993) <= 1e-5 and equal > 0.999999,
                 f"f([2,4,6]) = {skewed:.6f} (expected 0.984993 +/- 1e-5), f(equal) = {equal:.9f}")
    assert ok


def test_waterfill_oracle(verdict):
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(100):
        k = int(rng.integers(1, 9))
        ids = [int(i) for i in rng.permutation(100)[:k]]
        snrs = [float(x) for x in rng.exponential(0.05, size=k)]
        demands = [float(x) for x in rng.uniform(1e6, 60e6, size=k)]
        if rng.uniform() < 0.3:
            demands[int(rng.integers(k))] = math.inf
        if k > 1 and rng.uniform() < 0.3:
            snrs[1] = snrs[0]
        got = env.waterfill_allocate(list(zip(ids, snrs, demands)), 100e6)
        want = greedy_waterfill(demands, snrs, ids, 100e6)
        mismatches += [got.bandwidth[i] for i in ids] != want
    ok = verdict(7, "waterfill-oracle", mismatches == 0, f"100 instances, {mismatches} not bit-identical")
    assert ok


# --- experiment trends -----------------------------------------------------------

class RunBank:
    """Trains each (servers, seed, policy) once per session and keeps its summary."""

    def __init__(self):
        self.summaries = {}

    def get(self, servers, seed, policy):
        key = (servers, seed, policy)
        if key not in self.summaries:
            cfg = ExperimentConfig(num_servers=servers, seed=seed, policy=policy, rounds=ROUNDS)
            self.summaries[key] = summarize_run(cfg, run_experiment(cfg), WINDOW)
        return self.summaries[key]

    def values(self, servers, seeds, policy, column):
        return np.array([self.get(servers, s, policy)[column] for s in seeds])


@pytest.fixture(scope="session")
def bank():
    return RunBank()


@pytest.mark.slow
def test_conflict_reduction(verdict, bank):
    rl = bank.values(2, SEEDS, "rl_crp", "conflicts_per_round")
    rnd = bank.values(2, SEEDS, "random_fedavg", "conflicts_per_round")
    nocrp = bank.values(2, SEEDS, "sac_no_crp", "conflicts_per_round")
    ok = rl.mean() <= 0.7 * rnd.mean() and rl.mean() <= 0.85 * nocrp.mean()
    verdict(8, "conflict-reduction", ok,
            f"final-{WINDOW} conflicts/round over {len(SEEDS)} seeds: rl_crp {rl.mean():.4f}, "
            f"random_fedavg {rnd.mean():.4f} ({1 - rl.mean() / rnd.mean():.0%} lower), "
            f"sac_no_crp {nocrp.mean():.4f} ({1 - rl.mean() / nocrp.mean():.0%} lower)")
    assert ok


POLICIES = ["rl_crp", "rl_crp_no_fairness", "random_fedavg", "sac_no_crp"]


@pytest.mark.slow
def test_conflicts_grow_with_servers(verdict, bank):
    table = {p: [bank.values(m, SWEEP_SEEDS, p, "conflicts_per_round").mean() for m in (2, 3, 4)]
             for p in POLICIES}
    ok = all(v[0] <= v[1] <= v[2] for v in table.values())
    detail = "; ".join(f"{p} " + "/".join(f"{x:.3f}" for x in v) for p, v in table.items())
    verdict(9, "conflicts-grow-with-servers", ok, f"M=2/3/4 over seeds {list(SWEEP_SEEDS)}: {detail}")
    assert ok


@pytest.mark.slow
def test_fairness_ablation(verdict, bank):
    c_fair = bank.values(2, SEEDS, "rl_crp", "conflicts_per_round").mean()
    c_free = bank.values(2, SEEDS, "rl_crp_no_fairness", "conflicts_per_round").mean()
    a_fair = bank.values(2, SEEDS, "rl_crp", "accuracy").mean()
    a_free = bank.values(2, SEEDS, "rl_crp_no_fairness", "accuracy").mean()
    ok = c_free <= 1.05 * c_fair and a_fair > a_free
    verdict(10, "fairness-ablation", ok,
            f"conflicts/round no-fairness {c_free:.4f} vs rl_crp {c_fair:.4f}; "
            f"accuracy rl_crp {a_fair:.4f} vs no-fairness {a_free:.4f}")
    assert ok


@pytest.mark.slow
def test_reward_auc_ordering(verdict, bank):
    parts, ok = [], True
    for m in (2, 4):
        rl = bank.values(m, SWEEP_SEEDS, "rl_crp", "reward_auc")
        base = bank.values(m, SWEEP_SEEDS, "sac_no_crp", "reward_auc")
        ok = ok and rl.mean() > base.mean()
        parts.append(f"M={m} rl_crp {rl.mean():.0f} vs sac_no_crp {base.mean():.0f} "
                     f"(wins {int((rl > base).sum())}/{len(rl)})")
    verdict(11, "reward-auc-ordering", ok, "; ".join(parts))
    assert ok


def test_end_to_end_determinism(verdict, tmp_path):
    cfg = ExperimentConfig(rounds=60, warmup_rounds=20, sac_batch_size=16)
    for name in ("a", "b"):
        log = run_experiment(cfg, tmp_path / name)
        log.export(tmp_path / name / "metrics.json", "json")
    files = ("metrics.csv", "metrics.json", "diagnostics.csv", "config.yaml")
    same = [filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False) for f in files]
    ok = verdict(12, "end-to-end-determinism", all(same),
                 f"60-round replay, identical files: {[f for f, s in zip(files, same) if s]}")
    assert ok
