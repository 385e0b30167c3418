"""Seeded multi-server round loop tying prediction, selection, channel and training together."""

from __future__ import annotations

import logging
import math
import os
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import env, fl, hmm
from .config import ExperimentConfig, PolicyKind, dump_config
from .env import Channel, ChannelConfig, ClientProfile, RoundOutcome, ServerProfile, ServerRound
from .metrics import MetricsLog, diagnostics_row, round_rows
from .sac import SacAgent, SacConfig, Transition, compute_reward, encode_state, fairness_metric

log = logging.getLogger(__name__)

# fixed stream tags so that adding a consumer never shifts another one
_PLACEMENT, _COMPUTE, _DATA, _PARTITION, _MODEL, _AGENT, _RANDOM, _TRAIN, _HMM, _CHANNEL = range(10)


class RoundError(RuntimeError):
    """A failure inside a round, tagged with the round and server."""

    def __init__(self, round_index: int, server_id, cause: BaseException):
        where = f"round {round_index}" + ("" if server_id is None else f", server {server_id}")
        super().__init__(f"{where}: {cause}")
        self.round_index = round_index
        self.server_id = server_id


@dataclass
class ConflictPredictor:
    """Per-candidate HMMs for one server, stored as stacked arrays."""

    transition: np.ndarray  # (n, K, K)
    emission: np.ndarray  # (n, K, 2)
    initial: np.ndarray  # (n, K)
    histories: list  # list[list[int]]
    last_round: np.ndarray  # (n,), 0 = never observed

    @classmethod
    def create(cls, n: int, num_states: int, rng: np.random.Generator) -> "ConflictPredictor":
        # state 0 leans "normal", the last state leans "conflict"; jitter breaks ties
        k = num_states
        A = np.full((k, k), 0.2 / max(k - 1, 1)) + np.eye(k) * (0.8 - 0.2 / max(k - 1, 1))
        if k == 1:
            A = np.ones((1, 1))
        lean = np.linspace(0.1, 0.7, k) if k > 1 else np.array([0.3])
        B = np.column_stack([1.0 - lean, lean])
        pi = np.zeros(k)
        pi[0] = 0.8
        pi += 0.2 / k
        trans = np.empty((n, k, k))
        emit = np.empty((n, k, 2))
        init = np.empty((n, k))
        for i in range(n):
            trans[i] = _jitter(A, rng)
            emit[i] = _jitter(B, rng)
            init[i] = _jitter(pi[None, :], rng)[0]
        return cls(trans, emit, init, [[] for _ in range(n)], np.zeros(n, dtype=np.int64))

    def params(self, i: int) -> hmm.HmmParams:
        return hmm.HmmParams(self.transition[i], self.emission[i], self.initial[i])

    def predict(self, round_index: int, window: int, min_history: int) -> np.ndarray:
        n = len(self.histories)
        lengths = np.array([min(len(h), window) for h in self.histories])
        out = np.empty(n)
        warm = lengths >= min_history
        cold = np.flatnonzero(~warm)
        for i in cold:
            out[i] = hmm.prior_conflict(self.params(i), round_index)
        rows = np.flatnonzero(warm)
        if rows.size:
            width = int(lengths[rows].max())
            obs = np.zeros((rows.size, width), dtype=np.int64)
            for r, i in enumerate(rows):
                seq = self.histories[i][-lengths[i]:]
                obs[r, width - len(seq):] = seq
            gaps = round_index - self.last_round[rows]
            out[rows] = hmm.batch_predict(self.transition[rows], self.emission[rows], self.initial[rows],
                                          obs, lengths[rows], gaps)
        return np.clip(out, 0.0, 1.0)

    def low_confidence(self, min_history: int) -> np.ndarray:
        """Candidates whose prediction falls back to the prior for lack of history."""
        return np.array([len(h) < min_history for h in self.histories], dtype=bool)

    def record(self, i: int, round_index: int, value: int) -> None:
        self.histories[i].append(int(value))
        self.last_round[i] = round_index

    def refit(self, indices, window: int, rho: float, smoothing: float) -> None:
        """One EM step on each listed client's recent window, blended in with ``rho``."""
        rows = np.array([i for i in indices if len(self.histories[i]) >= 2], dtype=np.int64)
        if rows.size == 0:
            return
        seqs = [self.histories[i][-window:] for i in rows]
        lengths = np.array([len(q) for q in seqs])
        obs = np.zeros((rows.size, int(lengths.max())), dtype=np.int64)
        for r, q in enumerate(seqs):
            obs[r, :len(q)] = q
        old = (self.transition[rows], self.emission[rows], self.initial[rows])
        new = hmm.batch_baum_welch_step(*old, obs, lengths, smoothing)
        self.transition[rows], self.emission[rows], self.initial[rows] = hmm.batch_incremental_update(old, new, rho)


def _jitter(mat: np.ndarray, rng: np.random.Generator, scale: float = 0.05) -> np.ndarray:
    out = mat * (1.0 + scale * rng.uniform(-1.0, 1.0, size=mat.shape))
    return out / out.sum(axis=-1, keepdims=True)


@dataclass
class ServerState:
    profile: ServerProfile
    candidates: list  # sorted coverage set
    model: object
    counts: np.ndarray  # effective participation per candidate
    agent: SacAgent | None = None
    predictor: ConflictPredictor | None = None
    random_rng: np.random.Generator | None = None
    state: object = None  # AgentState for the upcoming round
    position: dict = field(default_factory=dict)


@dataclass
class World:
    config: ExperimentConfig
    clients: list
    servers: list
    channel: Channel
    datasets: list
    test_set: tuple
    round_index: int = 0
    log: MetricsLog = field(default_factory=MetricsLog)

    @property
    def task_index(self) -> int:
        return max(self.round_index - 1, 0) // max(self.config.rounds, 1)


def _rng(cfg: ExperimentConfig, *tags) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


def _task_data(cfg: ExperimentConfig, task: int):
    blob = fl.BlobTask(cfg.num_classes, cfg.feature_dim, cfg.train_samples, cfg.test_samples,
                       cfg.center_scale, cfg.blob_spread)
    data_seed = int(np.random.default_rng([cfg.seed, _DATA, task]).integers(2**31))
    train, test = fl.make_blobs(blob, data_seed)
    parts = fl.partition_data(train[0], train[1], cfg.num_clients, cfg.partition, cfg.dirichlet_eta,
                              _rng(cfg, _PARTITION, task))
    return blob, parts, test


def _fresh_model(cfg: ExperimentConfig, blob: fl.BlobTask, task: int):
    return fl.new_model(blob, _rng(cfg, _MODEL, task), cfg.model_hidden)


def sac_config(cfg: ExperimentConfig) -> SacConfig:
    return SacConfig(hidden=cfg.sac_hidden, gamma=cfg.gamma, tau=cfg.tau, critic_lr=cfg.critic_lr,
                     actor_lr=cfg.actor_lr, temperature_lr=cfg.temperature_lr,
                     init_temperature=cfg.init_temperature, target_entropy_scale=cfg.target_entropy_scale,
                     replay_capacity=cfg.replay_capacity, batch_size=cfg.sac_batch_size,
                     warmup_rounds=cfg.warmup_rounds, updates_per_round=cfg.updates_per_round,
                     action_samples=cfg.action_samples, reward_scale=cfg.reward_scale,
                     normalize_rewards=cfg.normalize_rewards, policy_arch=cfg.policy_arch,
                     policy_hidden=cfg.policy_hidden)


def build_world(cfg: ExperimentConfig) -> World:
    """Topology, channel, data and per-server learners for round 1."""
    topo_rng = np.random.default_rng([cfg.topology_seed, _PLACEMENT])
    servers = [ServerProfile(m, pos, cfg.coverage_radius_km, cfg.total_bandwidth_hz, cfg.subset_size)
               for m, pos in enumerate(env.server_layout(cfg.num_servers, cfg.ring_radius_km))]
    positions = env.place_clients(servers, cfg.num_clients, cfg.num_covered, topo_rng, cfg.placement_margin_km)
    rate_rng = np.random.default_rng([cfg.topology_seed, _COMPUTE])
    rates = np.exp(rate_rng.uniform(math.log(cfg.compute_rate_min), math.log(cfg.compute_rate_max),
                                    size=cfg.num_clients))
    blob, parts, test = _task_data(cfg, 0)
    clients = [ClientProfile(k, positions[k], float(rates[k]), len(parts[k])) for k in range(cfg.num_clients)]
    channel_cfg = ChannelConfig(tx_power_w=cfg.tx_power_w, noise_psd_dbm_hz=cfg.noise_psd_dbm_hz,
                                noise_figure_db=cfg.noise_figure_db, ref_bandwidth_hz=cfg.total_bandwidth_hz,
                                pathloss_exponent=cfg.pathloss_exponent,
                                pathloss_at_1km_db=cfg.pathloss_at_1km_db)
    channel_seed = int(np.random.default_rng([cfg.seed, _CHANNEL]).integers(2**31))
    channel = Channel(clients, servers, channel_cfg, channel_seed)
    coverage = env.coverage_sets(clients, servers)
    kind = cfg.policy_kind
    model = _fresh_model(cfg, blob, 0)
    states = []
    for profile, cand in zip(servers, coverage):
        m = profile.server_id
        if len(cand) < cfg.subset_size:
            raise ValueError(f"server {m} covers {len(cand)} clients, fewer than subset size {cfg.subset_size}")
        st = ServerState(profile, list(cand), model.copy(), np.zeros(len(cand), dtype=np.int64),
                         position={c: i for i, c in enumerate(cand)})
        if kind is PolicyKind.RANDOM_FEDAVG:
            st.random_rng = _rng(cfg, _RANDOM, m)
        else:
            st.agent = SacAgent(cand, cfg.subset_size, sac_config(cfg), _rng(cfg, _AGENT, m))
            st.agent.participation = st.counts
            if kind is not PolicyKind.SAC_NO_CRP:
                st.predictor = ConflictPredictor.create(len(cand), cfg.hmm_states, _rng(cfg, _HMM, m))
        states.append(st)
    world = World(cfg, clients, states, channel, parts, test)
    for st in states:
        st.state = observe_state(world, st, 1)
    return world


# --- per-round pieces ----------------------------------------------------------

def latency_estimate(world: World, st: ServerState, round_index: int) -> np.ndarray:
    """Compute time plus upload over an equal share of the band, capped at L_max."""
    cfg = world.config
    snr = world.channel.snr_matrix(round_index)[world.channel.server_index[st.profile.server_id]]
    share = cfg.total_bandwidth_hz / cfg.subset_size
    out = np.empty(len(st.candidates))
    for i, c in enumerate(st.candidates):
        comp = world.clients[c].compute_time(cfg.local_epochs)
        rate = share * math.log2(1.0 + snr[world.channel.client_index[c]])
        out[i] = min(cfg.l_max, comp + cfg.model_bits / rate)
    return out


def observe_state(world: World, st: ServerState, round_index: int):
    if st.agent is None:
        return None
    cfg = world.config
    lat = latency_estimate(world, st, round_index)
    if st.predictor is None:
        probs = np.zeros(len(st.candidates))
    else:
        probs = st.predictor.predict(round_index, cfg.hmm_window, cfg.hmm_min_history)
    return encode_state(lat, probs, cfg.l_max)


def choose(world: World, st: ServerState, round_index: int):
    """Returns (client ids, action or None)."""
    cfg = world.config
    if st.agent is None:
        picks = st.random_rng.permutation(len(st.candidates))[: cfg.subset_size]
        return [st.candidates[i] for i in picks], None
    if round_index <= cfg.warmup_rounds:
        action = st.agent.random_action(st.state)
    else:
        action = st.agent.act(st.state, "explore")
    return list(action.client_ids), action


def allocate(world: World, st: ServerState, selected: list, round_index: int) -> dict:
    cfg = world.config
    budget = cfg.latency_headroom * cfg.l_max
    cands = []
    for c in selected:
        snr = world.channel.snr(c, st.profile.server_id, round_index)
        comp = world.clients[c].compute_time(cfg.local_epochs)
        cands.append((c, snr, env.required_bandwidth(comp, snr, cfg.model_bits, budget)))
    return env.waterfill_allocate(cands, st.profile.total_bandwidth).bandwidth


def run_round(world: World, round_index: int) -> RoundOutcome:
    """One synchronous round over every server; mutates ``world``."""
    if round_index < 1:
        raise ValueError("rounds are numbered from 1")
    cfg = world.config
    _maybe_start_task(world, round_index)
    selections, actions, bandwidth = {}, {}, {}
    for st in world.servers:
        m = st.profile.server_id
        try:
            selections[m], actions[m] = choose(world, st, round_index)
            bandwidth[m] = allocate(world, st, selections[m], round_index)
        except Exception as exc:
            raise RoundError(round_index, m, exc) from exc
    snr = {(st.profile.server_id, c): world.channel.snr(c, st.profile.server_id, round_index)
           for st in world.servers for c in selections[st.profile.server_id]}
    effective, events = env.resolve_conflicts(selections, snr, cfg.conflict_mode)
    outcome = RoundOutcome(round_index, [], events)
    lost_to = {}
    for c, m in events:
        lost_to.setdefault(m, []).append(c)
    alpha = cfg.effective_alpha
    for st in world.servers:
        m = st.profile.server_id
        try:
            outcome.servers.append(_finish_server(world, st, round_index, selections[m], effective[m],
                                                  bandwidth[m], sorted(lost_to.get(m, [])), alpha))
        except RoundError:
            raise
        except Exception as exc:
            raise RoundError(round_index, m, exc) from exc
    observations = env.observe(outcome)
    for st in world.servers:
        m = st.profile.server_id
        try:
            _learn(world, st, round_index, observations, actions[m], outcome)
        except Exception as exc:
            raise RoundError(round_index, m, exc) from exc
    world.round_index = round_index
    return outcome


def _finish_server(world, st, round_index, selected, effective, bandwidth, conflicts, alpha) -> ServerRound:
    cfg = world.config
    m = st.profile.server_id
    latency = {}
    for c in effective:
        snr = world.channel.snr(c, m, round_index)
        comp = world.clients[c].compute_time(cfg.local_epochs)
        latency[c] = env.upload_latency(comp, bandwidth.get(c, 0.0), snr, cfg.model_bits)
    lats = [latency[c] for c in effective]
    if effective:
        round_lat, late = env.round_latency(lats, cfg.l_max)
    else:
        # every pick was lost; the server still waited out the round
        round_lat, late = cfg.l_max, []
    timeouts = [effective[i] for i in late]
    contributors = [c for c in effective if c not in set(timeouts)]
    if contributors:
        tcfg = fl.TrainConfig(cfg.batch_size, cfg.local_epochs, cfg.learning_rate)
        models, counts = [], []
        for c in contributors:
            rng = _rng(cfg, _TRAIN, round_index, m, c)
            models.append(fl.local_train(st.model, world.datasets[c], tcfg, rng))
            counts.append(len(world.datasets[c]))
        st.model = fl.aggregate(models, counts)
        for c in contributors:
            st.counts[st.position[c]] += 1
    penalty = cfg.conflict_weight * (len(conflicts) + len(timeouts))
    fairness = fairness_metric(st.counts, cfg.fairness_epsilon)
    reward = compute_reward(round_lat, penalty, fairness, alpha)
    return ServerRound(m, list(selected), list(effective), dict(bandwidth), latency, round_lat,
                       list(conflicts), timeouts, reward, round_lat, penalty, fairness)


def _learn(world, st, round_index, observations, action, outcome) -> None:
    cfg = world.config
    m = st.profile.server_id
    if st.predictor is not None:
        picked = [st.position[c] for c in outcome.servers[m].selected]
        for c, i in zip(outcome.servers[m].selected, picked):
            st.predictor.record(i, round_index, observations[(m, c)])
        if round_index % cfg.hmm_update_every == 0:
            st.predictor.refit(picked, cfg.hmm_window, cfg.hmm_rho, cfg.hmm_smoothing)
    if st.agent is None:
        return
    next_state = observe_state(world, st, round_index + 1)
    reward = outcome.servers[m].reward
    st.agent.observe(Transition(st.state, action, reward, next_state, False))
    st.state = next_state
    if round_index >= cfg.warmup_rounds and len(st.agent.replay) >= cfg.sac_batch_size:
        diag = st.agent.update()
        world.log.diagnostics.append(diagnostics_row(round_index, m, diag))


def _maybe_start_task(world: World, round_index: int) -> None:
    cfg = world.config
    if cfg.rounds == 0 or round_index == 1 or (round_index - 1) % cfg.rounds:
        return
    task = (round_index - 1) // cfg.rounds
    blob, parts, test = _task_data(cfg, task)
    world.datasets, world.test_set = parts, test
    for c in world.clients:
        c.num_samples = len(parts[c.client_id])
    model = _fresh_model(cfg, blob, task)
    for st in world.servers:
        st.model = model.copy()
        if cfg.reset_counts_per_task:
            st.counts[:] = 0
        # latencies depend on the new sample counts
        st.state = observe_state(world, st, round_index)


def evaluate_world(world: World) -> tuple[list, list, float]:
    """Per-server test accuracy and loss, plus the coverage-weighted objective."""
    x, y = world.test_set
    accs, losses = [], []
    for st in world.servers:
        a, l = fl.evaluate(st.model, x, y)
        accs.append(a)
        losses.append(l)
    objective = fl.global_objective([st.model for st in world.servers],
                                    [[world.datasets[c] for c in st.candidates] for st in world.servers])
    return accs, losses, objective


# --- experiment driver -----------------------------------------------------------

def total_rounds(cfg: ExperimentConfig) -> int:
    return cfg.rounds * cfg.num_tasks


def save_checkpoint(world: World, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            pickle.dump(world, fh, protocol=pickle.HIGHEST_PROTOCOL)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> World:
    try:
        with open(path, "rb") as fh:
            return pickle.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume: bool = False, stop_after: int | None = None,
                   progress=None) -> MetricsLog:
    """Run every round of ``cfg``; with ``out_dir`` metrics are written as the run goes.

    ``resume`` continues from ``out_dir/checkpoint.pkl`` when present.
    ``stop_after`` halts early (used to simulate interruption).
    """
    out = Path(out_dir) if out_dir is not None else None
    world = None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out}: {exc}") from exc
        ckpt = out / "checkpoint.pkl"
        if resume and ckpt.exists():
            world = load_checkpoint(ckpt)
            if world.config.config_hash() != cfg.config_hash():
                raise ValueError(f"checkpoint {ckpt} was written by a different config")
        dump_config(cfg, out / "config.yaml")
    if world is None:
        world = build_world(cfg)
    writer = world.log.open(out, cfg) if out is not None else None
    last = total_rounds(cfg) if stop_after is None else min(stop_after, total_rounds(cfg))
    try:
        for t in range(world.round_index + 1, last + 1):
            outcome = run_round(world, t)
            evals = evaluate_world(world) if t % cfg.eval_every == 0 else None
            rows = round_rows(world, outcome, evals)
            world.log.extend(rows, writer)
            if out is not None and cfg.checkpoint_every and t % cfg.checkpoint_every == 0:
                writer.flush()
                save_checkpoint(world, out / "checkpoint.pkl")
            if progress is not None:
                progress(t, outcome)
    finally:
        if writer is not None:
            writer.close()
    if out is not None:
        world.log.export(out / "metrics.csv", "csv")
        world.log.export_diagnostics(out / "diagnostics.csv", cfg)
    return world.log
