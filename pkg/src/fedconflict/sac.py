"""Per-server soft actor-critic over S-client subsets.

The policy emits one logit per candidate client; a subset is drawn by
Plackett-Luce sampling (sequential softmax without replacement), which gives
an exact log-probability for the ordered draw. Critics score
``state ++ selection_mask``. Because the action is discrete there is no
reparameterisation path, so the actor is trained with a score-function
estimator of the standard SAC actor loss using a leave-one-out baseline over
several sampled subsets per state.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import AdamState, Mlp, NonFiniteError, adam_step, adam_update, mlp_backward, mlp_forward, polyak_update


@dataclass
class SacConfig:
    hidden: tuple = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    temperature_lr: float = 3e-4
    init_temperature: float = 1.0
    # H = target_entropy_scale * S * log(n)
    target_entropy_scale: float = 0.5
    replay_capacity: int = 50_000
    batch_size: int = 64
    warmup_rounds: int = 200
    updates_per_round: int = 1
    action_samples: int = 4
    reward_scale: float = 1.0
    # centre and scale rewards by running statistics before they enter the targets
    normalize_rewards: bool = True
    clip_norm: float | None = None
    # "shared": one small network scores every client from its own (latency, risk) pair;
    # "mlp": one network maps the whole state to all logits
    policy_arch: str = "shared"
    policy_hidden: tuple = (32, 32)


# --- state / action containers ----------------------------------------------

@dataclass
class AgentState:
    latencies: np.ndarray
    conflict_probs: np.ndarray
    features: np.ndarray


@dataclass
class ActionSubset:
    client_ids: tuple
    positions: tuple  # indices into the canonical coverage order, in draw order
    log_prob: float


@dataclass
class Transition:
    state: AgentState
    action: ActionSubset
    reward: float
    next_state: AgentState
    done: bool = False


def encode_state(latencies, conflict_probs, l_max: float) -> AgentState:
    lat = np.asarray(latencies, dtype=float)
    probs = np.asarray(conflict_probs, dtype=float)
    if lat.shape != probs.shape:
        raise ValueError("latency and conflict-probability vectors differ in length")
    if np.any(lat < 0) or np.any(probs < 0) or np.any(probs > 1):
        raise ValueError("latencies must be >= 0 and probabilities in [0, 1]")
    return AgentState(lat, probs, np.concatenate([lat / l_max, probs]))


def selection_mask(positions, n: int) -> np.ndarray:
    mask = np.zeros(n)
    mask[list(positions)] = 1.0
    return mask


# --- Plackett-Luce -----------------------------------------------------------

def pl_log_prob(logits: np.ndarray, orders: np.ndarray):
    """Log-probability of ordered draws and its gradient w.r.t. the logits.

    ``logits`` is (..., n) and ``orders`` (..., S) with matching leading dims.
    """
    logits = np.asarray(logits, dtype=float)
    orders = np.asarray(orders, dtype=int)
    lead = orders.shape[:-1]
    logits = np.broadcast_to(logits, lead + logits.shape[-1:])
    flat = logits.reshape(-1, logits.shape[-1])
    flat_orders = orders.reshape(-1, orders.shape[-1])
    rows = np.arange(flat.shape[0])
    masked = flat.copy()
    logp = np.zeros(flat.shape[0])
    grad = np.zeros_like(flat)
    for j in range(flat_orders.shape[1]):
        pick = flat_orders[:, j]
        top = masked.max(axis=1, keepdims=True)
        w = np.exp(masked - top)
        total = w.sum(axis=1, keepdims=True)
        logp += flat[rows, pick] - (top[:, 0] + np.log(total[:, 0]))
        grad -= w / total
        grad[rows, pick] += 1.0
        masked[rows, pick] = -np.inf
    return logp.reshape(lead), grad.reshape(lead + flat.shape[-1:])


def sample_orders(logits: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Batched Plackett-Luce draws via Gumbel top-k (same law as sequential draws)."""
    gumbel = rng.gumbel(size=np.shape(logits))
    keys = logits + gumbel
    part = np.argpartition(-keys, size - 1, axis=-1)[..., :size]
    ordered = np.take_along_axis(keys, part, axis=-1)
    return np.take_along_axis(part, np.argsort(-ordered, axis=-1, kind="stable"), axis=-1)


def sample_sequential(logits: np.ndarray, size: int, rng: np.random.Generator) -> list:
    remaining = list(range(len(logits)))
    picks = []
    for _ in range(size):
        z = np.asarray([logits[i] for i in remaining])
        p = np.exp(z - z.max())
        p /= p.sum()
        k = int(rng.choice(len(remaining), p=p))
        picks.append(remaining.pop(k))
    return picks


def greedy_order(logits: np.ndarray, size: int) -> list:
    # stable sort on -logits keeps the lower index first among ties
    return [int(i) for i in np.argsort(-np.asarray(logits), kind="stable")[:size]]


# --- reward ------------------------------------------------------------------

def fairness_metric(participation_counts, epsilon: float = 1e-8) -> float:
    counts = np.asarray(participation_counts, dtype=float)
    if counts.size == 0:
        raise ValueError("participation counts must be non-empty")
    mu = counts.mean()
    delta = counts.std()
    return float(np.tanh(mu / (delta + epsilon)))


def compute_reward(round_latency: float, conflict_penalty: float, fairness: float, alpha: float) -> float:
    return -round_latency - conflict_penalty + alpha * fairness


# --- replay ------------------------------------------------------------------

@dataclass
class Batch:
    states: np.ndarray
    masks: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray


class ReplayBuffer:
    """FIFO ring buffer of transitions stored as flat arrays."""

    def __init__(self, capacity: int, state_dim: int, num_candidates: int):
        self.capacity = capacity
        self.states = np.zeros((capacity, state_dim))
        self.masks = np.zeros((capacity, num_candidates))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self) -> int:
        return self.size

    def store(self, transition: Transition) -> None:
        if not math.isfinite(transition.reward):
            raise NonFiniteError("non-finite reward")
        i = self.cursor
        self.states[i] = transition.state.features
        self.masks[i] = selection_mask(transition.action.positions, self.masks.shape[1])
        self.rewards[i] = transition.reward
        self.next_states[i] = transition.next_state.features
        self.dones[i] = float(transition.done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def slot(self, age: int) -> int:
        """Storage index of the ``age``-th oldest transition."""
        start = (self.cursor - self.size) % self.capacity
        return (start + age) % self.capacity

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self.size < batch_size:
            raise ValueError(f"buffer holds {self.size} transitions, need {batch_size}")
        return rng.integers(0, self.size, size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(batch_size, rng)
        return Batch(self.states[idx], self.masks[idx], self.rewards[idx],
                     self.next_states[idx], self.dones[idx])


@dataclass
class RunningStats:
    """Welford running mean and population variance."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, value: float) -> None:
        self.count += 1
        delta = value - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (value - self.mean)

    @property
    def std(self) -> float:
        return math.sqrt(self.m2 / self.count) if self.count else 0.0

    def normalize(self, values: np.ndarray) -> np.ndarray:
        if self.count < 2:
            return values
        return (values - self.mean) / (self.std + 1e-8)


def store_transition(buffer: ReplayBuffer, transition: Transition) -> None:
    buffer.store(transition)


def sample_batch(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> Batch:
    return buffer.sample(batch_size, rng)


# --- networks ----------------------------------------------------------------

@dataclass
class SacNetworks:
    policy: Mlp
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp
    log_temperature: np.ndarray  # shape (1,)
    target_entropy: float
    shared_policy: bool = False

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature[0]))

    @classmethod
    def build(cls, num_candidates: int, subset_size: int, config: SacConfig,
              rng: np.random.Generator) -> "SacNetworks":
        state_dim = 2 * num_candidates
        hidden = list(config.hidden)
        if config.policy_arch == "shared":
            policy = Mlp.init([2, *config.policy_hidden, 1], rng)
        elif config.policy_arch == "mlp":
            policy = Mlp.init([state_dim, *hidden, num_candidates], rng)
        else:
            raise ValueError(f"unknown policy architecture {config.policy_arch!r}")
        q1 = Mlp.init([state_dim + num_candidates, *hidden, 1], rng)
        q2 = Mlp.init([state_dim + num_candidates, *hidden, 1], rng)
        return cls(policy, q1, q2, q1.copy(), q2.copy(),
                   np.array([math.log(config.init_temperature)]),
                   config.target_entropy_scale * subset_size * math.log(num_candidates),
                   config.policy_arch == "shared")


def _per_client(states: np.ndarray) -> np.ndarray:
    """(..., 2n) state features -> (..., n, 2) rows of (latency, conflict probability)."""
    n = states.shape[-1] // 2
    return np.stack([states[..., :n], states[..., n:]], axis=-1)


def policy_logits(policy: Mlp, states, shared: bool = False) -> np.ndarray:
    states = np.asarray(states, dtype=float)
    if shared:
        return mlp_forward(policy, _per_client(states))[..., 0]
    return mlp_forward(policy, states)


def policy_backward(policy: Mlp, states, logit_grad, shared: bool = False):
    """Parameter gradient of sum(logits * logit_grad)."""
    states = np.asarray(states, dtype=float)
    if shared:
        return mlp_backward(policy, _per_client(states), np.asarray(logit_grad)[..., None])
    return mlp_backward(policy, states, logit_grad)


def q_value(critic: Mlp, states: np.ndarray, masks: np.ndarray) -> np.ndarray:
    return mlp_forward(critic, np.concatenate([states, masks], axis=-1))[..., 0]


def critic_loss_and_grads(critic: Mlp, states, masks, targets):
    """Mean squared Bellman error for fixed targets, with parameter gradients."""
    inputs = np.concatenate([states, masks], axis=-1)
    q = mlp_forward(critic, inputs)[:, 0]
    err = q - targets
    loss = float(np.mean(err ** 2))
    grads = mlp_backward(critic, inputs, (2.0 * err / err.size)[:, None])
    return loss, grads


def actor_surrogate(policy: Mlp, states, orders, weights, shared: bool = False):
    """mean(weights * log pi(orders | states)) with gradient; weights are constants.

    ``orders`` is (B, M, S) and ``weights`` (B, M).
    """
    logits = policy_logits(policy, states, shared)
    logp, dlogp = pl_log_prob(logits[:, None, :], orders)
    value = float(np.mean(weights * logp))
    out_grad = (weights[..., None] * dlogp).sum(axis=1) / weights.size
    return value, policy_backward(policy, states, out_grad, shared)


def temperature_loss_and_grad(log_temperature: float, log_probs, target_entropy: float):
    """L(eta) = mean(-eta * (log pi + H)) and dL/d(log eta)."""
    eta = math.exp(log_temperature)
    loss = float(np.mean(-eta * (np.asarray(log_probs) + target_entropy)))
    return loss, loss


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite {what}")


# --- agent -------------------------------------------------------------------

class SacAgent:
    """One decentralised learner; owns its networks, optimisers and replay."""

    def __init__(self, candidate_ids, subset_size: int, config: SacConfig, rng: np.random.Generator):
        self.candidate_ids = tuple(int(c) for c in candidate_ids)
        self.n = len(self.candidate_ids)
        self.subset_size = subset_size
        if self.n < subset_size:
            raise ValueError("insufficient candidates")
        self.config = config
        self.rng = rng
        self.nets = SacNetworks.build(self.n, subset_size, config, rng)
        self.policy_opt = AdamState.for_params(self.nets.policy.params())
        self.q1_opt = AdamState.for_params(self.nets.q1.params())
        self.q2_opt = AdamState.for_params(self.nets.q2.params())
        self.temperature_opt = AdamState.for_params([self.nets.log_temperature])
        self.replay = ReplayBuffer(config.replay_capacity, 2 * self.n, self.n)
        self.participation = np.zeros(self.n, dtype=np.int64)
        self.reward_stats = RunningStats()

    def observe(self, transition: Transition) -> None:
        """Store a transition and fold its reward into the running statistics."""
        self.replay.store(transition)
        self.reward_stats.push(transition.reward)

    def act(self, state: AgentState, mode: str = "explore") -> ActionSubset:
        return select_action(self.nets, state, self.subset_size, mode, self.rng, self.candidate_ids)

    def random_action(self, state: AgentState) -> ActionSubset:
        positions = [int(p) for p in self.rng.permutation(self.n)[: self.subset_size]]
        logits = policy_logits(self.nets.policy, state.features, self.nets.shared_policy)
        logp, _ = pl_log_prob(logits, np.array(positions))
        return ActionSubset(tuple(self.candidate_ids[p] for p in positions), tuple(positions), float(logp))

    def update(self) -> dict:
        cfg = self.config
        out = {}
        for _ in range(cfg.updates_per_round):
            batch = self.replay.sample(cfg.batch_size, self.rng)
            out["critic_loss"] = update_critics(self, batch)
            out["actor_loss"], out["entropy"] = update_actor(self, batch.states)
            out["temperature_loss"] = update_temperature(self, batch.states)
        out["temperature"] = self.nets.temperature
        return out

    def to_dict(self) -> dict:
        n = self.nets
        return {
            "candidate_ids": list(self.candidate_ids),
            "subset_size": self.subset_size,
            "config": asdict(self.config),
            "policy": n.policy.to_dict(), "q1": n.q1.to_dict(), "q2": n.q2.to_dict(),
            "q1_target": n.q1_target.to_dict(), "q2_target": n.q2_target.to_dict(),
            "log_temperature": float(n.log_temperature[0]),
            "target_entropy": n.target_entropy,
            "policy_opt": self.policy_opt.to_dict(), "q1_opt": self.q1_opt.to_dict(),
            "q2_opt": self.q2_opt.to_dict(), "temperature_opt": self.temperature_opt.to_dict(),
            "participation": self.participation.tolist(),
            "reward_stats": asdict(self.reward_stats),
        }

    @classmethod
    def from_dict(cls, doc: dict, rng: np.random.Generator) -> "SacAgent":
        cfg = dict(doc["config"])
        cfg["hidden"] = tuple(cfg["hidden"])
        cfg["policy_hidden"] = tuple(cfg.get("policy_hidden", (32, 32)))
        agent = cls(doc["candidate_ids"], doc["subset_size"], SacConfig(**cfg), rng)
        nets = agent.nets
        for name in ("policy", "q1", "q2", "q1_target", "q2_target"):
            setattr(nets, name, Mlp.from_dict(doc[name]))
        nets.log_temperature = np.array([doc["log_temperature"]])
        nets.target_entropy = doc["target_entropy"]
        nets.shared_policy = agent.config.policy_arch == "shared"
        agent.policy_opt = AdamState.from_dict(doc["policy_opt"], nets.policy.params())
        agent.q1_opt = AdamState.from_dict(doc["q1_opt"], nets.q1.params())
        agent.q2_opt = AdamState.from_dict(doc["q2_opt"], nets.q2.params())
        agent.temperature_opt = AdamState.from_dict(doc["temperature_opt"], [nets.log_temperature])
        agent.participation = np.array(doc["participation"], dtype=np.int64)
        agent.reward_stats = RunningStats(**doc.get("reward_stats", {}))
        return agent


def select_action(nets: SacNetworks, state: AgentState, subset_size: int, mode: str,
                  rng: np.random.Generator, candidate_ids=None) -> ActionSubset:
    n = state.latencies.size
    if subset_size > n:
        raise ValueError("insufficient candidates")
    ids = tuple(range(n)) if candidate_ids is None else tuple(candidate_ids)
    logits = policy_logits(nets.policy, state.features, nets.shared_policy)
    if mode == "explore":
        positions = sample_sequential(logits, subset_size, rng)
    elif mode == "greedy":
        positions = greedy_order(logits, subset_size)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    logp, _ = pl_log_prob(logits, np.array(positions))
    return ActionSubset(tuple(ids[p] for p in positions), tuple(positions), float(logp))


def _sample_with_logp(nets: SacNetworks, states: np.ndarray, size: int, draws: int, rng):
    logits = policy_logits(nets.policy, states, nets.shared_policy)
    expanded = np.repeat(logits[:, None, :], draws, axis=1)
    orders = sample_orders(expanded, size, rng)
    logp, _ = pl_log_prob(expanded, orders)
    return orders, logp


def _masks(orders: np.ndarray, n: int) -> np.ndarray:
    masks = np.zeros(orders.shape[:-1] + (n,))
    np.put_along_axis(masks, orders, 1.0, axis=-1)
    return masks


def bellman_targets(agent: SacAgent, batch: Batch) -> np.ndarray:
    cfg, nets = agent.config, agent.nets
    orders, logp = _sample_with_logp(nets, batch.next_states, agent.subset_size, 1, agent.rng)
    next_masks = _masks(orders[:, 0], agent.n)
    q_next = np.minimum(q_value(nets.q1_target, batch.next_states, next_masks),
                        q_value(nets.q2_target, batch.next_states, next_masks))
    soft = q_next - nets.temperature * logp[:, 0]
    rewards = agent.reward_stats.normalize(batch.rewards) if cfg.normalize_rewards else batch.rewards
    return cfg.reward_scale * rewards + cfg.gamma * (1.0 - batch.dones) * soft


def update_critics(agent: SacAgent, batch: Batch) -> float:
    """One step on both critics, then Polyak-average the targets."""
    cfg, nets = agent.config, agent.nets
    targets = bellman_targets(agent, batch)
    losses = []
    for critic, opt in ((nets.q1, agent.q1_opt), (nets.q2, agent.q2_opt)):
        loss, grads = critic_loss_and_grads(critic, batch.states, batch.masks, targets)
        _check_finite(loss, "critic loss")
        adam_step(critic, grads, opt, cfg.critic_lr, cfg.clip_norm)
        losses.append(loss)
    polyak_update(nets.q1_target, nets.q1, cfg.tau)
    polyak_update(nets.q2_target, nets.q2, cfg.tau)
    return float(np.mean(losses))


def update_actor(agent: SacAgent, states: np.ndarray) -> tuple[float, float]:
    """Step the policy on E[eta log pi(a|s) - min_j Q_j(s, a)]; returns (loss, entropy)."""
    cfg, nets = agent.config, agent.nets
    draws = max(1, cfg.action_samples)
    orders, logp = _sample_with_logp(nets, states, agent.subset_size, draws, agent.rng)
    masks = _masks(orders, agent.n)
    rep_states = np.repeat(states[:, None, :], draws, axis=1)
    q = np.minimum(q_value(nets.q1, rep_states, masks), q_value(nets.q2, rep_states, masks))
    cost = nets.temperature * logp - q
    loss = float(np.mean(cost))
    _check_finite(loss, "actor loss")
    if draws > 1:
        baseline = (cost.sum(axis=1, keepdims=True) - cost) / (draws - 1)
    else:
        baseline = np.full_like(cost, cost.mean())
    _, grads = actor_surrogate(nets.policy, states, orders, cost - baseline, nets.shared_policy)
    adam_step(nets.policy, grads, agent.policy_opt, cfg.actor_lr, cfg.clip_norm)
    return loss, float(-np.mean(logp))


def update_temperature(agent: SacAgent, states: np.ndarray) -> float:
    cfg, nets = agent.config, agent.nets
    _, logp = _sample_with_logp(nets, states, agent.subset_size, 1, agent.rng)
    loss, grad = temperature_loss_and_grad(float(nets.log_temperature[0]), logp[:, 0], nets.target_entropy)
    _check_finite(loss, "temperature loss")
    adam_update([nets.log_temperature], [np.array([grad])], agent.temperature_opt, cfg.temperature_lr)
    return loss
