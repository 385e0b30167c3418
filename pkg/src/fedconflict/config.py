"""Experiment configuration: a flat key-value document with a stable hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from enum import Enum

import yaml


class PolicyKind(str, Enum):
    RL_CRP = "rl_crp"
    RL_CRP_NO_FAIRNESS = "rl_crp_no_fairness"
    RANDOM_FEDAVG = "random_fedavg"
    # SAC with conflict features zeroed; stand-in for an external SAC baseline
    SAC_NO_CRP = "sac_no_crp"


@dataclass(frozen=True)
class ExperimentConfig:
    # topology
    num_servers: int = 2
    num_clients: int = 50
    num_covered: int = 40
    coverage_radius_km: float = 1.0
    ring_radius_km: float = 0.6
    placement_margin_km: float = 0.5
    compute_rate_min: float = 50.0
    compute_rate_max: float = 500.0
    # channel
    total_bandwidth_hz: float = 100e6
    tx_power_w: float = 0.1
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 9.0
    pathloss_exponent: float = 3.5
    pathloss_at_1km_db: float = 128.1
    model_bits: float = 1e6
    latency_headroom: float = 0.8
    conflict_mode: str = "winner"
    # selection and reward
    subset_size: int = 5
    l_max: float = 40.0
    alpha: float = 100.0
    conflict_weight: float = 10.0
    fairness_epsilon: float = 1e-8
    policy: str = PolicyKind.RL_CRP.value
    # federated task
    num_classes: int = 4
    feature_dim: int = 8
    train_samples: int = 2000
    test_samples: int = 1000
    center_scale: float = 1.5
    blob_spread: float = 1.0
    partition: str = "dirichlet"
    dirichlet_eta: float = 0.1
    model_hidden: tuple = ()
    batch_size: int = 16
    local_epochs: int = 5
    learning_rate: float = 0.005
    # sac
    sac_hidden: tuple = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4
    temperature_lr: float = 1e-3
    init_temperature: float = 0.05
    target_entropy_scale: float = 0.5
    replay_capacity: int = 50_000
    sac_batch_size: int = 64
    warmup_rounds: int = 200
    updates_per_round: int = 1
    action_samples: int = 4
    reward_scale: float = 1.0
    normalize_rewards: bool = True
    policy_arch: str = "shared"
    policy_hidden: tuple = (32, 32)
    # hmm
    hmm_states: int = 2
    hmm_rho: float = 0.1
    hmm_smoothing: float = 1e-6
    hmm_window: int = 50
    hmm_min_history: int = 3
    hmm_update_every: int = 1
    # run
    rounds: int = 1000
    eval_every: int = 10
    seed: int = 0
    placement_seed: int | None = None
    checkpoint_every: int = 0
    num_tasks: int = 1
    reset_counts_per_task: bool = True

    def __post_init__(self):
        PolicyKind(self.policy)
        object.__setattr__(self, "model_hidden", tuple(int(h) for h in self.model_hidden))
        object.__setattr__(self, "sac_hidden", tuple(int(h) for h in self.sac_hidden))
        object.__setattr__(self, "policy_hidden", tuple(int(h) for h in self.policy_hidden))
        if self.num_servers < 1 or self.subset_size < 1 or self.rounds < 0:
            raise ValueError("num_servers and subset_size must be >= 1, rounds >= 0")
        if not 0 <= self.num_covered <= self.num_clients:
            raise ValueError("num_covered must lie in [0, num_clients]")
        if self.conflict_mode not in ("winner", "all_fail"):
            raise ValueError(f"unknown conflict mode {self.conflict_mode!r}")
        if self.eval_every < 1 or self.num_tasks < 1 or self.hmm_update_every < 1:
            raise ValueError("eval_every, num_tasks and hmm_update_every must be >= 1")

    @property
    def policy_kind(self) -> PolicyKind:
        return PolicyKind(self.policy)

    @property
    def topology_seed(self) -> int:
        return self.seed if self.placement_seed is None else self.placement_seed

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.policy_kind is PolicyKind.RL_CRP_NO_FAIRNESS else self.alpha

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["model_hidden"] = list(self.model_hidden)
        doc["sac_hidden"] = list(self.sac_hidden)
        doc["policy_hidden"] = list(self.policy_hidden)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, **changes) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def topology_key(self) -> dict:
        """Every field except the policy; runs that agree here are comparable."""
        doc = self.to_dict()
        doc.pop("policy")
        return doc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError(f"config {path} must be a flat mapping")
    return ExperimentConfig.from_dict(doc)


def dump_config(config: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=False)
