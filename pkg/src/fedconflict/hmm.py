"""Gap-aware categorical HMM for per-client conflict risk.

A server keeps one :class:`HmmParams` per client in its coverage set. The
observation stream for a client only grows in rounds where the server
selected it (``1`` = lost to conflict or timeout, ``0`` = normal), so the
prediction target sits ``d`` rounds past the last observation and the
filtered posterior is pushed through ``A^d`` before reading off the
emission probability of a conflict.

Forward/backward passes are scaled per step; the log-likelihood is the sum
of log scale factors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

ROW_TOL = 1e-9
DEFAULT_SMOOTHING = 1e-6


class HmmError(ValueError):
    pass


@dataclass
class HmmParams:
    """lambda = (A, B, pi) for a K-state, V-category HMM."""

    transition: np.ndarray  # (K, K)
    emission: np.ndarray  # (K, V)
    initial: np.ndarray  # (K,)

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.emission = np.asarray(self.emission, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        k = self.initial.shape[0]
        if self.transition.shape != (k, k) or self.emission.ndim != 2 or self.emission.shape[0] != k:
            raise HmmError(
                f"inconsistent shapes A{self.transition.shape} B{self.emission.shape} pi{self.initial.shape}"
            )

    @property
    def num_states(self) -> int:
        return self.initial.shape[0]

    @property
    def num_categories(self) -> int:
        return self.emission.shape[1]

    def validate(self, tol: float = ROW_TOL) -> None:
        for name, mat in (("transition", self.transition), ("emission", self.emission),
                          ("initial", self.initial[None, :])):
            if np.any(mat < 0) or np.any(mat > 1) or not np.all(np.isfinite(mat)):
                raise HmmError(f"{name} has entries outside [0, 1]")
            if np.any(np.abs(mat.sum(axis=1) - 1.0) > tol):
                raise HmmError(f"{name} rows do not sum to 1")

    def copy(self) -> "HmmParams":
        return HmmParams(self.transition.copy(), self.emission.copy(), self.initial.copy())

    def to_dict(self) -> dict:
        return {
            "K": self.num_states,
            "V": self.num_categories,
            "A": self.transition.tolist(),
            "B": self.emission.tolist(),
            "pi": self.initial.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "HmmParams":
        params = cls(np.array(doc["A"], dtype=float), np.array(doc["B"], dtype=float),
                     np.array(doc["pi"], dtype=float))
        if params.num_states != doc["K"] or params.num_categories != doc["V"]:
            raise HmmError("K/V do not match array shapes")
        return params

    def to_json(self) -> str:
        # json uses repr for floats, which round-trips float64 exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "HmmParams":
        return cls.from_dict(json.loads(text))


def random_params(num_states: int, num_categories: int, rng: np.random.Generator) -> HmmParams:
    """Rows drawn from a flat Dirichlet."""
    ones_k = np.ones(num_states)
    return HmmParams(
        rng.dirichlet(ones_k, size=num_states),
        rng.dirichlet(np.ones(num_categories), size=num_states),
        rng.dirichlet(ones_k),
    )


@dataclass
class SelectionHistory:
    """Append-only observation prefix for one (server, client) pair."""

    client_id: int
    observations: list
    last_observed_round: int | None = None
    current_round: int = 0

    @property
    def gap(self) -> int:
        if self.last_observed_round is None:
            return self.current_round
        return self.current_round - self.last_observed_round

    def record(self, round_index: int, value: int) -> None:
        if self.last_observed_round is not None and round_index <= self.last_observed_round:
            raise HmmError("observations must be appended in round order")
        self.observations.append(int(value))
        self.last_observed_round = round_index
        self.current_round = max(self.current_round, round_index)

    def advance(self, round_index: int) -> None:
        if round_index < self.current_round:
            raise HmmError("current round cannot move backwards")
        self.current_round = round_index


@dataclass
class ForwardResult:
    scaled_alpha: np.ndarray  # (T, K), rows sum to 1
    scale_factors: np.ndarray  # (T,)
    log_likelihood: float


def _check_obs(params: HmmParams, obs: Sequence[int]) -> np.ndarray:
    obs = np.asarray(obs, dtype=int)
    if obs.size == 0:
        raise HmmError("empty observation sequence")
    if np.any(obs < 0) or np.any(obs >= params.num_categories):
        raise HmmError("category out of range")
    return obs


def forward(params: HmmParams, obs: Sequence[int]) -> ForwardResult:
    obs = _check_obs(params, obs)
    a, b = params.transition, params.emission
    steps, k = obs.size, params.num_states
    alpha = np.empty((steps, k))
    scale = np.empty(steps)
    cur = params.initial * b[:, obs[0]]
    for t in range(steps):
        if t > 0:
            cur = (alpha[t - 1] @ a) * b[:, obs[t]]
        c = cur.sum()
        if c <= 0.0:
            raise HmmError("observation sequence has zero probability under the model")
        scale[t] = c
        alpha[t] = cur / c
    return ForwardResult(alpha, scale, float(np.log(scale).sum()))


def posterior_state(fwd: ForwardResult, at: int) -> np.ndarray:
    """Filtered posterior P(h_at | o_1..o_at)."""
    if not 0 <= at < fwd.scaled_alpha.shape[0]:
        raise HmmError(f"time index {at} out of range")
    row = fwd.scaled_alpha[at]
    return row / row.sum()


def propagate(posterior: np.ndarray, transition: np.ndarray, steps: int) -> np.ndarray:
    """Push a state distribution ``steps`` transitions forward."""
    out = np.asarray(posterior, dtype=float)
    for _ in range(steps):
        out = out @ transition
    return out


def predict_conflict(params: HmmParams, history: SelectionHistory) -> float:
    """P(o_t = 1 | observed prefix) with t = history.current_round."""
    gap = history.gap
    if gap == 0:
        raise HmmError("prediction target coincides with last observation")
    if gap < 0:
        raise HmmError("current round precedes last observation")
    fwd = forward(params, history.observations)
    gamma = posterior_state(fwd, len(history.observations) - 1)
    before_target = propagate(gamma, params.transition, gap - 1)
    p = float(before_target @ params.transition @ params.emission[:, 1])
    return min(1.0, max(0.0, p))


def prior_conflict(params: HmmParams, steps: int) -> float:
    """Conflict probability with no observations: pi A^steps B[:, 1]."""
    dist = propagate(params.initial, params.transition, steps)
    return float(min(1.0, max(0.0, dist @ params.emission[:, 1])))


def backward(params: HmmParams, obs: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Scaled backward variables and the forward scale factors they share.

    Unscaled beta_t = scaled[t] * prod(scale[t+1:]).
    """
    obs = _check_obs(params, obs)
    scale = forward(params, obs).scale_factors
    a, b = params.transition, params.emission
    steps = obs.size
    beta = np.empty((steps, params.num_states))
    beta[-1] = 1.0
    for t in range(steps - 2, -1, -1):
        beta[t] = a @ (b[:, obs[t + 1]] * beta[t + 1]) / scale[t + 1]
    return beta, scale


def _normalize_rows(mat: np.ndarray, smoothing: float) -> np.ndarray:
    """Normalise rows, then add the floor and renormalise.

    A zero-mass row becomes uniform when ``smoothing > 0``.
    """
    sums = mat.sum(axis=-1, keepdims=True)
    if smoothing <= 0 and np.any(sums <= 0):
        raise HmmError("zero-mass row; use a positive smoothing floor")
    rows = np.divide(mat, sums, out=np.zeros_like(mat, dtype=float), where=sums > 0)
    if smoothing > 0:
        rows = rows + smoothing
        rows /= rows.sum(axis=-1, keepdims=True)
    return rows


def expected_statistics(params: HmmParams, obs: Sequence[int]):
    """gamma (T, K) and summed xi (K, K) under ``params``."""
    obs = _check_obs(params, obs)
    fwd = forward(params, obs)
    beta, scale = backward(params, obs)
    alpha = fwd.scaled_alpha
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    a, b = params.transition, params.emission
    # xi_t(i, j) = alpha_t(i) A_ij B_j(o_{t+1}) beta_{t+1}(j) / c_{t+1}
    emit_next = b[:, obs[1:]].T * beta[1:]  # (T-1, K)
    xi = alpha[:-1, :, None] * a[None, :, :] * (emit_next / scale[1:, None])[:, None, :]
    return gamma, xi.sum(axis=0), fwd


def baum_welch_step(params: HmmParams, obs: Sequence[int],
                    smoothing: float = DEFAULT_SMOOTHING) -> HmmParams:
    """One batch re-estimate of (A, B, pi) on a single sequence."""
    obs = _check_obs(params, obs)
    if obs.size < 2:
        raise HmmError("insufficient data for transition estimation")
    gamma, xi_sum, _ = expected_statistics(params, obs)
    # rows of xi_sum already total sum_{t<T} gamma_t(i)
    transition = _normalize_rows(xi_sum, smoothing)
    counts = np.zeros((params.num_states, params.num_categories))
    for v in range(params.num_categories):
        counts[:, v] = gamma[obs == v].sum(axis=0)
    emission = _normalize_rows(counts, smoothing)
    initial = _normalize_rows(gamma[0], smoothing)
    return HmmParams(transition, emission, initial)


def incremental_update(old: HmmParams, batch_estimate: HmmParams, rho: float) -> HmmParams:
    """EMA blend ``(1 - rho) * old + rho * new`` with row renormalisation."""
    if not 0.0 < rho <= 1.0:
        raise HmmError("rho must be in (0, 1]")
    if (old.transition.shape != batch_estimate.transition.shape
            or old.emission.shape != batch_estimate.emission.shape):
        raise HmmError("shape mismatch between old and batch estimate")

    def blend(x, y):
        return _normalize_rows((1.0 - rho) * x + rho * y, 0.0)

    return HmmParams(blend(old.transition, batch_estimate.transition),
                     blend(old.emission, batch_estimate.emission),
                     blend(old.initial, batch_estimate.initial))


def batch_predict(transition: np.ndarray, emission: np.ndarray, initial: np.ndarray,
                  obs: np.ndarray, lengths: np.ndarray, gaps: np.ndarray) -> np.ndarray:
    """Vectorised :func:`predict_conflict` over many clients.

    ``transition`` is (C, K, K), ``emission`` (C, K, V), ``initial`` (C, K);
    ``obs`` is (C, W) right-aligned (padding on the left), ``lengths`` the
    number of real observations per row (>= 1) and ``gaps`` the trailing gap
    (>= 1).
    """
    n, width = obs.shape
    idx = np.arange(n)
    start = width - lengths
    alpha = np.array(initial, dtype=float)
    for t in range(width):
        emit = emission[idx, :, obs[:, t]]
        first = (t == start)[:, None]
        live = (t > start)[:, None]
        stepped = np.einsum("ck,ckj->cj", alpha, transition) * emit
        seeded = initial * emit
        cur = np.where(first, seeded, np.where(live, stepped, alpha))
        alpha = cur / cur.sum(axis=1, keepdims=True)
    out = alpha
    max_gap = int(gaps.max()) if n else 0
    for step in range(max_gap):
        moved = np.einsum("ck,ckj->cj", out, transition)
        out = np.where((step < gaps)[:, None], moved, out)
    p = np.einsum("ck,ck->c", out, emission[:, :, 1])
    return np.clip(p, 0.0, 1.0)


def batch_baum_welch_step(transition: np.ndarray, emission: np.ndarray, initial: np.ndarray,
                          obs: np.ndarray, lengths: np.ndarray,
                          smoothing: float = DEFAULT_SMOOTHING) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`baum_welch_step` over many clients.

    ``obs`` is (C, W) left-aligned (padding on the right) and ``lengths``
    gives the number of real observations per row (>= 2).
    """
    lengths = np.asarray(lengths)
    if np.any(lengths < 2):
        raise HmmError("insufficient data for transition estimation")
    n, width = obs.shape
    k = initial.shape[1]
    valid = np.arange(width)[None, :] < lengths[:, None]  # (C, W)
    emit = np.take_along_axis(emission[:, None, :, :], obs[:, :, None, None], axis=3)[..., 0]  # (C, W, K)
    alpha = np.empty((n, width, k))
    scale = np.ones((n, width))
    cur = initial * emit[:, 0]
    for t in range(width):
        if t > 0:
            cur = np.einsum("ck,ckj->cj", alpha[:, t - 1], transition) * emit[:, t]
            cur = np.where(valid[:, t, None], cur, 1.0)
        c = cur.sum(axis=1)
        if np.any(c <= 0.0):
            raise HmmError("observation sequence has zero probability under the model")
        scale[:, t] = c
        alpha[:, t] = cur / c[:, None]
    beta = np.ones((n, width, k))
    for t in range(width - 2, -1, -1):
        step = np.einsum("cij,cj->ci", transition, emit[:, t + 1] * beta[:, t + 1]) / scale[:, t + 1, None]
        beta[:, t] = np.where(valid[:, t + 1, None], step, 1.0)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=2, keepdims=True)
    gamma *= valid[:, :, None]
    pair = valid[:, 1:, None, None]
    xi = (alpha[:, :-1, :, None] * transition[:, None, :, :]
          * (emit[:, 1:] * beta[:, 1:] / scale[:, 1:, None])[:, :, None, :])
    xi_sum = (xi * pair).sum(axis=1)
    v = emission.shape[2]
    counts = np.stack([(gamma * (obs == c)[:, :, None]).sum(axis=1) for c in range(v)], axis=2)
    return (_normalize_rows(xi_sum, smoothing), _normalize_rows(counts, smoothing),
            _normalize_rows(gamma[:, 0], smoothing))


def batch_incremental_update(old: tuple, new: tuple, rho: float) -> tuple:
    """:func:`incremental_update` over stacked (transition, emission, initial) arrays."""
    if not 0.0 < rho <= 1.0:
        raise HmmError("rho must be in (0, 1]")
    return tuple(_normalize_rows((1.0 - rho) * a + rho * b, 0.0) for a, b in zip(old, new))
