"""Wireless multi-server environment.

Geometry, log-distance pathloss with per-round Rayleigh fading, greedy
water-filling of each server's band over its selected clients, latency and
timeout accounting, and resolution of clients picked by several servers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ChannelConfig:
    tx_power_w: float = 0.1
    noise_psd_dbm_hz: float = -174.0
    noise_figure_db: float = 9.0
    # SNR is quoted against this reference bandwidth
    ref_bandwidth_hz: float = 100e6
    pathloss_exponent: float = 3.5
    pathloss_at_1km_db: float = 128.1
    min_distance_km: float = 0.01

    @property
    def noise_w_per_hz(self) -> float:
        return 10 ** ((self.noise_psd_dbm_hz + self.noise_figure_db - 30.0) / 10.0)


@dataclass
class ClientProfile:
    client_id: int
    position: tuple
    compute_rate: float
    num_samples: int = 1

    def compute_time(self, local_epochs: int) -> float:
        return self.num_samples * local_epochs / self.compute_rate


@dataclass
class ServerProfile:
    server_id: int
    position: tuple
    coverage_radius: float
    total_bandwidth: float
    subset_size: int


def distance(a, b) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def coverage_sets(clients, servers) -> list:
    """Per-server sorted client ids within the coverage radius."""
    out = []
    for s in servers:
        out.append(sorted(c.client_id for c in clients
                          if distance(c.position, s.position) <= s.coverage_radius))
    return out


def server_layout(num_servers: int, ring_radius_km: float = 0.6) -> list:
    """Servers evenly spaced on a ring; more servers means more overlap."""
    if num_servers == 1:
        return [(0.0, 0.0)]
    return [(ring_radius_km * math.cos(2 * math.pi * m / num_servers),
             ring_radius_km * math.sin(2 * math.pi * m / num_servers)) for m in range(num_servers)]


def place_clients(servers, num_clients: int, num_covered: int, rng: np.random.Generator,
                  margin_km: float = 0.5) -> list:
    """Uniform positions in a box around the servers, resampled until exactly
    ``num_covered`` clients fall inside at least one coverage disc."""
    if not 0 <= num_covered <= num_clients:
        raise ValueError("num_covered must lie in [0, num_clients]")
    xs = [s.position[0] for s in servers]
    ys = [s.position[1] for s in servers]
    reach = max(s.coverage_radius for s in servers) + margin_km
    lo = (min(xs) - reach, min(ys) - reach)
    hi = (max(xs) + reach, max(ys) + reach)

    def covered(p):
        return any(distance(p, s.position) <= s.coverage_radius for s in servers)

    wanted = [True] * num_covered + [False] * (num_clients - num_covered)
    wanted = [wanted[i] for i in rng.permutation(num_clients)]
    positions = []
    for want in wanted:
        for _ in range(100_000):
            p = (float(rng.uniform(lo[0], hi[0])), float(rng.uniform(lo[1], hi[1])))
            if covered(p) == want:
                break
        else:
            raise RuntimeError("could not place client with the requested coverage")
        positions.append(p)
    return positions


class Channel:
    """Deterministic SNR oracle: pathloss gains plus seeded per-round fading."""

    def __init__(self, clients, servers, config: ChannelConfig, seed: int):
        self.config = config
        self.seed = int(seed)
        self.clients = {c.client_id: c for c in clients}
        self.servers = {s.server_id: s for s in servers}
        self.client_index = {c.client_id: i for i, c in enumerate(clients)}
        self.server_index = {s.server_id: i for i, s in enumerate(servers)}
        self.base_gain = np.zeros((len(servers), len(clients)))
        for s in servers:
            for c in clients:
                self.base_gain[self.server_index[s.server_id], self.client_index[c.client_id]] = \
                    self.pathloss_gain(distance(c.position, s.position))
        self._cache_round = None
        self._cache = None

    def pathloss_gain(self, d_km: float) -> float:
        cfg = self.config
        d = max(d_km, cfg.min_distance_km)
        loss_db = cfg.pathloss_at_1km_db + 10.0 * cfg.pathloss_exponent * math.log10(d)
        return 10 ** (-loss_db / 10.0)

    def fading(self, round_index: int) -> np.ndarray:
        """Rayleigh power gains (unit-mean exponential), shape (servers, clients)."""
        rng = np.random.default_rng([self.seed, int(round_index)])
        return rng.exponential(1.0, size=self.base_gain.shape)

    def snr_matrix(self, round_index: int) -> np.ndarray:
        if self._cache_round != round_index:
            cfg = self.config
            gain = self.base_gain * self.fading(round_index)
            self._cache = cfg.tx_power_w * gain / (cfg.noise_w_per_hz * cfg.ref_bandwidth_hz)
            self._cache_round = round_index
        return self._cache

    def snr(self, client_id: int, server_id: int, round_index: int) -> float:
        return float(self.snr_matrix(round_index)[self.server_index[server_id], self.client_index[client_id]])


def channel_quality(channel: Channel, client_id: int, server_id: int, round_index: int) -> float:
    server = channel.servers[server_id]
    client = channel.clients[client_id]
    if distance(client.position, server.position) > server.coverage_radius:
        raise ValueError(f"client {client_id} is outside the coverage of server {server_id}")
    return channel.snr(client_id, server_id, round_index)


def spectral_efficiency(snr: float) -> float:
    return math.log2(1.0 + snr)


def required_bandwidth(compute_time: float, snr: float, model_bits: float, budget_s: float) -> float:
    """Bandwidth (Hz) at which compute + upload takes exactly ``budget_s``."""
    slack = budget_s - compute_time
    if slack <= 0.0:
        return math.inf
    return model_bits / (slack * spectral_efficiency(snr))


@dataclass
class Allocation:
    bandwidth: dict  # client_id -> Hz
    starved: set


def waterfill_allocate(candidates, total_bandwidth: float, min_unit: float = 0.0) -> Allocation:
    """Greedy allocation in descending SNR order.

    ``candidates`` holds ``(client_id, snr, demand_hz)`` triples. Each client
    in turn receives its demand; the first one that cannot be fully served
    takes what is left and the pass stops. Clients with infinite demand are
    skipped. The grants are then rescaled to fill the band (sharing any
    leftover in proportion to the grants), shaved by 1e-12 relative so the
    total never exceeds the band despite rounding. A leftover smaller than
    ``min_unit`` counts as exhausted.
    """
    if total_bandwidth <= 0:
        raise ValueError("total bandwidth must be positive")
    ranked = sorted(candidates, key=lambda c: (-c[1], c[0]))
    alloc = {c[0]: 0.0 for c in candidates}
    remaining = total_bandwidth
    for client_id, _, need in ranked:
        if not math.isfinite(need):
            continue
        if remaining <= 0.0 or remaining < min_unit:
            break
        if need <= remaining:
            alloc[client_id] = need
            remaining -= need
        else:
            alloc[client_id] = remaining
            remaining = 0.0
            break
    granted = sum(alloc[c[0]] for c in candidates)
    if granted > 0.0:
        factor = (total_bandwidth / granted) * (1.0 - 1e-12)
        alloc = {k: v * factor for k, v in alloc.items()}
    starved = {k for k, v in alloc.items() if v <= 0.0}
    return Allocation(alloc, starved)


def upload_latency(compute_time: float, allocation_hz: float, snr: float, model_bits: float) -> float:
    """Compute plus transmission time; infinite with no bandwidth."""
    if allocation_hz <= 0.0:
        return math.inf
    return compute_time + model_bits / (allocation_hz * spectral_efficiency(snr))


def round_latency(latencies, l_max: float) -> tuple[float, list]:
    """Round latency capped at ``l_max`` and the indices that timed out."""
    timeouts = [i for i, lat in enumerate(latencies) if lat > l_max]
    if not latencies:
        return 0.0, timeouts
    return min(l_max, max(latencies)), timeouts


def resolve_conflicts(selections: dict, snr: dict, mode: str = "winner"):
    """Settle clients picked by more than one server.

    ``selections`` maps server id to its picked client ids; ``snr`` maps
    ``(server_id, client_id)`` to channel quality. In ``winner`` mode the
    client serves the selector with the best SNR (ties to the lower server
    id); in ``all_fail`` mode every selector loses it. Returns the effective
    selections and a list of ``(client_id, losing_server_id)`` events.
    """
    selectors = {}
    for server_id in sorted(selections):
        for c in selections[server_id]:
            selectors.setdefault(c, []).append(server_id)
    effective = {m: list(sel) for m, sel in selections.items()}
    events = []
    for client_id in sorted(selectors):
        servers = selectors[client_id]
        if len(servers) < 2:
            continue
        if mode == "winner":
            best = max(servers, key=lambda m: (snr[(m, client_id)], -m))
            losers = [m for m in servers if m != best]
        elif mode == "all_fail":
            losers = list(servers)
        else:
            raise ValueError(f"unknown conflict mode {mode!r}")
        for m in losers:
            effective[m].remove(client_id)
            events.append((client_id, m))
    return effective, events


@dataclass
class ServerRound:
    server_id: int
    selected: list
    effective: list
    bandwidth: dict
    latency: dict
    round_latency: float
    conflicts: list  # client ids lost to other servers
    timeouts: list
    reward: float = 0.0
    latency_term: float = 0.0
    penalty_term: float = 0.0
    fairness: float = 0.0


@dataclass
class RoundOutcome:
    round_index: int
    servers: list = field(default_factory=list)
    conflict_events: list = field(default_factory=list)

    @property
    def conflict_count(self) -> int:
        return len(self.conflict_events)

    @property
    def timeout_count(self) -> int:
        return sum(len(s.timeouts) for s in self.servers)


def observe(outcome: RoundOutcome) -> dict:
    """Map ``(server_id, client_id)`` to 1 if the pick was lost, else 0."""
    out = {}
    for s in outcome.servers:
        lost = set(s.conflicts) | set(s.timeouts)
        for c in s.selected:
            out[(s.server_id, c)] = 1 if c in lost else 0
    return out
