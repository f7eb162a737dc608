"""Discrete-event simulator for WUR polling, round-robin TDMA and slotted ALOHA.

Arrivals are per-node Poisson processes.  For the polling protocols they are
sampled lazily: when the gateway's wake-up reaches a node, the node draws the
packets generated since it was last sampled.  This is exact for Poisson
traffic and avoids an event per packet.  ALOHA needs the true arrival
instants, so it generates them eagerly from the merged process.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .analytic import NetworkParams, NodeRates, UnstableSystemError, tdma_model
from .grouping import select_fixed_group, select_threshold_group, split_members

WARMUP_CYCLES = 5
BACKLOG_LIMIT_PER_NODE = 100
DELAY_LIMIT_FACTOR = 10.0
_CHECK_EVERY = 256


class Protocol(str, Enum):
    WUR_LS = "wur-ls"
    WUR_BS = "wur-bs"
    TDMA = "tdma"
    ALOHA = "aloha"

    @property
    def multicast(self) -> bool:
        return self in (Protocol.WUR_LS, Protocol.WUR_BS)


@dataclass(frozen=True)
class ProtocolKind:
    kind: Protocol
    p_thr: float = 0.05
    backoff_window: int = 16
    fixed_group_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Protocol(self.kind))
        if not 0.0 < self.p_thr < 1.0:
            raise ValueError("p_thr must lie in (0, 1)")
        if int(self.backoff_window) != self.backoff_window or self.backoff_window < 1:
            raise ValueError("backoff window must be a positive whole number of slots")
        if self.fixed_group_size is not None:
            if not self.kind.multicast:
                raise ValueError("fixed group size only applies to multicast protocols")
            if int(self.fixed_group_size) != self.fixed_group_size or self.fixed_group_size < 1:
                raise ValueError("fixed group size must be a positive integer")

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def parse(cls, name: str, **kwargs) -> "ProtocolKind":
        try:
            kind = Protocol(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown protocol {name!r}; expected one of "
                             + ", ".join(p.value for p in Protocol)) from None
        return cls(kind, **kwargs)


@dataclass(frozen=True)
class SubPoll:
    """One poll inside a collision resolution."""

    depth: int
    members: tuple
    active: tuple

    @property
    def outcome(self) -> str:
        return ("idle", "success")[len(self.active)] if len(self.active) < 2 else "collision"


def binary_resolution_trace(member_ids, probs, active, cache: dict | None = None) -> list[SubPoll]:
    """Polls issued by the binary-search resolver, in wall-clock order.

    ``active`` is the frozen set of members that collided.  Each collided
    (sub)group is split by activation probability and the left half is fully
    resolved before the right half is polled.  ``cache`` memoises splits when
    the same group and probabilities are resolved many times.
    """
    members = tuple(member_ids)
    act = set(active)
    if len(act) < 2 or not act <= set(members):
        raise ValueError("binary resolution needs at least two active members of the group")
    prob = dict(zip(members, probs))

    def _split(group):
        if cache is not None and group in cache:
            return cache[group]
        left, right = split_members(group, [prob[i] for i in group])
        out = (tuple(left), tuple(right), frozenset(left))
        if cache is not None:
            cache[group] = out
        return out

    trace = []
    # (subgroup, depth, its active members) still to poll; left half on top
    stack = []

    def _push(group, depth, hit):
        left, right, left_set = _split(group)
        in_left = tuple(i for i in hit if i in left_set)
        in_right = tuple(i for i in hit if i not in left_set)
        stack.append((right, depth, in_right))
        stack.append((left, depth, in_left))

    _push(members, 1, tuple(i for i in members if i in act))
    while stack:
        group, depth, hit = stack.pop()
        trace.append(SubPoll(depth, group, hit))
        if len(hit) >= 2:
            _push(group, depth + 1, hit)
    return trace


def linear_resolution_trace(member_ids, active) -> list[SubPoll]:
    """Unicast polls of every member in id order."""
    act = set(active)
    members = sorted(member_ids)
    if len(act) < 2 or not act <= set(members):
        raise ValueError("linear resolution needs at least two active members of the group")
    return [SubPoll(1, (i,), (i,) if i in act else ()) for i in members]


def rounds_to_resolve(trace: list[SubPoll]) -> int:
    """Split depth at which the last frozen-active node got through."""
    return max(p.depth for p in trace if p.outcome == "success")


@dataclass(frozen=True)
class SimOutcome:
    protocol: str
    delays: np.ndarray
    delay_nodes: np.ndarray
    delivered: np.ndarray
    wakeups: np.ndarray
    tx_attempts: np.ndarray
    energy_useful: np.ndarray
    energy_total: np.ndarray
    idle_slots: int
    success_slots: int
    collision_slots: int
    resolution_polls: int
    round_histogram: np.ndarray
    collided_members: np.ndarray
    cycle_lengths: np.ndarray
    predicted: dict
    generated: int
    delivered_total: int
    residual_backlog: int
    unstable: bool
    sim_duration: float
    warmup: float
    measured_time: float
    events: int

    @property
    def mean_delay(self) -> float:
        return float(self.delays.mean()) if len(self.delays) else math.nan

    @property
    def delay_stderr(self) -> float:
        n = len(self.delays)
        return float(self.delays.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan

    def node_mean_delay(self) -> float:
        """Mean over nodes of each node's mean packet delay."""
        if not len(self.delays):
            return math.nan
        n = len(self.delivered)
        sums = np.bincount(self.delay_nodes, weights=self.delays, minlength=n)
        counts = np.bincount(self.delay_nodes, minlength=n)
        seen = counts > 0
        return float(np.mean(sums[seen] / counts[seen]))

    @property
    def network_eta(self) -> float:
        """Useful over total energy for the whole network, in percent."""
        total = self.energy_total.sum()
        return float(100.0 * self.energy_useful.sum() / total) if total > 0 else math.nan

    @property
    def polls(self) -> int:
        return self.idle_slots + self.success_slots + self.collision_slots

    @property
    def collision_rate(self) -> float:
        return self.collision_slots / self.polls if self.polls else 0.0

    @property
    def mean_rounds(self) -> float:
        """Mean resolution rounds per collision; 0 for a multicast run without
        collisions and NaN for protocols that never resolve."""
        if not len(self.round_histogram):
            return math.nan
        total = self.round_histogram.sum()
        if not total:
            return 0.0
        return float(np.dot(np.arange(len(self.round_histogram)), self.round_histogram) / total)


def energy_efficiency(outcome: SimOutcome, params: NetworkParams, node: int) -> float | None:
    """``100 * e_tx * K_n / E_n`` for one node, or None if it spent nothing."""
    e_n = outcome.energy_total[node]
    if e_n <= 0:
        return None
    return float(100.0 * params.e_tx * outcome.delivered[node] / e_n)


@dataclass
class _Tally:
    """Mutable counters owned by one run."""

    n: int
    delays: list = field(default_factory=list)
    delay_nodes: list = field(default_factory=list)
    idle: int = 0
    success: int = 0
    collision: int = 0
    resolution_polls: int = 0
    rounds: list = field(default_factory=list)
    collided: list = field(default_factory=list)
    pred_idle: float = 0.0
    pred_coll: float = 0.0
    var_idle: float = 0.0
    var_succ: float = 0.0
    var_coll: float = 0.0
    running_sum: float = 0.0
    running_n: int = 0

    def __post_init__(self):
        self.delivered = np.zeros(self.n, dtype=np.int64)
        self.wakeups = np.zeros(self.n, dtype=np.int64)
        self.tx = np.zeros(self.n, dtype=np.int64)


class _PollingRun:
    def __init__(self, params, lam, protocol, rng, warmup, stop, ref_delay):
        self.p = params
        self.lam = lam
        self.proto = protocol
        self.rng = rng
        self.n = len(lam)
        self.c = params.poll_time
        self.warmup = warmup
        self.stop = stop
        self.ref_delay = ref_delay
        self.now = 0.0
        self.last_snap = np.zeros(self.n)
        self.t = _Tally(self.n)
        self.generated = 0
        self.delivered_total = 0
        self.events = 0
        self.unstable = False
        self.next_node = 0
        self.cycle_start = None
        self.cycles = []

    # packets generated at node i since its last sample
    def _sample(self, i, snap, k=None):
        window = snap - self.last_snap[i]
        if k is None:
            k = int(self.rng.poisson(self.lam[i] * window)) if window > 0 else 0
        times = np.sort(self.rng.uniform(self.last_snap[i], snap, k)) if k else None
        return k, times

    def _deliver(self, node, times, start, measuring):
        k = len(times)
        done = start + self.c + self.p.t_p * np.arange(1, k + 1)
        self.delivered_total += k
        if measuring:
            self.t.delivered[node] += k
        keep = (times >= self.warmup) & (times < self.stop)
        if keep.any():
            d = done[keep] - times[keep]
            self.t.delays.append(d)
            self.t.delay_nodes.append(np.full(len(d), node, dtype=np.int64))
            self.t.running_sum += float(d.sum())
            self.t.running_n += len(d)

    def step(self):
        if self.proto.kind is Protocol.TDMA:
            self._tdma_step()
        else:
            self._multicast_step()

    def _tdma_step(self):
        i = self.next_node
        s = self.now
        if i == 0:
            if self.cycle_start is not None and self.cycle_start >= self.warmup and s <= self.stop:
                self.cycles.append(s - self.cycle_start)
            self.cycle_start = s
        snap = s + self.p.t_wu
        k, times = self._sample(i, snap)
        self.last_snap[i] = snap
        self.generated += k
        measuring = self.warmup <= s < self.stop
        if measuring:
            self.t.wakeups[i] += 1
            self.t.tx[i] += k
            if k:
                self.t.success += 1
            else:
                self.t.idle += 1
        if k:
            self._deliver(i, times, s, measuring)
        self.now = s + self.c + k * self.p.t_p
        self.next_node = (i + 1) % self.n
        self.events += 1

    def _multicast_step(self):
        s = self.now
        snap = s + self.p.t_wu
        loads = self.lam * (snap - self.last_snap)
        if self.proto.fixed_group_size is not None:
            members, pc = select_fixed_group(loads, self.proto.fixed_group_size)
        else:
            members, pc = select_threshold_group(loads, self.proto.p_thr)
        x = loads[members]
        measuring = self.warmup <= s < self.stop
        if measuring:
            idle_p = math.exp(-float(x.sum()))
            succ_p = max(0.0, 1.0 - idle_p - pc)
            self.t.pred_idle += idle_p
            self.t.pred_coll += pc
            self.t.var_idle += idle_p * (1 - idle_p)
            self.t.var_succ += succ_p * (1 - succ_p)
            self.t.var_coll += pc * (1 - pc)
            self.t.wakeups[members] += 1

        ks = self.rng.poisson(x)
        batches = {}
        for j in np.flatnonzero(ks):
            node = int(members[j])
            _, times = self._sample(node, snap, int(ks[j]))
            batches[node] = times
        self.generated += int(ks.sum())
        self.last_snap[members] = snap
        self.events += 1

        tp = self.p.t_p
        if not batches:
            if measuring:
                self.t.idle += 1
            self.now = s + self.c
            return
        if len(batches) == 1:
            (node, times), = batches.items()
            if measuring:
                self.t.success += 1
                self.t.tx[node] += len(times)
            self._deliver(node, times, s, measuring)
            self.now = s + self.c + len(times) * tp
            return

        longest = max(len(v) for v in batches.values())
        if measuring:
            self.t.collision += 1
            self.t.collided.append(len(batches))
            for node, times in batches.items():
                self.t.tx[node] += len(times)
        self.now = s + self.c + longest * tp
        ids = [int(m) for m in members]
        if self.proto.kind is Protocol.WUR_LS:
            trace = linear_resolution_trace(ids, batches)
        else:
            probs = (-np.expm1(-x)).tolist()
            trace = binary_resolution_trace(ids, probs, batches)
        self._run_resolution(trace, batches, measuring)

    def _run_resolution(self, trace, batches, measuring):
        tp = self.p.t_p
        linear = self.proto.kind is Protocol.WUR_LS
        if linear and measuring:
            # a member keeps listening until its own poll, so position j hears j+1 wake-ups
            order = [p.members[0] for p in trace]
            self.t.wakeups[order] += np.arange(1, len(order) + 1)
        for poll in trace:
            s = self.now
            self.events += 1
            if measuring:
                self.t.resolution_polls += 1
                if not linear:
                    self.t.wakeups[list(poll.members)] += 1
            if not poll.active:
                self.now = s + self.c
            elif len(poll.active) == 1:
                node = poll.active[0]
                times = batches[node]
                if measuring:
                    self.t.tx[node] += len(times)
                self._deliver(node, times, s, measuring)
                self.now = s + self.c + len(times) * tp
            else:
                if measuring:
                    for node in poll.active:
                        self.t.tx[node] += len(batches[node])
                self.now = s + self.c + max(len(batches[v]) for v in poll.active) * tp
        if measuring:
            self.t.rounds.append(rounds_to_resolve(trace))

    def check_stability(self):
        backlog = float(np.dot(self.lam, np.maximum(self.now - self.last_snap, 0.0)))
        if backlog > BACKLOG_LIMIT_PER_NODE * self.n:
            self.unstable = True
        elif self.t.running_n and self.t.running_sum / self.t.running_n > DELAY_LIMIT_FACTOR * self.ref_delay:
            self.unstable = True

    def drained(self):
        return bool(np.all(self.last_snap >= self.stop))

    def residual(self):
        # packets generated after each node's last sample, up to the final clock
        window = np.maximum(self.now - self.last_snap, 0.0)
        return int(self.rng.poisson(self.lam * window).sum())


class _AlohaRun:
    _CHUNK = 4096

    def __init__(self, params, lam, protocol, rng, warmup, stop, ref_delay):
        self.p = params
        self.lam = lam
        self.n = len(lam)
        self.rng = rng
        self.window = int(protocol.backoff_window)
        self.warmup = warmup
        self.stop = stop
        self.ref_delay = ref_delay
        self.total = float(lam.sum())
        self.cum = np.cumsum(lam) / self.total if self.total > 0 else None
        self.queues = [deque() for _ in range(self.n)]
        self.next_slot = np.full(self.n, np.iinfo(np.int64).max, dtype=np.int64)
        self.idle_mark = np.iinfo(np.int64).max
        self.t = _Tally(self.n)
        self.now = 0.0
        self.generated = 0
        self.delivered_total = 0
        self.backlog = 0
        self.pending_pre_stop = 0
        self.events = 0
        self.unstable = False
        self._arr_t = np.empty(0)
        self._arr_n = np.empty(0, dtype=np.int64)
        self._arr_i = 0
        self._clock = 0.0

    def _refill(self):
        gaps = self.rng.exponential(1.0 / self.total, self._CHUNK)
        self._arr_t = self._clock + np.cumsum(gaps)
        self._clock = float(self._arr_t[-1])
        self._arr_n = np.searchsorted(self.cum, self.rng.random(self._CHUNK), side="right")
        np.minimum(self._arr_n, self.n - 1, out=self._arr_n)
        self._arr_i = 0

    def _next_arrival(self):
        if self.total <= 0:
            return math.inf
        if self._arr_i >= len(self._arr_t):
            self._refill()
        return float(self._arr_t[self._arr_i])

    def step(self):
        tp = self.p.t_p
        slot = int(self.next_slot.min())
        slot_time = slot * tp if slot != self.idle_mark else math.inf
        a = self._next_arrival()
        if a < slot_time:
            node = int(self._arr_n[self._arr_i])
            self._arr_i += 1
            self.queues[node].append(a)
            self.generated += 1
            self.backlog += 1
            if a < self.stop:
                self.pending_pre_stop += 1
            if self.next_slot[node] == self.idle_mark:
                self.next_slot[node] = int(math.floor(a / tp)) + 1
            self.now = a
            return
        if slot_time == math.inf:
            # nothing left to do; cannot happen for positive total rate
            self.now = math.inf
            return

        self.events += 1
        self.now = slot_time
        tx = np.flatnonzero(self.next_slot == slot)
        measuring = self.warmup <= slot_time < self.stop
        if measuring:
            self.t.tx[tx] += 1
        if len(tx) == 1:
            node = int(tx[0])
            created = self.queues[node].popleft()
            self.backlog -= 1
            self.delivered_total += 1
            if created < self.stop:
                self.pending_pre_stop -= 1
            done = (slot + 1) * tp
            if measuring:
                self.t.success += 1
                self.t.delivered[node] += 1
            if self.warmup <= created < self.stop:
                self.t.delays.append(done - created)
                self.t.delay_nodes.append(node)
                self.t.running_sum += done - created
                self.t.running_n += 1
            self.next_slot[node] = slot + 1 if self.queues[node] else self.idle_mark
        else:
            if measuring:
                self.t.collision += 1
                self.t.collided.append(len(tx))
            self.next_slot[tx] = slot + self.rng.integers(1, self.window + 1, size=len(tx))

    def check_stability(self):
        if self.backlog > BACKLOG_LIMIT_PER_NODE * self.n:
            self.unstable = True
        elif self.t.running_n and self.t.running_sum / self.t.running_n > DELAY_LIMIT_FACTOR * self.ref_delay:
            self.unstable = True

    def drained(self):
        return self.pending_pre_stop == 0

    def residual(self):
        return self.backlog


def _reference_delay(params, rates):
    try:
        return tdma_model(params, rates).packet_mean_delay
    except UnstableSystemError:
        return math.inf


def default_warmup(params: NetworkParams, rates: NodeRates) -> float:
    """Five TDMA-equivalent cycles."""
    xi = min(rates.aggregate_load, 0.99)
    return WARMUP_CYCLES * params.n_nodes * params.poll_time / (1.0 - xi)


def simulate(params: NetworkParams, rates: NodeRates, protocol: ProtocolKind,
             horizon: float, seed: int, warmup: float | None = None,
             drain: bool = True) -> SimOutcome:
    """Run one replication.

    ``horizon`` is the measured span in simulated seconds, following a
    warm-up (five TDMA cycles by default) that is excluded from statistics.
    Delays cover packets created inside the measured span; energy counters
    cover polls and slots that start inside it.  Afterwards the run keeps
    going until every such packet is delivered, unless it was flagged
    unstable.
    """
    n = params.n_nodes
    if n < 1:
        raise ValueError("a network needs at least one node")
    if len(rates) != n:
        raise ValueError(f"got {len(rates)} rates for {n} nodes")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    if protocol.fixed_group_size is not None and protocol.fixed_group_size > n:
        raise ValueError("fixed group size exceeds the number of nodes")
    if warmup is None:
        warmup = default_warmup(params, rates)
    if warmup < 0:
        raise ValueError("warm-up must be non-negative")

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed) & (2**64 - 1))))
    lam = np.asarray(rates.lambdas, dtype=float).copy()
    stop = warmup + horizon
    drain_cap = stop + max(horizon, warmup)
    engine_cls = _AlohaRun if protocol.kind is Protocol.ALOHA else _PollingRun
    run = engine_cls(params, lam, protocol, rng, warmup, stop, _reference_delay(params, rates))

    checked = 0
    while True:
        if run.now >= stop:
            if not drain or run.unstable or run.drained() or run.now >= drain_cap:
                break
        run.step()
        if run.events - checked >= _CHECK_EVERY:
            checked = run.events
            run.check_stability()
            if run.unstable:
                break
        if run.now == math.inf:
            break

    t = run.t
    delays = np.concatenate(t.delays) if t.delays and isinstance(t.delays[0], np.ndarray) else np.asarray(t.delays, dtype=float)
    nodes = np.concatenate(t.delay_nodes) if t.delay_nodes and isinstance(t.delay_nodes[0], np.ndarray) else np.asarray(t.delay_nodes, dtype=np.int64)
    useful = t.delivered * params.e_tx
    total = t.wakeups * params.e_wu + t.tx * params.e_tx
    if protocol.kind.multicast:
        hist = np.bincount(np.asarray(t.rounds, dtype=np.int64), minlength=1)
    else:
        hist = np.zeros(0, dtype=np.int64)
    residual = run.residual()
    end = run.now if run.now != math.inf else stop
    predicted = {}
    if protocol.kind.multicast:
        predicted = dict(idle=t.pred_idle, collision=t.pred_coll,
                         success=t.success + t.idle + t.collision - t.pred_idle - t.pred_coll,
                         var_idle=t.var_idle, var_success=t.var_succ, var_collision=t.var_coll)
    return SimOutcome(
        protocol=protocol.name,
        delays=delays,
        delay_nodes=nodes,
        delivered=t.delivered,
        wakeups=t.wakeups,
        tx_attempts=t.tx,
        energy_useful=useful,
        energy_total=total,
        idle_slots=t.idle,
        success_slots=t.success,
        collision_slots=t.collision,
        resolution_polls=t.resolution_polls,
        round_histogram=hist,
        collided_members=np.asarray(t.collided, dtype=np.int64),
        cycle_lengths=np.asarray(getattr(run, "cycles", []), dtype=float),
        predicted=predicted,
        generated=run.generated + residual if engine_cls is _PollingRun else run.generated,
        delivered_total=run.delivered_total,
        residual_backlog=residual,
        unstable=run.unstable,
        sim_duration=end,
        warmup=warmup,
        measured_time=min(end, stop) - warmup,
        events=run.events,
    )
