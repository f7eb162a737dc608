"""Closed-form models for unicast and multicast wake-up radio polling.

Everything here is a pure function of its arguments.  Quantities follow the
usual naming: ``lam`` is a Poisson arrival rate in packets/s, ``tau`` the time
a node has been accumulating packets, ``t_p`` the airtime of one packet and
``t_wu + tau0`` the cost of an idle poll.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import binom


class UnstableSystemError(ValueError):
    """Raised when the offered load makes the polling cycle diverge."""


@dataclass(frozen=True)
class NetworkParams:
    """Timing and energy constants shared by every protocol.

    ``e_wu`` and ``e_tx`` default to WUR-power x wake-up time and
    PCR-power x packet time respectively.
    """

    n_nodes: int = 100
    t_wu: float = 0.01499
    tau0: float = 1e-5
    t_p: float = 1e-3
    p_wur: float = 365e-9
    p_pcr: float = 0.1
    e_wu: float | None = None
    e_tx: float | None = None

    def __post_init__(self):
        if self.e_wu is None:
            object.__setattr__(self, "e_wu", self.p_wur * self.t_wu)
        if self.e_tx is None:
            object.__setattr__(self, "e_tx", self.p_pcr * self.t_p)
        for name in ("n_nodes", "t_wu", "tau0", "t_p", "p_wur", "p_pcr", "e_wu", "e_tx"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"{name} must be strictly positive, got {value!r}")
        if int(self.n_nodes) != self.n_nodes:
            raise ValueError("n_nodes must be an integer")

    @property
    def poll_time(self) -> float:
        """Duration of an idle polling slot, ``t_wu + tau0``."""
        return self.t_wu + self.tau0

    def with_overrides(self, **kwargs) -> "NetworkParams":
        # derived energies follow the powers unless given explicitly
        if ("p_wur" in kwargs or "t_wu" in kwargs) and "e_wu" not in kwargs:
            kwargs["e_wu"] = None
        if ("p_pcr" in kwargs or "t_p" in kwargs) and "e_tx" not in kwargs:
            kwargs["e_tx"] = None
        return replace(self, **kwargs)


@dataclass(frozen=True)
class NodeRates:
    """Per-node Poisson rates plus the packet time that defines the load."""

    lambdas: np.ndarray
    t_p: float

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.ndim != 1:
            raise ValueError("lambdas must be one-dimensional")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("rates must be finite and non-negative")
        lam.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)

    @classmethod
    def homogeneous(cls, n: int, xi: float, t_p: float) -> "NodeRates":
        return cls(np.full(n, xi / (n * t_p)), t_p)

    @property
    def total_rate(self) -> float:
        return float(self.lambdas.sum())

    @property
    def aggregate_load(self) -> float:
        return self.total_rate * self.t_p

    def __len__(self):
        return len(self.lambdas)


@dataclass(frozen=True)
class GroupSnapshot:
    """Candidate polling group: ``(node_id, lam, tau)`` triples."""

    members: tuple = ()

    def __post_init__(self):
        members = tuple((int(i), float(lam), float(tau)) for i, lam, tau in self.members)
        ids = [m[0] for m in members]
        if len(set(ids)) != len(ids):
            raise ValueError("node ids in a group must be distinct")
        for _, lam, tau in members:
            if lam < 0 or tau < 0 or math.isnan(lam) or math.isnan(tau):
                raise ValueError("lambda and tau must be non-negative")
        object.__setattr__(self, "members", members)

    @classmethod
    def from_arrays(cls, lambdas, taus, ids=None) -> "GroupSnapshot":
        if ids is None:
            ids = range(len(lambdas))
        return cls(tuple(zip(ids, lambdas, taus)))

    @property
    def loads(self) -> np.ndarray:
        """Mean backlog ``lam * tau`` of every member (``inf * 0`` counts as 0)."""
        out = np.array([lam * tau if lam > 0 and tau > 0 else 0.0
                        for _, lam, tau in self.members], dtype=float)
        return out

    def __len__(self):
        return len(self.members)


@dataclass(frozen=True)
class TdmaModel:
    mean_cycle: float
    second_moment_cycle: float
    mean_pkts_per_cycle: float
    per_node_delay: np.ndarray
    per_node_delay_closed_form: np.ndarray
    per_node_power: np.ndarray
    per_node_energy_per_packet: np.ndarray
    lambdas: np.ndarray = field(repr=False)

    @property
    def packet_mean_delay(self) -> float:
        """Delay averaged over packets, i.e. weighted by each node's rate."""
        total = self.lambdas.sum()
        if total == 0:
            return float(np.mean(self.per_node_delay))
        return float(np.dot(self.lambdas, self.per_node_delay) / total)


def _check_nonneg(**values):
    for name, v in values.items():
        if v < 0 or (isinstance(v, float) and math.isnan(v)):
            raise ValueError(f"{name} must be non-negative, got {v!r}")


def poisson_pmf(k: int, mean: float) -> float:
    """Poisson mass at ``k``, evaluated in log space."""
    _check_nonneg(k=k, mean=mean)
    if mean == 0:
        return 1.0 if k == 0 else 0.0
    if math.isinf(mean):
        return 0.0
    return math.exp(k * math.log(mean) - mean - math.lgamma(k + 1))


def slot_duration_pmf(lam: float, tau: float, params: NetworkParams, k: int) -> float:
    """Probability that a unicast poll of the node lasts ``k*t_p + t_wu + tau0``."""
    _check_nonneg(lam=lam, tau=tau, k=k)
    return poisson_pmf(k, lam * tau if lam > 0 else 0.0)


def slot_duration(params: NetworkParams, k: int) -> float:
    return k * params.t_p + params.t_wu + params.tau0


def _as_loads(group) -> np.ndarray:
    if isinstance(group, GroupSnapshot):
        return group.loads
    return np.asarray(group, dtype=float)


def group_idle_prob(group) -> float:
    """P(no member has a packet).  Accepts a snapshot or an array of ``lam*tau``."""
    x = _as_loads(group)
    return float(math.exp(-x.sum())) if len(x) else 1.0


def group_success_prob(group) -> float:
    """P(exactly one member has a packet)."""
    x = _as_loads(group)
    if len(x) == 0:
        return 0.0
    idle = np.exp(-x)
    active = -np.expm1(-x)
    # product of the idle terms of everyone except i, without dividing
    prefix = np.concatenate(([1.0], np.cumprod(idle)[:-1]))
    suffix = np.concatenate((np.cumprod(idle[::-1])[::-1][1:], [1.0]))
    return float(np.sum(active * prefix * suffix))


def group_collision_prob(group) -> float:
    """P(two or more members have packets)."""
    x = _as_loads(group)
    if len(x) < 2:
        return 0.0
    pc = 1.0 - group_idle_prob(x) - group_success_prob(x)
    return min(max(pc, 0.0), 1.0)


def group_probs(group) -> tuple[float, float, float]:
    """``(idle, success, collision)`` for one multicast poll."""
    x = _as_loads(group)
    return group_idle_prob(x), group_success_prob(x), group_collision_prob(x)


def tdma_model(params: NetworkParams, rates: NodeRates) -> TdmaModel:
    """Round-robin unicast polling: cycle moments, delay, power and energy."""
    lam = np.asarray(rates.lambdas, dtype=float)
    n = len(lam)
    c = params.poll_time
    tp = params.t_p
    total = lam.sum()
    load = total * tp
    if load >= 1.0:
        raise UnstableSystemError(f"aggregate load {load:.3f} >= 1: polling cycle diverges")

    mean_cycle = n * c / (1.0 - load)
    mean_k = total * mean_cycle
    mean_k2 = total * mean_cycle + (total * mean_cycle) ** 2
    second = n**2 * c**2 + 2 * n * c * tp * mean_k + tp**2 * mean_k2
    delay = second / mean_cycle * (1.0 + lam * tp) / 2.0

    x = tp * total
    closed = (n * c * (1.0 - x + 2.0 * x + x**2 / (1.0 - x)) + tp**2 * total) * (1.0 + tp * lam) / 2.0

    power = n * params.e_wu / mean_cycle + lam * params.e_tx
    with np.errstate(divide="ignore"):
        energy = np.where(lam > 0, n * params.e_wu / (lam * mean_cycle) + params.e_tx, np.inf)

    return TdmaModel(
        mean_cycle=mean_cycle,
        second_moment_cycle=second,
        mean_pkts_per_cycle=mean_k,
        per_node_delay=delay,
        per_node_delay_closed_form=closed,
        per_node_power=power,
        per_node_energy_per_packet=energy,
        lambdas=lam,
    )


def linear_resolution_floor(group_size: int, params: NetworkParams) -> float:
    """Shortest possible linear-search resolution: two single packets collide."""
    if group_size < 2:
        raise ValueError("a collision needs at least two members")
    return group_size * params.poll_time + 2 * params.t_p


def uniform_collision_prob(p_a: float, group_size: int) -> float:
    if not 0.0 <= p_a <= 1.0:
        raise ValueError("p_a must lie in [0, 1]")
    # P(at least two of G active); the survival function avoids 1 - q0 - q1 cancellation
    return float(binom.sf(1, group_size, p_a))


def active_count_pmf(m: int, group_size: int, p_a: float) -> float:
    """Binomial mass of ``m`` active nodes out of ``group_size``."""
    if not 0 <= m <= group_size:
        raise ValueError(f"m={m} outside [0, {group_size}]")
    if not 0.0 <= p_a <= 1.0:
        raise ValueError("p_a must lie in [0, 1]")
    if p_a == 0.0:
        return 1.0 if m == 0 else 0.0
    if p_a == 1.0:
        return 1.0 if m == group_size else 0.0
    logc = math.lgamma(group_size + 1) - math.lgamma(m + 1) - math.lgamma(group_size - m + 1)
    return math.exp(logc + m * math.log(p_a) + (group_size - m) * math.log1p(-p_a))


def active_given_collision(m: int, group_size: int, p_a: float) -> float:
    if m < 2:
        raise ValueError("a collision involves at least two active nodes")
    pc = uniform_collision_prob(p_a, group_size)
    if pc <= 0.0:
        raise ValueError("conditioning on a zero-probability collision")
    return active_count_pmf(m, group_size, p_a) / pc


def binary_round_success_single(r: int, m: int, group_size: int) -> float:
    """P(a tagged active node is alone in its subgroup after ``r`` halvings).

    ``m`` active nodes in a group of ``group_size``.  The formula keeps the
    ``G + 1 - l`` denominators verbatim, so it approaches but never reaches 1.
    """
    if m < 1 or m > group_size:
        raise ValueError(f"need 1 <= m <= group_size, got m={m}")
    if r < 0:
        raise ValueError("round index must be non-negative")
    g = group_size
    g_r = g - g * 2.0**-r
    if m > g_r + 1:
        return 0.0
    out = 1.0
    for ell in range(1, m):
        out *= (g_r + 1 - ell) / (g + 1 - ell)
    return out


def _log_placement_prefactor(m: float, group_size: int) -> float:
    # log of G^M (G-M)! M! / G!
    g = group_size
    return m * math.log(g) + math.lgamma(g - m + 1) + math.lgamma(m + 1) - math.lgamma(g + 1)


def resolve_all_bound_raw(r: int, m: float, group_size: int) -> float:
    """Unclamped bound on P(all ``m`` collided nodes separated by round ``r``)."""
    if r < 1:
        raise ValueError("the bound is defined from round 1 on")
    if m < 2:
        raise ValueError("need at least two collided nodes")
    if m > group_size:
        raise ValueError("m cannot exceed the group size")
    return math.exp(_log_placement_prefactor(m, group_size) - m * m / 2.0 ** (r + 1))


def resolve_all_bound(r: int, m: float, group_size: int) -> float:
    return min(1.0, resolve_all_bound_raw(r, m, group_size))


def resolve_all_curve(r: int, m: float) -> float:
    """Exponential term of the bound alone, ``exp(-m^2 / 2^(r+1))``."""
    if r < 0:
        raise ValueError("round index must be non-negative")
    return math.exp(-m * m / 2.0 ** (r + 1))


def resolve_all_exact(r: int, m: int, group_size: int, exact: bool = False):
    """Exact P(``m`` uniformly placed nodes fall in distinct subgroups).

    The group is cut into ``2**r`` subgroups of (real-valued) size
    ``group_size / 2**r``.  Splitting stops at singletons, so the subgroup
    count is capped at ``group_size``.  With ``exact=True`` a
    :class:`Fraction` is returned.
    """
    if m < 2 or m > group_size:
        raise ValueError(f"need 2 <= m <= group_size, got m={m}")
    if r < 0:
        raise ValueError("round index must be non-negative")
    if m > 2**r:
        return Fraction(0) if exact else 0.0
    g = group_size
    parts = min(2**r, g)
    if exact:
        sub = Fraction(g, parts)
        out = Fraction(1)
        for i in range(1, m):
            out *= (g - i * sub) / (g - i)
        return out
    sub = g / parts
    out = 1.0
    for i in range(1, m):
        out *= (g - i * sub) / (g - i)
    return out


def enumerate_group_probs(loads: Sequence[float]) -> tuple[float, float, float]:
    """Brute-force ``(idle, success, collision)`` over all 2^G activity patterns."""
    x = np.asarray(loads, dtype=float)
    p = -np.expm1(-x)
    idle = success = collision = 0.0
    g = len(x)
    for mask in range(1 << g):
        prob = 1.0
        count = 0
        for i in range(g):
            if mask >> i & 1:
                prob *= p[i]
                count += 1
            else:
                prob *= 1.0 - p[i]
        if count == 0:
            idle += prob
        elif count == 1:
            success += prob
        else:
            collision += prob
    return idle, success, collision


def expected_backlog(lambdas: Iterable[float], taus: Iterable[float]) -> float:
    return float(sum(lam * tau for lam, tau in zip(lambdas, taus)))
