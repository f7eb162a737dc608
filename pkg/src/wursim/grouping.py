"""Multicast group construction and activation-balanced splitting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# exp() overflows just above 709; loads this large make a collision certain anyway
_LOAD_CLIP = 700.0


@dataclass(frozen=True)
class CandidatePool:
    """Nodes eligible for the next poll with their expected backlog ``lam*tau``.

    Activation probabilities are ``1 - exp(-load)``.  Ordering decisions use
    the loads directly, which keeps distinct nodes distinguishable even when
    their probabilities round to 1.0.
    """

    ids: np.ndarray
    loads: np.ndarray

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        loads = np.asarray(self.loads, dtype=float)
        if ids.shape != loads.shape or ids.ndim != 1:
            raise ValueError("ids and loads must be 1-D arrays of equal length")
        if len(np.unique(ids)) != len(ids):
            raise ValueError("node ids must be distinct")
        if np.any(loads < 0) or np.any(np.isnan(loads)):
            raise ValueError("loads must be non-negative")
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "loads", loads)

    @classmethod
    def from_probs(cls, ids, probs) -> "CandidatePool":
        p = np.asarray(probs, dtype=float)
        if np.any((p < 0) | (p > 1)):
            raise ValueError("activation probabilities must lie in [0, 1]")
        with np.errstate(divide="ignore"):
            loads = -np.log1p(-p)
        return cls(ids, loads)

    @property
    def probs(self) -> np.ndarray:
        return -np.expm1(-self.loads)

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class PollingGroup:
    member_ids: tuple
    predicted_collision_prob: float
    threshold_used: float | None  # None for fixed-size groups

    def __len__(self):
        return len(self.member_ids)


def prefix_collision_probs(seed_load: float, companion_loads: np.ndarray) -> np.ndarray:
    """Collision probability of ``seed + companions[:k]`` for k = 0..len.

    Uses ``p_idle = e^-S`` and ``p_succ = e^-S * sum_i (e^x_i - 1)`` with the
    seed term kept apart so a large seed load cannot overflow.
    """
    xs = min(seed_load, _LOAD_CLIP)
    x = np.minimum(companion_loads, _LOAD_CLIP)
    cum_x = np.concatenate(([0.0], np.cumsum(x)))
    cum_e = np.concatenate(([0.0], np.cumsum(np.expm1(x))))
    e_c = np.exp(-cum_x)
    idle = np.exp(-xs) * e_c
    success = -np.expm1(-xs) * e_c + np.exp(-xs) * e_c * cum_e
    return np.clip(1.0 - idle - success, 0.0, 1.0)


def smallest_first(loads: np.ndarray, k: int) -> np.ndarray:
    """First ``k`` indices of ``argsort(loads, kind="stable")`` without a full sort."""
    if k >= len(loads):
        return np.argsort(loads, kind="stable")
    cut = np.partition(loads, k - 1)[k - 1]
    cand = np.flatnonzero(loads <= cut)
    return cand[np.argsort(loads[cand], kind="stable")][:k]


def select_threshold_group(loads: np.ndarray, p_thr: float) -> tuple[np.ndarray, float]:
    """Indices of the heuristic group over ``loads`` (index order = id order).

    Returns the member indices (seed first) and the group's collision
    probability.  Companions come from the low end of the load ordering, so
    only a prefix of it is materialised, grown until the threshold trips.
    """
    seed = int(np.argmax(loads))
    k = 256
    while True:
        order = smallest_first(loads, k + 1)
        order = order[order != seed][:k]
        pc = prefix_collision_probs(loads[seed], loads[order])
        over = np.flatnonzero(pc > p_thr)
        if len(over) or k >= len(loads) - 1:
            break
        k *= 4
    n_comp = int(over[0]) - 1 if len(over) else len(order)
    members = np.concatenate(([seed], order[:n_comp]))
    return members, float(pc[n_comp])


def select_fixed_group(loads: np.ndarray, size: int) -> tuple[np.ndarray, float]:
    if size == 1:
        return np.array([int(np.argmax(loads))]), 0.0
    members = smallest_first(-loads, size)
    x = loads[members]
    return members, float(prefix_collision_probs(x[0], x[1:])[-1])


def build_group(pool: CandidatePool, p_thr: float) -> PollingGroup:
    """Seed with the likeliest node, then add the least likely ones while the
    collision probability stays within ``p_thr``.  Ties go to the lower id."""
    if len(pool) == 0:
        raise ValueError("cannot build a group from an empty pool")
    if not 0.0 < p_thr < 1.0:
        raise ValueError("p_thr must lie in (0, 1)")
    by_id = np.argsort(pool.ids, kind="stable")
    members, pc = select_threshold_group(pool.loads[by_id], p_thr)
    ids = pool.ids[by_id][members]
    return PollingGroup(tuple(int(i) for i in ids), pc, p_thr)


def build_fixed_group(pool: CandidatePool, size: int) -> PollingGroup:
    """The ``size`` likeliest nodes (ties to the lower id)."""
    if not 1 <= size <= len(pool):
        raise ValueError(f"group size {size} outside [1, {len(pool)}]")
    by_id = np.argsort(pool.ids, kind="stable")
    members, pc = select_fixed_group(pool.loads[by_id], size)
    return PollingGroup(tuple(int(i) for i in pool.ids[by_id][members]), pc, None)


def split_members(member_ids, probs) -> tuple[list, list]:
    """Greedy (LPT) two-way split balancing the summed activation probability.

    Members are taken in decreasing probability, ties by id, and each goes to
    the side with the smaller sum; equal sums go to the side with fewer
    members, then to the left.
    """
    ids = list(member_ids)
    p = list(probs)
    if len(ids) < 2:
        raise ValueError("cannot split a group with fewer than two members")
    order = sorted(range(len(ids)), key=lambda i: (-p[i], ids[i]))
    left, right = [], []
    s_left = s_right = 0.0
    for i in order:
        if s_left < s_right or (s_left == s_right and len(left) <= len(right)):
            left.append(ids[i])
            s_left += p[i]
        else:
            right.append(ids[i])
            s_right += p[i]
    return left, right


def split_group(group: PollingGroup, pool: CandidatePool) -> tuple[PollingGroup, PollingGroup]:
    """Split ``group`` in two using the activation probabilities in ``pool``."""
    prob = dict(zip(pool.ids.tolist(), pool.probs.tolist()))
    load = dict(zip(pool.ids.tolist(), pool.loads.tolist()))
    left, right = split_members(group.member_ids, [prob[i] for i in group.member_ids])

    def _make(members):
        x = np.array([load[i] for i in members])
        pc = float(prefix_collision_probs(x[0], x[1:])[-1])
        return PollingGroup(tuple(members), pc, group.threshold_used)

    return _make(left), _make(right)
