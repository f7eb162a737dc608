"""Monte Carlo campaigns: rate allocation, sweeps, aggregation and output."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from . import analytic
from .analytic import NetworkParams, NodeRates
from .simcore import ProtocolKind, binary_resolution_trace, rounds_to_resolve, simulate

CSV_FIELDS = [
    "n", "xi", "protocol", "group_size", "mean_delay_s", "delay_stderr",
    "mean_eta_pct", "eta_stderr", "unstable_fraction", "collision_rate",
    "mean_rounds", "replications",
]

# stream labels for derive_seed, so rate draws and simulations never share a stream
_RATES, _SIM, _BOUNDS = 0, 1, 2


def derive_seed(base_seed: int, *keys: int) -> int:
    """Mix ``base_seed`` with integer keys into an independent 64-bit seed."""
    ss = np.random.SeedSequence(entropy=int(base_seed) & (2**64 - 1),
                                spawn_key=tuple(int(k) for k in keys))
    lo, hi = ss.generate_state(2, dtype=np.uint32)
    return int(hi) << 32 | int(lo)


def allocate_rates(n: int, xi: float, t_p: float, seed) -> NodeRates:
    """Random per-node rates, uniform on the simplex, summing to ``xi / t_p``."""
    if n < 1:
        raise ValueError("need at least one node")
    if not xi > 0:
        raise ValueError("aggregate load must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = rng.exponential(size=n)
    lam = w / w.sum() * (xi / t_p)
    # one more pass absorbs rounding left by the division
    lam *= (xi / t_p) / lam.sum()
    return NodeRates(lam, t_p)


@dataclass(frozen=True)
class SweepSpec:
    n_values: tuple = (100, 1000)
    loads: tuple = (0.01, 0.1, 0.2, 0.3, 0.4, 0.5)
    protocols: tuple = field(default_factory=lambda: tuple(
        ProtocolKind.parse(p) for p in ("wur-ls", "wur-bs", "tdma", "aloha")))
    replications: int = 10
    slot_budget: int = 100_000
    base_seed: int = 0
    fixed_group_sizes: tuple | None = None
    redraw_rates: bool = True

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.slot_budget < 1:
            raise ValueError("slot budget must be >= 1")
        for xi in self.loads:
            if not 0.0 < xi < 1.0:
                raise ValueError(f"load {xi} outside (0, 1)")
        for n in self.n_values:
            if int(n) != n or n < 1:
                raise ValueError(f"bad node count {n}")
        if not self.protocols:
            raise ValueError("no protocols given")
        if self.fixed_group_sizes is not None:
            for g in self.fixed_group_sizes:
                if g < 1 or any(g > n for n in self.n_values):
                    raise ValueError(f"group size {g} outside [1, N]")

    def horizon(self, params: NetworkParams) -> float:
        """Measured span: ``slot_budget`` idle polls' worth of simulated time."""
        return self.slot_budget * params.poll_time

    def cells(self):
        """Yield ``(index tuple, n, xi, protocol kind, group size)``."""
        sizes = self.fixed_group_sizes
        for ni, n in enumerate(self.n_values):
            for xi_i, xi in enumerate(self.loads):
                for pi, proto in enumerate(self.protocols):
                    if sizes is None or not proto.kind.multicast:
                        yield (ni, xi_i, pi, 0), n, xi, proto, None
                    else:
                        for gi, g in enumerate(sizes):
                            kind = ProtocolKind(proto.kind, proto.p_thr, proto.backoff_window, int(g))
                            yield (ni, xi_i, pi, gi + 1), n, xi, kind, int(g)


@dataclass(frozen=True)
class ResultRow:
    n: int
    xi: float
    protocol: str
    group_size: int | None
    mean_delay: float | None
    delay_stderr: float | None
    mean_eta: float | None
    eta_stderr: float | None
    unstable_fraction: float
    collision_rate: float
    mean_rounds_to_resolve: float | None
    replication_count: int

    def sort_key(self):
        return (self.n, self.xi, self.protocol, -1 if self.group_size is None else self.group_size)

    def as_record(self) -> dict:
        return dict(zip(CSV_FIELDS, (
            self.n, self.xi, self.protocol, self.group_size, self.mean_delay,
            self.delay_stderr, self.mean_eta, self.eta_stderr, self.unstable_fraction,
            self.collision_rate, self.mean_rounds_to_resolve, self.replication_count)))


def _mean_se(values, within=None):
    """Mean and standard error across replications.

    With a single replication the within-run standard error is used when given.
    """
    v = np.asarray([x for x in values if x is not None and not math.isnan(x)], dtype=float)
    if not len(v):
        return None, None
    if len(v) == 1:
        return float(v[0]), (within if within is not None and not math.isnan(within) else 0.0)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def aggregate(n, xi, proto: ProtocolKind, group_size, outcomes) -> ResultRow:
    stable = [o for o in outcomes if not o.unstable]
    unstable_fraction = 1.0 - len(stable) / len(outcomes)
    within = stable[0].delay_stderr if len(stable) == 1 else None
    delay, delay_se = _mean_se([o.mean_delay for o in stable], within)
    eta, eta_se = _mean_se([o.network_eta for o in stable])
    rounds = None
    if proto.kind.multicast and stable:
        rounds, _ = _mean_se([o.mean_rounds for o in stable])
    return ResultRow(
        n=int(n), xi=float(xi), protocol=proto.name, group_size=group_size,
        mean_delay=delay, delay_stderr=delay_se, mean_eta=eta, eta_stderr=eta_se,
        unstable_fraction=unstable_fraction,
        collision_rate=float(np.mean([o.collision_rate for o in outcomes])),
        mean_rounds_to_resolve=rounds, replication_count=len(outcomes),
    )


def run_cell(spec: SweepSpec, params: NetworkParams, index, n, xi, proto, group_size):
    ni, xi_i, pi, gi = index
    cell_params = params.with_overrides(n_nodes=int(n))
    horizon = spec.horizon(cell_params)
    outcomes = []
    for rep in range(spec.replications):
        # rates depend on (n, xi, rep) only, so every protocol sees the same networks
        rate_rep = rep if spec.redraw_rates else 0
        rates = allocate_rates(n, xi, params.t_p, derive_seed(spec.base_seed, _RATES, ni, xi_i, rate_rep))
        seed = derive_seed(spec.base_seed, _SIM, ni, xi_i, pi, gi, rep)
        outcomes.append(simulate(cell_params, rates, proto, horizon, seed))
    return aggregate(n, xi, proto, group_size, outcomes)


def run_sweep(spec: SweepSpec, params: NetworkParams, progress=None) -> list[ResultRow]:
    rows = []
    for index, n, xi, proto, g in spec.cells():
        row = run_cell(spec, params, index, n, xi, proto, g)
        if progress is not None:
            progress(row)
        rows.append(row)
    return sorted(rows, key=ResultRow.sort_key)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    return str(value)


def write_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for row in rows:
            w.writerow([_fmt(v) for v in row.as_record().values()])


def write_json(rows, path) -> None:
    records = [row.as_record() for row in rows]
    Path(path).write_text(json.dumps(records, indent=2) + "\n")


@dataclass(frozen=True)
class DeltaRow:
    n: int
    group_size: int | None
    xi: float
    delta_delay: float | None
    delta_eta: float | None
    delay_stderr: float | None
    eta_stderr: float | None


def _diff(a, b):
    return None if a is None or b is None else a - b


def _combine_se(a, b):
    return None if a is None or b is None else math.hypot(a, b)


def delta_table(ls_rows, bs_rows) -> list[DeltaRow]:
    """Linear-search minus binary-search delay and efficiency per cell."""
    def key(r):
        return (r.n, r.group_size, r.xi)

    ls = {key(r): r for r in ls_rows}
    bs = {key(r): r for r in bs_rows}
    if len(ls) != len(ls_rows) or len(bs) != len(bs_rows):
        raise ValueError("duplicate cells in delta input")
    if set(ls) != set(bs):
        raise ValueError("linear and binary rows cover different cells")
    out = []
    for k in sorted(ls, key=lambda k: (k[0], -1 if k[1] is None else k[1], k[2])):
        a, b = ls[k], bs[k]
        out.append(DeltaRow(
            n=k[0], group_size=k[1], xi=k[2],
            delta_delay=_diff(a.mean_delay, b.mean_delay),
            delta_eta=_diff(a.mean_eta, b.mean_eta),
            delay_stderr=_combine_se(a.delay_stderr, b.delay_stderr),
            eta_stderr=_combine_se(a.eta_stderr, b.eta_stderr),
        ))
    return out


def uniform_activation_prob(group_size: int, p_thr: float) -> float:
    """Per-node activation probability that puts a uniform group at ``p_thr``."""
    if group_size < 2:
        raise ValueError("a group of one cannot collide")
    return brentq(lambda p: analytic.uniform_collision_prob(p, group_size) - p_thr, 1e-15, 1.0 - 1e-15,
                  xtol=1e-15, rtol=1e-13)


def sample_collision_sizes(group_size: int, p_a: float, trials: int, rng) -> np.ndarray:
    """Active counts of collided polls: binomial conditioned on at least two."""
    ms = np.arange(2, group_size + 1)
    pmf = np.array([analytic.active_given_collision(int(m), group_size, p_a) for m in ms])
    keep = pmf > 1e-300
    ms, pmf = ms[keep], pmf[keep]
    return rng.choice(ms, size=trials, p=pmf / pmf.sum())


@dataclass(frozen=True)
class BoundsRow:
    group_size: int
    round: int
    single_node: float
    bound_optimistic: float
    bound_pessimistic: float
    curve_optimistic: float
    curve_pessimistic: float
    exact_optimistic: float
    exact_pessimistic: float
    monte_carlo: float
    mc_stderr: float
    mean_active: float
    trials: int


def resolution_rounds_mc(group_size: int, trials: int, seed: int, p_thr: float = 0.05,
                         m: int | None = None):
    """Rounds needed by the binary resolver on synthetic collisions.

    Every member has the same activation probability, chosen so the group
    collides with probability ``p_thr``; collided sets are drawn uniformly
    given their size.  Passing ``m`` fixes the collision size instead.
    Returns ``(rounds, active counts)``.
    """
    rng = np.random.default_rng(seed)
    p_a = uniform_activation_prob(group_size, p_thr)
    if m is None:
        sizes = sample_collision_sizes(group_size, p_a, trials, rng)
    else:
        if not 2 <= m <= group_size:
            raise ValueError("collision size must lie in [2, group_size]")
        sizes = np.full(trials, int(m), dtype=np.int64)
    members = tuple(range(group_size))
    probs = [p_a] * group_size
    cache = {}
    rounds = np.empty(trials, dtype=np.int64)
    for t, m in enumerate(sizes):
        active = rng.choice(group_size, size=int(m), replace=False)
        rounds[t] = rounds_to_resolve(binary_resolution_trace(members, probs, active.tolist(), cache))
    return rounds, sizes


def bounds_report(g_values, rounds, trials: int = 100_000, seed: int = 0,
                  p_thr: float = 0.05, m_optimistic: int = 2,
                  m_pessimistic: float | None = None) -> list[BoundsRow]:
    """Per-round success curves: analytic bounds, exact placement, Monte Carlo.

    The pessimistic active count defaults to the mean collision size seen in
    the Monte Carlo draw.
    """
    rounds = list(rounds)
    out = []
    for gi, g in enumerate(g_values):
        g = int(g)
        if g < 2:
            raise ValueError("group size must be at least 2 for a collision")
        r_mc, sizes = resolution_rounds_mc(g, trials, derive_seed(seed, _BOUNDS, gi), p_thr)
        m_bar = float(sizes.mean()) if m_pessimistic is None else float(m_pessimistic)
        m_low = min(int(m_optimistic), g)
        for r in rounds:
            p = float(np.mean(r_mc <= r))
            se = math.sqrt(p * (1 - p) / trials)
            if r >= 1:
                b_opt = analytic.resolve_all_bound(r, m_low, g)
                b_pes = analytic.resolve_all_bound(r, m_bar, g)
            else:
                b_opt = b_pes = 0.0
            out.append(BoundsRow(
                group_size=g, round=r,
                single_node=analytic.binary_round_success_single(r, m_low, g),
                bound_optimistic=b_opt,
                bound_pessimistic=b_pes,
                curve_optimistic=analytic.resolve_all_curve(r, m_low) if r >= 1 else 0.0,
                curve_pessimistic=analytic.resolve_all_curve(r, m_bar) if r >= 1 else 0.0,
                exact_optimistic=analytic.resolve_all_exact(r, m_low, g),
                exact_pessimistic=analytic.resolve_all_exact(r, max(2, round(m_bar)), g),
                monte_carlo=p, mc_stderr=se, mean_active=m_bar, trials=trials,
            ))
    return out


def write_rows(rows, path) -> None:
    """Generic CSV for dataclass rows (bounds and delta tables)."""
    rows = list(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not rows:
            return
        names = list(asdict(rows[0]))
        w.writerow(names)
        for row in rows:
            w.writerow([_fmt(v) for v in asdict(row).values()])


def batch_stderr(chunks, n_batches: int = 20):
    """Mean and batch-means standard error of time-ordered samples.

    ``chunks`` is one array per replication; each is cut into ``n_batches``
    consecutive batches so serial correlation inside a run is absorbed.
    """
    means = []
    for x in chunks:
        x = np.asarray(x, dtype=float)
        if len(x) < n_batches:
            continue
        means.extend(b.mean() for b in np.array_split(x, n_batches))
    means = np.asarray(means)
    if len(means) < 2:
        return math.nan, math.nan
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(len(means)))


def delivery_offset(params: NetworkParams) -> float:
    """Gap between the analytic waiting time and the simulator's delay.

    The closed form stops when a packet's transmission starts; the simulator
    stops the clock when the packet has been sent, which adds the propagation
    bound and one airtime.
    """
    return params.tau0 + params.t_p


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    measured: float
    expected: float
    tolerance: str
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"[{tag}] {self.name}: measured={self.measured:.6g} expected={self.expected:.6g} "
                f"tol={self.tolerance}{extra}")


def check_group_probs(g: int = 10, trials: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        x = rng.exponential(size=g) * rng.choice([0.01, 0.3, 3.0])
        impl = analytic.group_probs(x)
        enum = analytic.enumerate_group_probs(x)
        worst = max(worst, abs(sum(impl) - 1.0), *(abs(a - b) for a, b in zip(impl, enum)))
    return CheckResult(f"group-probs (G={g}, {trials} groups)", worst <= 1e-12, worst, 0.0, "1e-12")


def check_tdma_closed_form() -> CheckResult:
    worst = 0.0
    for n in (10, 100, 1000):
        params = NetworkParams(n_nodes=n)
        for xi in (0.01, 0.1, 0.3, 0.5, 0.9):
            model = analytic.tdma_model(params, NodeRates.homogeneous(n, xi, params.t_p))
            rel = np.abs(model.per_node_delay_closed_form / model.per_node_delay - 1.0)
            worst = max(worst, float(rel.max()))
    return CheckResult("tdma-closed-form", worst <= 1e-9, worst, 0.0, "1e-9 relative")


def _tdma_runs(n, xi, events, reps, seed, params=None):
    params = (params or NetworkParams()).with_overrides(n_nodes=n)
    horizon = events * params.poll_time
    kind = ProtocolKind.parse("tdma")
    runs = []
    for rep in range(reps):
        rates = allocate_rates(n, xi, params.t_p, derive_seed(seed, _RATES, n, round(xi * 1e6), rep))
        out = simulate(params, rates, kind, horizon, derive_seed(seed, _SIM, n, round(xi * 1e6), rep))
        runs.append((rates, analytic.tdma_model(params, rates), out))
    return params, runs


def tdma_agreement(n=100, xi=0.3, events=100_000, reps=3, seed=0):
    """Simulated TDMA cycle and delay against the closed forms, from one set of runs."""
    params, runs = _tdma_runs(n, xi, events, reps, seed)
    expected = float(np.mean([m.mean_cycle for _, m, _ in runs]))
    diffs = [o.cycle_lengths - m.mean_cycle for _, m, o in runs]
    mean, se = batch_stderr(diffs)
    z = abs(mean) / se
    cycle = CheckResult(f"tdma-cycle (N={n}, xi={xi})", bool(z <= 3.0), expected + mean, expected, "3 SE",
                        f"se={se:.3g}, z={z:.2f}")
    off = delivery_offset(params)
    # per-replication analytic targets differ slightly with the rate draw
    diffs = [o.delays - (m.packet_mean_delay + off) for _, m, o in runs]
    mean, se = batch_stderr(diffs)
    expected = float(np.mean([m.packet_mean_delay + off for _, m, _ in runs]))
    z = abs(mean) / se
    delay = CheckResult(f"tdma-delay (N={n}, xi={xi})", bool(z <= 3.0), expected + mean, expected,
                        "3 SE", f"se={se:.3g}, z={z:.2f}")
    return cycle, delay


def check_tdma_cycle(n=100, xi=0.3, events=100_000, reps=3, seed=0) -> CheckResult:
    return tdma_agreement(n, xi, events, reps, seed)[0]


def check_tdma_delay(n=100, xi=0.3, events=100_000, reps=3, seed=0) -> CheckResult:
    return tdma_agreement(n, xi, events, reps, seed)[1]


def exact_bound_order(r_max=12, m_max=10, g_values=(16, 64, 256)) -> CheckResult:
    from decimal import Decimal, localcontext
    from fractions import Fraction

    worst_gap = None
    failures = 0
    with localcontext() as ctx:
        ctx.prec = 60
        for g in g_values:
            for m in range(2, min(m_max, g) + 1):
                # G^M (G-M)! M! / G! is rational; only the exponential needs Decimal
                pre = Fraction(g**m * math.factorial(g - m) * math.factorial(m), math.factorial(g))
                for r in range(1, r_max + 1):
                    raw = Decimal(pre.numerator) / Decimal(pre.denominator) * (
                        Decimal(-m * m) / Decimal(2 ** (r + 1))).exp()
                    bound = min(Decimal(1), raw)
                    ex = analytic.resolve_all_exact(r, m, g, exact=True)
                    ex_d = Decimal(ex.numerator) / Decimal(ex.denominator)
                    gap = bound - ex_d
                    if gap < 0:
                        failures += 1
                    worst_gap = gap if worst_gap is None else min(worst_gap, gap)
    return CheckResult("bound-order (exact <= clamped bound)", failures == 0, float(worst_gap), 0.0,
                       ">= 0", f"{failures} violations")


def check_resolver_exact(g=64, m_values=(2, 3), trials=20_000, seed=0, r_max=8) -> CheckResult:
    worst = 0.0
    for m in m_values:
        rounds, _ = resolution_rounds_mc(g, trials, derive_seed(seed, _BOUNDS, g, m), m=m)
        for r in range(r_max + 1):
            p = float(np.mean(rounds <= r))
            ex = analytic.resolve_all_exact(r, m, g) if r >= 1 else 0.0
            se = math.sqrt(max(p * (1 - p), ex * (1 - ex)) / trials)
            z = abs(p - ex) / se if se > 0 else (0.0 if abs(p - ex) < 1e-12 else math.inf)
            worst = max(worst, z)
    return CheckResult(f"resolver-exact (G={g}, M={list(m_values)})", worst <= 3.0, worst, 0.0,
                       "z <= 3", f"{trials} trials per M")


def _z(observed, predicted, var):
    if var <= 0:
        return 0.0 if abs(observed - predicted) < 1e-9 else math.inf
    return abs(observed - predicted) / math.sqrt(var)


def check_slot_outcomes(n=10, xi=0.05, g=10, events=100_000, seed=0) -> CheckResult:
    """Idle/success/collision counts of a fixed group against their predicted sums.

    Replications are added until ``events`` initial polls have been observed.
    """
    params = NetworkParams(n_nodes=n)
    kind = ProtocolKind.parse("wur-bs", fixed_group_size=g)
    seen = dict(idle=0, success=0, collision=0)
    pred = dict(idle=0.0, success=0.0, collision=0.0, var_idle=0.0, var_success=0.0, var_collision=0.0)
    rep = 0
    while sum(seen.values()) < events:
        rates = allocate_rates(n, xi, params.t_p, derive_seed(seed, _RATES, n, g, rep))
        out = simulate(params, rates, kind, events * params.poll_time, derive_seed(seed, _SIM, n, g, rep))
        seen["idle"] += out.idle_slots
        seen["success"] += out.success_slots
        seen["collision"] += out.collision_slots
        for k in pred:
            pred[k] += out.predicted[k]
        rep += 1
    worst = max(_z(seen[k], pred[k], pred["var_" + k]) for k in seen)
    return CheckResult(f"slot-outcomes (fixed G={g}, N={n}, xi={xi})", worst <= 3.0, worst, 0.0, "z <= 3",
                       f"{sum(seen.values())} polls; idle {seen['idle']} vs {pred['idle']:.1f}, "
                       f"success {seen['success']} vs {pred['success']:.1f}, "
                       f"collision {seen['collision']} vs {pred['collision']:.1f}")


CHECKS = {
    "group-probs": check_group_probs,
    "tdma-closed-form": check_tdma_closed_form,
    "tdma-cycle": check_tdma_cycle,
    "tdma-delay": check_tdma_delay,
    "bound-order": exact_bound_order,
    "resolver-exact": check_resolver_exact,
    "slot-outcomes": check_slot_outcomes,
}
