"""Command-line front end: ``wursim {sweep,validate,bounds,fixed-group}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

from . import experiment
from .analytic import NetworkParams
from .simcore import ProtocolKind

EXIT_OK, EXIT_FAILED, EXIT_BAD_INPUT, EXIT_IO = 0, 1, 2, 3

# config keys accepted from --config, with their parsers
_PARAM_KEYS = {f.name for f in dataclasses.fields(NetworkParams)}
_RUN_KEYS = {
    "n", "loads", "protocols", "reps", "events", "seed", "p_thr", "backoff_window",
    "sizes", "out", "checks", "xi", "g", "rounds", "trials",
}


class BadInput(ValueError):
    pass


def _int_list(text):
    try:
        out = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise BadInput(f"expected comma-separated integers, got {text!r}") from None
    if not out:
        raise BadInput("empty list")
    return out


def _float_list(text):
    try:
        out = [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise BadInput(f"expected comma-separated numbers, got {text!r}") from None
    if not out:
        raise BadInput("empty list")
    return out


def _as_list(value, conv):
    if isinstance(value, list):
        return conv(",".join(str(v) for v in value))
    return conv(value)


def load_config(path) -> dict:
    """Flat JSON object; unknown keys and wrong types are rejected."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadInput(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise BadInput("config must be a JSON object")
    unknown = set(raw) - _PARAM_KEYS - _RUN_KEYS
    if unknown:
        raise BadInput(f"unknown config keys: {', '.join(sorted(unknown))}")
    for key, value in raw.items():
        if key in _PARAM_KEYS and not (isinstance(value, (int, float)) and not isinstance(value, bool)):
            raise BadInput(f"config key {key!r} must be a number")
    return raw


def _settings(args) -> dict:
    """Layer built-in defaults < config file < command-line flags."""
    merged = {}
    if args.config:
        merged.update(load_config(args.config))
    for key, value in vars(args).items():
        if key in ("command", "config", "func") or value is None:
            continue
        merged[key] = value
    return merged


def _network(cfg) -> NetworkParams:
    overrides = {k: cfg[k] for k in _PARAM_KEYS if k in cfg}
    try:
        base = NetworkParams()
        return base.with_overrides(**overrides) if overrides else base
    except (TypeError, ValueError) as exc:
        raise BadInput(str(exc)) from None


def _seed(cfg) -> int:
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("WURSIM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise BadInput(f"WURSIM_SEED must be an integer, got {env!r}") from None
    return 0


def _protocols(cfg):
    names = cfg.get("protocols", "wur-ls,wur-bs,tdma,aloha")
    if isinstance(names, list):
        names = ",".join(names)
    try:
        return tuple(ProtocolKind.parse(name, p_thr=float(cfg.get("p_thr", 0.05)),
                                        backoff_window=int(cfg.get("backoff_window", 16)))
                     for name in str(names).split(",") if name.strip())
    except ValueError as exc:
        raise BadInput(str(exc)) from None


def _outdir(cfg) -> Path:
    out = Path(cfg.get("out", "results"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_metadata(out: Path, command: str, cfg: dict) -> None:
    # wall-clock data lives only here so the result files stay byte-identical
    meta = {"command": command, "settings": {k: v for k, v in sorted(cfg.items())},
            "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    (out / f"{command}.meta.json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


def _fmt(v, width=10, digits=4):
    if v is None:
        return "-".rjust(width)
    if isinstance(v, float):
        return f"{v:.{digits}g}".rjust(width)
    return str(v).rjust(width)


def print_rows(rows, file=None):
    file = file or sys.stdout
    head = ["n", "xi", "protocol", "G", "delay_s", "se", "eta_%", "unstable", "coll_rate", "rounds"]
    print(" ".join(h.rjust(10) for h in head), file=file)
    for r in rows:
        print(" ".join([
            _fmt(r.n), _fmt(r.xi), _fmt(r.protocol), _fmt(r.group_size), _fmt(r.mean_delay),
            _fmt(r.delay_stderr), _fmt(r.mean_eta), _fmt(r.unstable_fraction),
            _fmt(r.collision_rate), _fmt(r.mean_rounds_to_resolve)]), file=file)


def _spec(cfg, **extra) -> experiment.SweepSpec:
    try:
        return experiment.SweepSpec(
            n_values=tuple(_as_list(cfg.get("n", "100,1000"), _int_list)),
            loads=tuple(_as_list(cfg.get("loads", "0.01,0.1,0.2,0.3,0.4,0.5"), _float_list)),
            protocols=extra.pop("protocols", None) or _protocols(cfg),
            replications=int(cfg.get("reps", 10)),
            slot_budget=int(cfg.get("events", 100_000)),
            base_seed=_seed(cfg),
            **extra,
        )
    except (TypeError, ValueError) as exc:
        raise BadInput(str(exc)) from None


def cmd_sweep(cfg) -> int:
    params = _network(cfg)
    spec = _spec(cfg)
    out = _outdir(cfg)
    rows = experiment.run_sweep(spec, params)
    experiment.write_csv(rows, out / "sweep.csv")
    experiment.write_json(rows, out / "sweep.json")
    _write_metadata(out, "sweep", cfg)
    print_rows(rows)
    return EXIT_OK


def cmd_validate(cfg) -> int:
    names = cfg.get("checks", ",".join(experiment.CHECKS))
    if isinstance(names, list):
        names = ",".join(names)
    names = [c.strip() for c in str(names).split(",") if c.strip()]
    unknown = [c for c in names if c not in experiment.CHECKS]
    if unknown:
        raise BadInput(f"unknown checks: {', '.join(unknown)}; available: {', '.join(experiment.CHECKS)}")
    seed = _seed(cfg)
    xi = float(cfg["xi"]) if "xi" in cfg else None
    if xi is not None and not 0 < xi < 1:
        raise BadInput("--xi must lie in (0, 1)")
    g = int(_as_list(cfg["g"], _int_list)[0]) if "g" in cfg else None
    n = int(_as_list(cfg["n"], _int_list)[0]) if "n" in cfg else None
    results = []
    for name in names:
        kwargs = {}
        if name == "group-probs":
            kwargs = dict(seed=seed, **({"g": g} if g else {}))
            if g is not None and not 1 <= g <= 20:
                raise BadInput("--g for group-probs must lie in [1, 20]")
        elif name in ("tdma-cycle", "tdma-delay"):
            kwargs = dict(seed=seed, n=n or 100, xi=xi if xi is not None else 0.3,
                          events=int(cfg.get("events", 100_000)), reps=int(cfg.get("reps", 3)))
        elif name == "resolver-exact":
            kwargs = dict(seed=seed, g=g or 64, trials=int(cfg.get("trials", 20_000)))
        elif name == "slot-outcomes":
            size = g or 10
            kwargs = dict(seed=seed, g=size, n=n or size, xi=xi if xi is not None else 0.05,
                          events=int(cfg.get("events", 100_000)))
            if size > kwargs["n"]:
                raise BadInput("group size exceeds N")
        res = experiment.CHECKS[name](**kwargs)
        print(res.line(), flush=True)
        results.append(res)
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("failed: " + "; ".join(failed))
        return EXIT_FAILED
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_bounds(cfg) -> int:
    g_values = _as_list(cfg.get("g", "100,1000"), _int_list)
    if any(g < 2 for g in g_values):
        raise BadInput("group sizes must be >= 2; a single node cannot collide")
    r_max = int(cfg.get("rounds", 12))
    if r_max < 0:
        raise BadInput("--rounds must be non-negative")
    p_thr = float(cfg.get("p_thr", 0.05))
    if not 0 < p_thr < 1:
        raise BadInput("--p-thr must lie in (0, 1)")
    rows = experiment.bounds_report(g_values, range(r_max + 1), trials=int(cfg.get("trials", 100_000)),
                                    seed=_seed(cfg), p_thr=p_thr)
    out = _outdir(cfg)
    experiment.write_rows(rows, out / "bounds.csv")
    _write_metadata(out, "bounds", cfg)
    print(f"{'G':>6} {'r':>3} {'eq18_M2':>9} {'eq18_Mbar':>9} {'exact_M2':>9} {'monte_carlo':>11} {'se':>8}")
    for r in rows:
        print(f"{r.group_size:>6} {r.round:>3} {r.bound_optimistic:>9.4f} {r.bound_pessimistic:>9.4f} "
              f"{r.exact_optimistic:>9.4f} {r.monte_carlo:>11.4f} {r.mc_stderr:>8.4f}")
    return EXIT_OK


def cmd_fixed_group(cfg) -> int:
    params = _network(cfg)
    sizes = tuple(_as_list(cfg.get("sizes", "1,100,500,1000"), _int_list))
    n_values = _as_list(cfg.get("n", "1000"), _int_list)
    if any(s < 1 or s > n for s in sizes for n in n_values):
        raise BadInput("group sizes must lie in [1, N]")
    cfg = dict(cfg, n=n_values, loads=cfg.get("loads", "0.1,0.2,0.3,0.4,0.5"))
    protos = tuple(ProtocolKind.parse(p, p_thr=float(cfg.get("p_thr", 0.05))) for p in ("wur-ls", "wur-bs"))
    spec = _spec(cfg, protocols=protos, fixed_group_sizes=sizes)
    out = _outdir(cfg)
    rows = experiment.run_sweep(spec, params)
    deltas = experiment.delta_table([r for r in rows if r.protocol == "wur-ls"],
                                    [r for r in rows if r.protocol == "wur-bs"])
    experiment.write_csv(rows, out / "fixed_group.csv")
    experiment.write_json(rows, out / "fixed_group.json")
    experiment.write_rows(deltas, out / "fixed_group_delta.csv")
    _write_metadata(out, "fixed-group", cfg)
    print(f"{'n':>6} {'G':>6} {'xi':>6} {'dD_s':>10} {'se':>8} {'d_eta':>8}")
    for d in deltas:
        print(f"{d.n:>6} {d.group_size:>6} {d.xi:>6} {_fmt(d.delta_delay)} {_fmt(d.delay_stderr, 8)} "
              f"{_fmt(d.delta_eta, 8)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wursim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file with default settings")
        p.add_argument("--seed", type=int, help="base seed (falls back to $WURSIM_SEED, then 0)")
        p.add_argument("--out", help="output directory (default: results)")

    def sim(p):
        p.add_argument("--n", help="node counts, comma separated")
        p.add_argument("--loads", help="aggregate loads, comma separated")
        p.add_argument("--reps", type=int, help="replications per cell")
        p.add_argument("--events", type=int, help="polling events per run (sets the horizon)")
        p.add_argument("--p-thr", dest="p_thr", type=float, help="group collision threshold")

    p = sub.add_parser("sweep", help="protocol x load x N grid")
    common(p)
    sim(p)
    p.add_argument("--protocols", help="wur-ls,wur-bs,tdma,aloha")
    p.add_argument("--backoff-window", dest="backoff_window", type=int, help="ALOHA backoff window in slots")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("validate", help="analytic vs simulation checks")
    common(p)
    p.add_argument("--checks", help="comma separated: " + ",".join(experiment.CHECKS))
    p.add_argument("--xi", type=float, help="load for simulation checks")
    p.add_argument("--g", help="group size for group-probs, resolver-exact, slot-outcomes")
    p.add_argument("--n", help="node count for simulation checks")
    p.add_argument("--events", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--trials", type=int)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("bounds", help="collision-resolution round table")
    common(p)
    p.add_argument("--g", help="group sizes, comma separated")
    p.add_argument("--rounds", type=int, help="last round to tabulate")
    p.add_argument("--trials", type=int, help="Monte Carlo collisions per group size")
    p.add_argument("--p-thr", dest="p_thr", type=float)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("fixed-group", help="linear vs binary search at fixed group sizes")
    common(p)
    sim(p)
    p.add_argument("--sizes", help="group sizes, comma separated")
    p.set_defaults(func=cmd_fixed_group)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _settings(args)
        return args.func(cfg)
    except BadInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
