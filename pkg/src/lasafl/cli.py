"""Command-line runner.

    lasafl run CONFIG [--grid KEY=V1,V2,...] [--seed S] [--out DIR] [--jobs J] [--dump-updates]
    lasafl compare CONFIG [CONFIG ...] [--seed S] [--out DIR] [--jobs J]
    lasafl kappa CONFIG [--seed S] [--out DIR]
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import attacks as atk
from .aggregators import LasaParams, fedavg, lasa, make_aggregator
from .config import ConfigError, ExperimentConfig, parse_config, resolve_config
from .engine import run_experiment
from .metrics import estimate_kappa, make_kappa_scenario
from .report import write_json, write_run
from .sparsify import SparsificationLevel
from .update import to_bytes

log = logging.getLogger("lasafl")

OUT_ENV = "LASAFL_OUT"


def load_config(path: str, seed: int | None = None) -> ExperimentConfig:
    cfg = parse_config(Path(path).read_text())
    if not cfg.name:
        cfg = dataclasses.replace(cfg, name=Path(path).stem)
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    return resolve_config(cfg)


def _set_path(cfg: ExperimentConfig, key: str, raw: str) -> ExperimentConfig:
    """Return ``cfg`` with dotted ``key`` set, parsing ``raw`` as the field's type."""
    section, _, leaf = key.rpartition(".")
    target = getattr(cfg, section) if section else cfg
    if target is None or leaf not in {f.name for f in dataclasses.fields(target)}:
        raise ConfigError(f"{key}: unknown grid key")
    current = getattr(target, leaf)
    if isinstance(current, bool):
        value = raw.lower() in ("1", "true", "yes")
    elif isinstance(current, int):
        value = int(raw)
    elif isinstance(current, float) or current is None:
        value = float(raw)
    else:
        value = raw
    updated = dataclasses.replace(target, **{leaf: value})
    if not section:
        return updated
    return dataclasses.replace(cfg, **{section: updated})


def expand_grid(cfg: ExperimentConfig, grid: str | None) -> list[ExperimentConfig]:
    if not grid:
        return [cfg]
    key, _, values = grid.partition("=")
    if not values:
        raise ConfigError(f"--grid expects KEY=V1,V2,..., got {grid!r}")
    out = []
    for raw in values.split(","):
        c = _set_path(cfg, key.strip(), raw.strip())
        out.append(dataclasses.replace(c, name=f"{cfg.name}_{key.strip().replace('.', '-')}={raw.strip()}"))
    return out


def execute(cfg: ExperimentConfig, out_dir: str, dump_updates: bool = False) -> dict:
    """Run one experiment and write its outputs; picklable for worker processes."""
    records = run_experiment(cfg)
    target = Path(out_dir) / cfg.name
    summary = write_run(target, cfg, records)
    if dump_updates:
        dump = target / "updates"
        dump.mkdir(exist_ok=True)
        for r in records:
            (dump / f"round_{r.round:04d}.bin").write_bytes(to_bytes(r.outcome.aggregate))
    return summary


def run_many(configs, out_dir: str, jobs: int, dump_updates: bool = False) -> list[dict]:
    if jobs > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(execute, c, out_dir, dump_updates) for c in configs]
            return [f.result() for f in futures]
    return [execute(c, out_dir, dump_updates) for c in configs]


def _out_dir(args, cfg: ExperimentConfig | None = None) -> str:
    if args.out:
        return args.out
    return os.environ.get(OUT_ENV) or (cfg.output_dir if cfg else "runs")


def cmd_run(args) -> int:
    cfg = load_config(args.config, args.seed)
    configs = expand_grid(cfg, args.grid)
    out = _out_dir(args, cfg)
    summaries = run_many(configs, out, args.jobs, args.dump_updates)
    for s in summaries:
        print(
            f"{s['name']}: final={s['final_accuracy']:.4f} best={s['best_accuracy']:.4f}"
            if s["final_accuracy"] is not None
            else f"{s['name']}: no rounds"
        )
    if len(summaries) > 1:
        write_json(Path(out) / f"{cfg.name}_grid.json", summaries)
    return 0


def comparison_table(summaries) -> str:
    attacks = []
    for s in summaries:
        if s["attack"] not in attacks:
            attacks.append(s["attack"])
    aggs = []
    for s in summaries:
        if s["aggregator"] not in aggs:
            aggs.append(s["aggregator"])
    cell = {(s["aggregator"], s["attack"]): s["final_accuracy"] for s in summaries}
    lines = ["aggregator," + ",".join(attacks)]
    for a in aggs:
        vals = [cell.get((a, k)) for k in attacks]
        lines.append(a + "," + ",".join("" if v is None else f"{100 * v:.2f}" for v in vals))
    return "\n".join(lines) + "\n"


def cmd_compare(args) -> int:
    configs = [load_config(p, args.seed) for p in args.configs]
    out = _out_dir(args, configs[0])
    summaries = run_many(configs, out, args.jobs)
    rows = ["aggregator,attack,final_accuracy,best_accuracy"]
    for s in summaries:
        rows.append(f"{s['aggregator']},{s['attack']},{s['final_accuracy']!r},{s['best_accuracy']!r}")
    Path(out).mkdir(parents=True, exist_ok=True)
    (Path(out) / "compare.csv").write_text("\n".join(rows) + "\n")
    table = comparison_table(summaries)
    (Path(out) / "compare_table.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_kappa(args) -> int:
    cfg = load_config(args.config, args.seed)
    k = cfg.kappa
    agg_cfg = cfg.aggregator
    aggregator = make_aggregator(agg_cfg.key, agg_cfg.params())
    level = agg_cfg.sparsification_level if agg_cfg.key == "lasa" else 0.0
    results = {}
    for kind in k.attacks:
        spec = dataclasses.replace(cfg.attack, kind=kind) if cfg.attack else atk.AttackSpec(kind)
        scenario = make_kappa_scenario(k.n, k.f, spec, level, cfg.seed, cfg.local)
        report = estimate_kappa(aggregator, scenario, k.trials, cfg.seed)
        results[kind] = report.to_dict()
        print(
            f"{kind}: kappa={report.empirical_kappa:.6g} bound={report.bound:.6g} "
            f"violations={report.violations}/{sum(report.preconditions)}"
        )
    # sanity: no attackers, no sparsification, radii too wide to exclude anyone
    clean = make_kappa_scenario(k.n, 0, None, 0.0, cfg.seed, cfg.local)
    wide = LasaParams(SparsificationLevel(0.0), 1e9, 1e9)
    results["f0_lasa_wide"] = estimate_kappa(lambda b: lasa(b, wide), clean, min(k.trials, 20), cfg.seed).to_dict()
    results["f0_fedavg"] = estimate_kappa(fedavg, clean, min(k.trials, 20), cfg.seed).to_dict()
    out = Path(_out_dir(args, cfg)) / cfg.name
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "kappa.json", results)
    write_json(out / "config.json", cfg.to_dict())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lasafl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override the master seed")
        p.add_argument("--out", default=None, help=f"output directory (env {OUT_ENV})")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("run", help="run one experiment or a one-key grid")
    p.add_argument("config")
    p.add_argument("--grid", default=None, help="KEY=V1,V2,... e.g. aggregator.sparsification_level=0.1,0.3")
    p.add_argument("--dump-updates", action="store_true", help="write each round's aggregate as a binary record")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="run several configs and tabulate final accuracy")
    p.add_argument("configs", nargs="+")
    common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("kappa", help="estimate kappa-robustness against the closed-form bound")
    p.add_argument("config")
    common(p)
    p.set_defaults(func=cmd_kappa)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"lasafl: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
