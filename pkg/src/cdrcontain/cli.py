"""Command-line entry point: ``cdrcontain <command> --config FILE --out DIR``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import yaml

from . import __version__
from .cdr import NightWindow, detect_homes, write_homes
from .config import ExperimentConfig, build_inputs, check_seed_fraction, load_config, load_dataset
from .geo import write_scores
from .individual import write_indicators
from .mobility import TransitionCounts, allocate_population, write_matrix
from .scenarios import (
    SCENARIO_KINDS,
    compare_scenarios,
    run_scenario,
    write_aggregate,
    write_comparison,
    write_runs,
    write_timeseries,
)
from .synthetic import GeneratorConfig, generate_synthetic_cdr

log = logging.getLogger("cdrcontain")

# written by ``generate`` when the config lists no scenarios of its own
STARTER_SCENARIOS = [
    {"kind": "none"},
    {"kind": "geo_placerank", "k": 5, "delay": 3},
    {"kind": "geo_centrality", "k": 5, "delay": 3},
    {"kind": "indiv_progmosis", "fraction": 0.2, "delay": 3},
    {"kind": "indiv_random", "fraction": 0.2, "delay": 3},
]


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    for name in ("runs", "horizon", "mode"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg.simulation, name, value)
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(path: Path, command: str, cfg: ExperimentConfig, inputs, specs) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg.as_dict(),
        "scenarios": [asdict(s) for s in specs],
        "inputs": inputs.digests,
        "n_areas": len(inputs.area_ids),
        "total_population": int(inputs.populations.sum()),
        "params": inputs.params.as_dict(),
        "calendar_start": inputs.calendar.start.isoformat(),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(args) -> None:
    cfg = _config(args)
    out = _out(args)
    gen = GeneratorConfig.from_dict(cfg.generator)
    ds = generate_synthetic_cdr(gen, cfg.seed, out)
    template = {
        "seed": cfg.seed,
        "data": {"cdr": ds.cdr_path.name, "towers": ds.tower_path.name, "areas": ds.area_path.name,
                 "utc_offset_hours": gen.utc_offset_hours,
                 "night_start_hour": gen.night_start_hour, "night_end_hour": gen.night_end_hour},
        "simulation": asdict(cfg.simulation),
        "params": cfg.params,
        "scenarios": cfg.scenarios if cfg.scenarios != ExperimentConfig().scenarios else STARTER_SCENARIOS,
    }
    with open(out / "experiment.yaml", "w") as fh:
        yaml.safe_dump(template, fh, sort_keys=True)
    print(f"wrote synthetic dataset ({gen.n_users} users, {gen.n_areas} areas) to {out}")


def cmd_estimate(args) -> None:
    cfg = _config(args)
    out = _out(args)
    ds = load_dataset(cfg)
    d = cfg.data
    digest = ds.digests["cdr"][:16]
    for window, trajs in (("training", ds.training), ("evaluation", ds.evaluation)):
        counts = TransitionCounts.from_trajectories(trajs, ds.area_ids, d.utc_offset_hours)
        for day_class in ("weekday", "weekend"):
            write_matrix(counts.matrix(day_class, source_digest=digest), out / f"matrix_{window}_{day_class}.csv")
    homes = detect_homes(ds.training, NightWindow(d.night_start_hour, d.night_end_hour), d.utc_offset_hours)
    write_homes([homes[u] for u in sorted(homes)], out / "homes.csv")
    total = cfg.simulation.total_population or ds.areas.total_population
    pops = allocate_population(homes, total, ds.area_ids)
    with open(out / "population.csv", "w") as fh:
        fh.write("area_id,population\n")
        for a, p in zip(ds.area_ids, pops):
            fh.write(f"{a},{int(p)}\n")
    print(f"wrote matrices, homes and population for {len(ds.area_ids)} areas to {out}")


def cmd_indicators(args) -> None:
    cfg = _config(args)
    out = _out(args)
    inputs = build_inputs(cfg)
    write_indicators([inputs.indicators[u] for u in sorted(inputs.indicators)], out / "indicators.csv")
    print(f"wrote indicators for {len(inputs.indicators)} users to {out / 'indicators.csv'}")


def cmd_rank_areas(args) -> None:
    cfg = _config(args)
    out = _out(args)
    inputs = build_inputs(cfg)
    write_scores(inputs.placerank, out / "placerank.csv")
    write_scores(inputs.centrality, out / "centrality.csv")
    if not inputs.placerank.converged:
        log.warning("place rank did not converge in %d iterations", inputs.placerank.iterations)
    print(f"wrote area rankings to {out}")


def _single_spec(cfg: ExperimentConfig, args):
    entry = dict(cfg.scenarios[0]) if cfg.scenarios and args.kind is None else {"kind": args.kind or "none"}
    return cfg.scenario_spec(entry, k=args.k, fraction=args.fraction, delay=args.delay,
                             seed_area=args.seed_area, label=args.label)


def cmd_simulate(args) -> None:
    cfg = _config(args)
    out = _out(args)
    inputs = build_inputs(cfg)
    check_seed_fraction(inputs)
    spec = _single_spec(cfg, args)
    result = run_scenario(inputs, spec, cfg.workers, keep_area_series=args.timeseries)
    write_aggregate(result.aggregate, out / "aggregate.csv")
    write_runs(result, out / "runs.csv")
    if args.timeseries:
        write_timeseries(result, inputs.area_ids, out / "timeseries.csv")
    _write_manifest(out / "manifest.json", "simulate", cfg, inputs, [spec])
    agg = result.aggregate
    print(f"{spec.name}: final mean {agg.mean[-1]:.1f} (95% CI {agg.ci_lo[-1]:.1f} to {agg.ci_hi[-1]:.1f}), "
          f"{spec.runs} runs")


def cmd_compare(args) -> None:
    cfg = _config(args)
    out = _out(args)
    inputs = build_inputs(cfg)
    check_seed_fraction(inputs)
    specs = cfg.scenario_specs()
    rows, results = compare_scenarios(inputs, specs, cfg.workers)
    write_comparison(rows, out / "comparison.csv")
    agg_dir = out / "aggregates"
    agg_dir.mkdir(exist_ok=True)
    for r in results:
        write_aggregate(r.aggregate, agg_dir / f"{r.spec.name}.csv")
    _write_manifest(out / "manifest.json", "compare", cfg, inputs, specs)
    width = max(len(r.scenario) for r in rows)
    for r in rows:
        print(f"{r.scenario:<{width}}  final {r.final_mean:12.1f}  reduction {r.reduction_vs_none:+.3f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdrcontain", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, scenario=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment YAML file")
        p.add_argument("--seed", type=int, help="base RNG seed (overrides config)")
        p.add_argument("--out", required=True, help="output directory")
        if scenario:
            p.add_argument("--runs", type=int)
            p.add_argument("--horizon", type=int)
            p.add_argument("--workers", type=int)
            p.add_argument("--mode", choices=("deterministic", "stochastic"))
        p.set_defaults(func=func)
        return p

    add("generate", cmd_generate, "write a synthetic CDR dataset")
    add("estimate", cmd_estimate, "estimate weekday/weekend mobility matrices")
    add("indicators", cmd_indicators, "compute per-user mobility indicators")
    add("rank-areas", cmd_rank_areas, "score areas by place rank and centrality")
    sim = add("simulate", cmd_simulate, "run one scenario", scenario=True)
    sim.add_argument("--kind", choices=SCENARIO_KINDS)
    sim.add_argument("--k", type=int)
    sim.add_argument("--fraction", type=float)
    sim.add_argument("--delay", type=int)
    sim.add_argument("--seed-area")
    sim.add_argument("--label")
    sim.add_argument("--timeseries", action="store_true", help="also write per-area series")
    add("compare", cmd_compare, "run every configured scenario and compare", scenario=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
