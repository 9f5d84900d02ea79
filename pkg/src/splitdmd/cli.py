"""Command-line entry point: ``splitdmd {simulate,split,fit,grid,report}``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import __version__
from .bench import (
    aggregate,
    dump_manifest,
    load_manifest,
    benchmark_manifest,
    run_experiment,
    run_grid,
    specs_from_manifest,
)
from .errors import ConfigError, SplitDmdError
from .ks import KsConfig, SnapshotMatrix, simulate_ks
from .nsplit import NsplitConfig, robust_split


def _load_snapshots(path):
    path = Path(path)
    if path.suffix == ".csv":
        return SnapshotMatrix.from_csv(path)
    return SnapshotMatrix.load(path)


def cmd_simulate(args):
    params = {}
    if args.config:
        params.update(yaml.safe_load(Path(args.config).read_text()) or {})
    overrides = {
        "length_L": args.length,
        "num_nodes": args.nodes,
        "final_time_T": args.final_time,
        "dt_out": args.dt_out,
        "dt_int": args.dt_int,
        "perturb_amplitude": args.beta,
        "imperfection": args.imperfection,
        "rng_seed": args.seed,
    }
    params.update({k: v for k, v in overrides.items() if v is not None})
    if "length_L" not in params:
        raise SplitDmdError("a domain length is required (--length or length_L in --config)")
    Z = simulate_ks(KsConfig.from_dict(params))
    out = Path(args.output)
    if out.suffix == ".csv":
        Z.to_csv(out)
    else:
        Z.save(out)
    print(f"wrote {Z.shape[0]}x{Z.shape[1]} snapshots to {out}")
    return 0


def cmd_split(args):
    Z = _load_snapshots(args.snapshots)
    cfg = NsplitConfig(
        eps_fraction=args.eps,
        delta_fraction=args.delta,
        max_iterations_M=args.max_iterations,
        initial_num_splits=args.initial_splits,
        num_x_tests=args.num_x_tests,
        rng_seed=args.seed if args.seed is not None else 0,
        consensus_threshold=args.threshold,
        merge_tolerance=args.merge_tolerance,
        localize=not args.no_localize,
    )
    log = open(args.log, "w") if args.log else None
    try:
        splits = robust_split(Z, cfg, log=log)
    finally:
        if log:
            log.close()
    text = json.dumps(splits.to_list())
    if args.output:
        Path(args.output).write_text(text + "\n")
    print(text)
    return 0


def _print_row(row):
    print(
        f"{row.scenario_id}: n_split={row.n_split} L={row.length_L:g} r={row.rank} "
        f"final_residual={row.final_residual_2norm:.6g} rel_frobenius={row.rel_frobenius:.6g} "
        f"time={row.wall_time_seconds:.4g}s {row.stopping_reason} {row.status} {row.message}".rstrip()
    )


def cmd_fit(args):
    specs, _ = load_manifest(args.config, output_dir=args.output_dir, seed=args.seed)
    if args.id:
        specs = [s for s in specs if s.scenario_id == args.id]
        if not specs:
            raise SplitDmdError(f"no experiment with id {args.id!r} in {args.config}")
    elif len(specs) > 1:
        raise SplitDmdError(f"{args.config} holds {len(specs)} experiments; pick one with --id")
    row = run_experiment(specs[0], cache_dir=args.cache_dir, repeats=args.repeats)
    _print_row(row)
    return 0


def cmd_grid(args):
    if args.preset:
        doc = benchmark_manifest(final_time_T=args.final_time, dt_out=args.dt_out)
        if args.dump_manifest:
            dump_manifest(doc, args.dump_manifest)
        specs, seed = specs_from_manifest(doc, output_dir=args.output_dir, seed=args.seed)
    elif args.manifest:
        specs, seed = load_manifest(args.manifest, output_dir=args.output_dir, seed=args.seed)
    else:
        raise SplitDmdError("give a manifest file or --preset benchmark")
    csv_path = Path(args.csv or Path(args.output_dir) / "results.csv")
    rows, code = run_grid(
        specs,
        csv_path,
        seed=seed,
        workers=args.workers,
        cache_dir=args.cache_dir,
        repeats=args.repeats,
        log=_print_row,
    )
    print(f"wrote {len(rows)} rows to {csv_path}")
    return code


def cmd_report(args):
    rows = aggregate(args.csv, args.output)
    for row in rows:
        _print_row(row)
    return int(any(r.status != "ok" for r in rows))


def build_parser():
    p = argparse.ArgumentParser(prog="splitdmd", description="Split DMD experiments on Kuramoto-Sivashinsky data.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a snapshot file")
    s.add_argument("--config", help="YAML mapping of KsConfig fields")
    s.add_argument("--length", "-L", type=float)
    s.add_argument("--nodes", type=int)
    s.add_argument("--final-time", type=float)
    s.add_argument("--dt-out", type=float)
    s.add_argument("--dt-int", type=float)
    s.add_argument("--beta", type=float, help="upper bound of the uniform initial perturbation")
    s.add_argument("--imperfection", type=float, help="std of the symmetry-breaking initial noise")
    s.add_argument("--seed", type=int)
    s.add_argument("--output", "-o", required=True, help=".npz or .csv")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("split", help="n-split consensus lines for a snapshot file")
    s.add_argument("snapshots", help=".npz or .csv snapshot file")
    s.add_argument("--eps", type=float, default=0.1)
    s.add_argument("--delta", type=float, default=0.1)
    s.add_argument("--max-iterations", type=int, default=200)
    s.add_argument("--initial-splits", type=int, default=4)
    s.add_argument("--num-x-tests", type=int, default=5)
    s.add_argument("--threshold", type=float, default=0.6)
    s.add_argument("--merge-tolerance", type=float)
    s.add_argument("--no-localize", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="write every test evaluation as JSON lines")
    s.add_argument("--output", "-o", help="write the split list as JSON")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("fit", help="run one experiment from a manifest file")
    s.add_argument("config")
    s.add_argument("--id", help="experiment id when the file holds several")
    s.add_argument("--output-dir", default="results")
    s.add_argument("--cache-dir", default="results/cache")
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("grid", help="run a manifest of experiments into one CSV")
    s.add_argument("manifest", nargs="?")
    s.add_argument("--preset", choices=["benchmark"], help="built-in benchmark grid")
    s.add_argument("--final-time", type=float, default=400.0, help="horizon for the preset grid")
    s.add_argument("--dt-out", type=float, default=0.2, help="snapshot interval for the preset grid")
    s.add_argument("--dump-manifest", help="also write the preset manifest as YAML")
    s.add_argument("--output-dir", default="results")
    s.add_argument("--csv")
    s.add_argument("--cache-dir", default="results/cache")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--repeats", type=int, default=3)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_grid)

    s = sub.add_parser("report", help="merge and print result CSVs")
    s.add_argument("csv", nargs="+")
    s.add_argument("--output", "-o")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SplitDmdError, OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, ConfigError) else 1


if __name__ == "__main__":
    sys.exit(main())
