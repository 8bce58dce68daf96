"""Command-line entry point: ``ddql train|compare|oracle|validate``.

Relative output paths resolve against ``$DDQL_OUTPUT_ROOT`` (default: the
current directory).
"""

import argparse
import sys
from pathlib import Path

from . import config as config_mod
from .compare import METRIC_ALIASES, GridMismatchError, compare, format_table
from .oracle import format_tables, oracle_tables, write_tables_csv
from .runner import run_experiment

EXIT_OK, EXIT_ABORTED, EXIT_USAGE = 0, 1, 2


def _key_value(text):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _baseline(text):
    env, value = _key_value(text)
    try:
        lo, hi = (float(v) for v in value.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ENV=RANDOM,HUMAN, got {text!r}") from None
    return env, (lo, hi)


def _param_value(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def build_parser():
    p = argparse.ArgumentParser(prog="ddql", description=__doc__.splitlines()[0])
    p.add_argument("--output-root", help=f"overrides ${config_mod.OUTPUT_ROOT_VAR}")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run every seed of an experiment config")
    t.add_argument("config")
    t.add_argument("--seed-offset", type=int, default=0, help="add this to every configured seed")
    t.add_argument("--concurrency", type=int, help="override experiment.concurrency")

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.add_argument("--seed-offset", type=int, default=0)
    v.add_argument("--print", action="store_true", help="print the fully resolved config")

    c = sub.add_parser("compare", help="tables and charts across finished experiments")
    c.add_argument("ids", nargs="+", help="experiment ids; 'label=id1+id2' merges experiments")
    c.add_argument("--metric", default="overestimation", choices=sorted(METRIC_ALIASES))
    c.add_argument("--stat", default="mean", choices=("mean", "median", "iqm"))
    c.add_argument("--runs-dir", help="directory holding experiment folders (default <root>/runs)")
    c.add_argument("--out", help="output directory for the table and charts")
    c.add_argument("--baseline", type=_baseline, action="append", default=[],
                   metavar="ENV=RANDOM,HUMAN", help="score baselines for normalization")
    c.add_argument("--no-charts", action="store_true")
    c.add_argument("--resamples", type=int, default=2000)

    o = sub.add_parser("oracle", help="print exact q* and uniform-policy q tables")
    o.add_argument("env")
    o.add_argument("--gamma", type=float, default=0.99)
    o.add_argument("--sticky-prob", type=float, default=0.0)
    o.add_argument("--param", type=_key_value, action="append", default=[], metavar="KEY=VALUE",
                   help="environment constructor argument")
    o.add_argument("--csv", help="CSV output path (default <root>/oracle_<env>.csv)")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    root = config_mod.output_root(args.output_root)
    try:
        if args.command in ("train", "validate"):
            cfg = config_mod.load(args.config)
            if args.seed_offset:
                cfg = cfg.with_seed_offset(args.seed_offset)
            if args.command == "validate":
                print(f"{args.config}: ok ({cfg.agent.algorithm}/{cfg.agent.bootstrap_variant} on "
                      f"{cfg.env_name}, seeds {list(cfg.seeds)}, {cfg.n_phases} evaluation phases)")
                if args.print:
                    print(cfg.to_text(), end="")
                return EXIT_OK
            result = run_experiment(cfg, root=root, concurrency=args.concurrency)
            for r in result.runs:
                status = f"ABORTED: {r.message}" if r.aborted else "ok"
                print(f"{r.run_id}: {r.n_rows} phases -> {r.csv_path} [{status}]")
            return EXIT_OK if result.ok else EXIT_ABORTED
        if args.command == "compare":
            runs_dir = Path(args.runs_dir) if args.runs_dir else root / "runs"
            res = compare(args.ids, args.metric, args.stat, runs_dir, args.out,
                          dict(args.baseline) or None, charts=not args.no_charts,
                          n_resamples=args.resamples)
            print(format_table(res.rows))
            print(f"table: {res.table_path}")
            for path in res.chart_paths:
                print(f"chart: {path}")
            return EXIT_OK
        if args.command == "oracle":
            params = {k: _param_value(v) for k, v in args.param}
            tables = oracle_tables(args.env, args.gamma, args.sticky_prob, **params)
            print(format_tables(tables), end="")
            path = Path(args.csv) if args.csv else root / f"oracle_{args.env}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            print(f"csv: {write_tables_csv(tables, path)}")
            return EXIT_OK
    except (config_mod.ConfigError, GridMismatchError, FileNotFoundError, ValueError, TypeError) as exc:
        print(f"ddql {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
