"""``icl`` command line: one subcommand per experiment kind plus render,
verify and import.

Exit codes: 0 success, 1 other failure (I/O, malformed data), 2 bad
configuration or usage, 3 a check failed (construction deviation above
tolerance, or a bundle that no longer matches its manifest).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, IclError
from .experiments import load_config, run_experiment
from .report import read_grid_csv, render_heatmap, verify_bundle
from .traces import import_traces

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CHECK = 0, 1, 2, 3

EXPERIMENT_COMMANDS = {
    "gen": "gen",
    "solve": "convergence",
    "sim": "simgrid",
    "match": "bestmatch",
    "forget": "forgetting",
    "construct": "construct",
    "span": "span",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="icl", description="Linear-regression solver lab and Transformer construction checks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, kind in EXPERIMENT_COMMANDS.items():
        p = sub.add_parser(name, help=f"run a {kind} experiment")
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="base seed (overrides the config)")
        p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p = sub.add_parser("render", help="SVG heatmap from a similarity grid CSV")
    p.add_argument("--input", required=True, help="simgrid CSV")
    p.add_argument("--out", required=True, help="output SVG path or directory")
    p.add_argument("--config", help="unused; accepted for a uniform interface")
    p = sub.add_parser("verify", help="re-hash a bundle against its manifest")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--config", help="unused; accepted for a uniform interface")
    p = sub.add_parser("import", help="compare imported prediction dumps with the configured algorithms")
    p.add_argument("--config", required=True, help="JSON config giving the task batch and algorithms")
    p.add_argument("--traces", required=True, help="CSV dump: model,layer,seq_id,t,prediction")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1)
    return parser


def _main(argv) -> int:
    args = build_parser().parse_args(argv)
    if args.command in EXPERIMENT_COMMANDS:
        cfg = load_config(args.config, kind=EXPERIMENT_COMMANDS[args.command], seed=args.seed, output=args.out)
        bundle = run_experiment(cfg, jobs=args.jobs)
        for name in bundle.files:
            print(Path(bundle.out_dir) / name)
        if not bundle.ok:
            print(f"check failed: {bundle.summary}", file=sys.stderr)
            return EXIT_CHECK
        return EXIT_OK
    if args.command == "render":
        matrix = read_grid_csv(args.input)
        out = Path(args.out)
        target = out / (Path(args.input).stem + ".svg") if out.suffix != ".svg" else out
        render_heatmap(matrix, target)
        print(target)
        return EXIT_OK
    if args.command == "verify":
        problems = verify_bundle(args.out)
        for p in problems:
            print(p, file=sys.stderr)
        if problems:
            return EXIT_CHECK
        print("ok")
        return EXIT_OK
    # import
    cfg = load_config(args.config, kind="bestmatch", seed=args.seed, output=args.out, min_algorithms=1)
    handles = import_traces(args.traces, cfg.tasks())
    bundle = run_experiment(cfg, jobs=args.jobs, handles=handles)
    for name in bundle.files:
        print(Path(bundle.out_dir) / name)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        return _main(sys.argv[1:] if argv is None else argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IclError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
