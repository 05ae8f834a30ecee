"""Command-line interface.

Exit codes: 0 success, 1 usage/config error, 2 runtime abort (non-finite
loss, environment failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .training import NonFiniteLossError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # exit 1 on usage problems, not argparse's 2
        raise _UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="commformer", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a policy from a config file")
    p_train.add_argument("--config", required=True, help="flat key=value config file")
    p_train.add_argument("--out", default="run_out", help="output directory")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--episodes", type=int, required=True)
    p_eval.add_argument("--seed", type=int, required=True)
    p_eval.add_argument(
        "--policy", choices=["greedy", "random"], default="greedy",
        help="greedy uses the checkpoint; random is a uniform-action baseline",
    )

    p_ablate = sub.add_parser("ablate", help="run a sparsity / fixed-graph sweep")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--sweep", required=True)
    p_ablate.add_argument("--out", default="ablation_out")

    p_export = sub.add_parser("export", help="emit plot-ready CSVs and figures for a run")
    p_export.add_argument("--run", required=True)
    p_export.add_argument("--out", default=None)
    return parser


def _cmd_train(args) -> int:
    from .harness import run_train

    cfg = load_config(args.config)
    run_train(cfg, args.out)
    print(f"training complete; artifacts in {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .harness import run_eval

    report = run_eval(args.ckpt, args.episodes, args.seed, policy=args.policy)
    print(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .harness import parse_sweep, run_ablate

    cfg = load_config(args.config)
    sweep_path = Path(args.sweep)
    try:
        sweep_text = sweep_path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read sweep {sweep_path}: {exc}") from None
    sweep = parse_sweep(sweep_text, source=str(sweep_path))
    run_ablate(cfg, sweep, args.out)
    print(f"ablation complete; table in {Path(args.out) / 'ablation.csv'}")
    return EXIT_OK


def _cmd_export(args) -> int:
    from .harness import run_export

    out = run_export(args.run, args.out)
    print(f"export complete; files in {out}")
    return EXIT_OK


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "export": _cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (RuntimeError, OSError, ValueError) as exc:
        print(f"runtime abort: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
