"""``relagg`` command line: ``run`` one experiment or a whole ``suite``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import ConfigError, DataError, RelaggError, TrainingError
from .harness import METHODS, emit_report, load_config, run_experiment, run_suite

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAINING = 0, 1, 2, 3

# CLI flag -> method parameter
_PARAM_FLAGS = {
    "pseudo_count": float,
    "k": int,
    "n_samples": int,
    "k_train": int,
    "k_test": int,
    "l2": float,
    "latent_dim": int,
    "init": str,
    "mf_l2": float,
    "lr_l2": float,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DataError):
        return EXIT_DATA
    return EXIT_TRAINING


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relagg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config file")
    run.add_argument("--config", required=True)
    run.add_argument("--method", choices=sorted(METHODS),
                     help="experiment to run (default: the config's first experiment)")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="write the report here instead of stdout")
    run.add_argument("--format", choices=["json", "table"], default="json")
    run.add_argument("--paper-stopping", action="store_true",
                     help="stop training on the TEST loss (replication only; leaks test labels)")
    for name, typ in _PARAM_FLAGS.items():
        run.add_argument("--" + name.replace("_", "-"), dest=name, type=typ,
                         help="fix this method parameter (drops it from the CV grid)")

    suite = sub.add_parser("suite", help="run every experiment in a config file")
    suite.add_argument("--config", required=True)
    suite.add_argument("--seed", type=int)
    suite.add_argument("--out")
    suite.add_argument("--format", choices=["json", "table"], default="table")
    suite.add_argument("--paper-stopping", action="store_true")
    return parser


def _select(configs, method):
    if method is None:
        return configs[0]
    for cfg in configs:
        if cfg.method == method:
            return cfg
    # not in the file: run it with default parameters on the same dataset
    from dataclasses import replace
    return replace(configs[0], method=method, params={}, grid={}, name=None)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        configs = load_config(args.config, seed=args.seed,
                              paper_stopping=True if args.paper_stopping else None)
        if not configs:
            raise ConfigError("config has no experiments")
        if args.command == "run":
            cfg = _select(configs, args.method)
            for name in _PARAM_FLAGS:
                value = getattr(args, name)
                if value is not None:
                    cfg.params[name] = value
                    cfg.grid.pop(name, None)
            report = run_experiment(cfg)
            text = emit_report(report, args.out, args.format)
            if args.out is None:
                sys.stdout.write(text)
            return EXIT_OK

        result = run_suite(configs)
        text = emit_report(result.reports, args.out, args.format)
        if args.out is None:
            sys.stdout.write(text)
        for err in result.errors:
            print(f"error: {json.dumps(err)}", file=sys.stderr)
        if result.errors:
            return _exit_code(_error_type(result.errors[0]["type"]))
        return EXIT_OK
    except RelaggError as exc:
        print(f"relagg: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"relagg: {exc}", file=sys.stderr)
        return EXIT_DATA


def _error_type(name: str) -> BaseException:
    return {"ConfigError": ConfigError, "DataError": DataError}.get(name, TrainingError)("")


if __name__ == "__main__":
    sys.exit(main())
