"""Command line entry point: ``dyadlab run --config FILE``.

Exit codes: 0 when the experiment passes, 2 when it runs but fails its
acceptance check, 1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import sys

from .experiments import EXPERIMENTS, WORKERS_ENV, load_config, run_experiment
from .integrate import IntegrationError
from .tree import ConfigError

EXIT_PASS, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="dyadlab",
        description="Experiments on truncated dyadic tree models.",
        epilog=f"Experiments: {', '.join(EXPERIMENTS)}. "
        f"{WORKERS_ENV} sets the default worker count.",
    )
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment from a JSON config")
    run.add_argument("--config", required=True, help="flat JSON config file")
    run.add_argument("--output-dir", default=None, help="override output_dir from the config")
    run.add_argument("--seed", type=int, default=None, help="override seed from the config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.output_dir)
        result = run_experiment(cfg)
    except ConfigError as exc:
        print(f"dyadlab: configuration error in field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_ERROR
    except OSError as exc:
        print(f"dyadlab: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except IntegrationError as exc:
        where = "" if exc.path_index is None else f" (path {exc.path_index})"
        print(f"dyadlab: integration failed{where}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, RuntimeError) as exc:
        print(f"dyadlab: {exc}", file=sys.stderr)
        return EXIT_ERROR
    status = "PASS" if result.passed else "FAIL"
    print(f"{result.experiment}: {status}")
    for f in result.files:
        print(f"  wrote {f}")
    return EXIT_PASS if result.passed else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
