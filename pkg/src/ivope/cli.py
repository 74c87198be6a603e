"""Command-line entry point.

    ivope run <spec-file> [--workers N] [--out DIR] [--seed S]
    ivope oracle <env> <pi> --gamma G [--method M] [--episodes N] [--horizon T] [--seed S]
    ivope selftest

Exit codes: 0 success, 1 usage or spec error, 2 numerical failure
(including any failed replication cell).
"""

from __future__ import annotations

import argparse
import sys

from .errors import NumericalError, SpecError

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ivope", description="Instrumental-variable off-policy evaluation for confounded MDPs.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    run = sub.add_parser("run", help="run an experiment spec and write CSV tables")
    run.add_argument("spec")
    run.add_argument("--workers", type=int, default=None)
    run.add_argument("--out", default="results")
    run.add_argument("--seed", type=int, default=None)
    orc = sub.add_parser("oracle", help="print the true policy value")
    orc.add_argument("env")
    orc.add_argument("pi", help="tabular:p0,p1 | logistic:b0,b1,... | default")
    orc.add_argument("--gamma", type=float, required=True)
    orc.add_argument("--method", default="auto")
    orc.add_argument("--episodes", type=int, default=200_000)
    orc.add_argument("--horizon", type=int, default=200)
    orc.add_argument("--seed", type=int, default=0)
    sub.add_parser("selftest", help="run the invariant checks")
    return p


def _num(v) -> str:
    return "nan" if v is None else f"{v:.4f}"


def _run(args) -> int:
    from .experiment import parse_spec, run_experiment

    spec = parse_spec(args.spec)
    result = run_experiment(spec, args.out, workers=args.workers, seed=args.seed)
    print(f"oracle eta = {result.oracle.eta!r} ({result.oracle.method}, bound {result.oracle.error_bound!r})")
    for row in result.summary:
        bias, cov = (_num(row[k]) for k in ("rel_abs_bias", "coverage"))
        print(
            f"{row['estimator']:>9} {row['scenario']} n={row['n']:<5} ok={row['successes']}/{row['replications']}"
            f" rel_bias={bias} coverage={cov}"
        )
    for key, path in result.paths.items():
        print(f"{key}: {path}")
    if result.failed:
        print("some replication cells failed; see first_error in the summary", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _oracle(args) -> int:
    from .experiment import ExperimentSpec, compute_oracle

    spec = ExperimentSpec(
        env=args.env, n_grid=(1,), gamma=args.gamma, seed=args.seed,
        policy="env-default" if args.pi == "default" else args.pi,
        oracle_method=args.method, oracle_episodes=args.episodes, oracle_horizon=args.horizon,
    )
    env = spec.environment()
    pi = spec.target(env)
    value = compute_oracle(spec, env, pi)
    print(f"env={args.env} pi={pi.describe()} gamma={args.gamma!r}")
    print(f"eta={value.eta!r} method={value.method} error_bound={value.error_bound!r}")
    return EXIT_OK


def _selftest(args) -> int:
    from .selftest import run_selftest

    return EXIT_OK if run_selftest() else EXIT_NUMERICAL


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return {"run": _run, "oracle": _oracle, "selftest": _selftest}[args.command](args)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (SpecError, ValueError, TypeError) as exc:
        print(f"ivope: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"ivope: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
