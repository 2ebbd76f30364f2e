"""Command-line interface.

Verbs: ``run`` (experiment over methods x seeds), ``oracle`` (sign
agreement against the exact influence oracle, plus the leave-one-out
study), ``gradcheck`` (finite-difference suites), ``report``
(re-aggregate artifacts and render figures).

Exit codes: 0 success, 2 configuration error, 3 numeric error,
4 oracle failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness, reporting
from .config import apply_overrides, parse_config
from .errors import OracleError, SpclError


def _seed_list(raw: str) -> list[int]:
    try:
        return [int(part) for part in raw.replace(";", ",").split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {raw!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spcl")
    sub = parser.add_subparsers(dest="verb", required=True)

    run = sub.add_parser("run", help="run an experiment from a JSON config")
    run.add_argument("--config", required=True, help="path to the JSON experiment config")
    run.add_argument("--method", choices=("finetune", "joint", "er", "metasp", "metasp_rehsel"))
    run.add_argument("--setting", choices=("task_incremental", "class_incremental"))
    run.add_argument("--buffer-size", dest="buffer_size", type=int)
    run.add_argument("--epochs", type=int)
    run.add_argument("--metasp-epochs", dest="metasp_epochs", type=int)
    run.add_argument("--pseudo-iters", dest="pseudo_iters", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--seeds", type=_seed_list)
    run.add_argument("--out", help="output directory (overrides config out_dir)")

    oracle = sub.add_parser("oracle", help="sign-agreement and leave-one-out oracle suites")
    oracle.add_argument("--out", required=True)
    oracle.add_argument("--suite", choices=("sign", "loo", "both"), default="both")
    oracle.add_argument("--seed", type=int, default=1231)
    oracle.add_argument("--train-size", type=int, default=1000)
    oracle.add_argument("--val-size", type=int, default=500)
    oracle.add_argument("--hidden", type=int, default=4)
    oracle.add_argument("--min-agreement", type=float, default=0.90)
    oracle.add_argument("--min-spearman", type=float, default=0.90)

    gradcheck = sub.add_parser("gradcheck", help="finite-difference derivative suites")
    gradcheck.add_argument("--pairs", type=int, default=100)
    gradcheck.add_argument("--influence-instances", type=int, default=20)
    gradcheck.add_argument("--seed", type=int, default=0)

    report = sub.add_parser("report", help="re-aggregate artifacts and render figures")
    report.add_argument("--out", required=True, help="experiment directory to re-aggregate")
    report.add_argument("--no-figures", action="store_true")
    return parser


def cmd_run(args) -> int:
    spec = parse_config(args.config)
    spec = apply_overrides(spec, args)
    results = harness.run_experiment(spec)
    for method, per_seed in results.items():
        agg = reporting.aggregate_metrics(per_seed)
        print(
            f"{method}: A1={agg['a1_mean']:.2f} Ainf={agg['a_inf_mean']:.2f} "
            f"Am={agg['a_m_mean']:.2f} BWT={agg['bwt_mean']:.2f}"
        )
    print(f"artifacts written to {spec.out_dir}")
    return 0


def cmd_oracle(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failed = False
    if args.suite in ("sign", "both"):
        res = harness.run_sign_agreement_suite(
            n_train=args.train_size,
            n_val=args.val_size,
            hidden=args.hidden,
            seed=args.seed,
        )
        reporting.write_oracle_report_csv(out / "oracle_report.csv", res.rows)
        a = res.agreement
        print(
            f"sign agreement: {a.true_positive + a.true_negative}/{a.counted} "
            f"(rate {res.rate:.4f}, excluded {a.excluded}, damping {res.damping_used:g})"
        )
        if res.rate < args.min_agreement:
            print(f"FAIL: agreement below {args.min_agreement}")
            failed = True
    if args.suite in ("loo", "both"):
        res = harness.run_loo_suite(seed=args.seed)
        reporting.write_oracle_report_csv(out / "loo_report.csv", res.rows)
        print(
            f"leave-one-out: spearman {res.spearman:.4f}, "
            f"sign rate {res.agreement.agreement_rate:.4f}"
        )
        if res.spearman < args.min_spearman or res.agreement.agreement_rate < args.min_agreement:
            print("FAIL: leave-one-out correlation below bound")
            failed = True
    if failed:
        raise OracleError("oracle suite below its acceptance bound")
    return 0


def cmd_gradcheck(args) -> int:
    checks = [
        harness.gradient_fd_check(pairs=args.pairs, seed=args.seed),
        harness.hessian_fd_check(seed=args.seed),
        harness.influence_fd_check(instances=args.influence_instances, seed=args.seed),
    ]
    all_ok = True
    for check in checks:
        status = "ok" if check.passed else "FAIL"
        print(f"{check.name}: max_err={check.max_err:.3e} tol={check.tolerance:.0e} [{status}]")
        all_ok = all_ok and check.passed
    if not all_ok:
        from .errors import NumericError

        raise NumericError("finite-difference check failed")
    return 0


def cmd_report(args) -> int:
    harness.regenerate_report(args.out, figures=not args.no_figures)
    print(f"report regenerated in {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "run": cmd_run,
        "oracle": cmd_oracle,
        "gradcheck": cmd_gradcheck,
        "report": cmd_report,
    }
    try:
        return handlers[args.verb](args)
    except SpclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
