"""Command-line entry point.

Subcommands: train, eval, table, verify, fig3.  All commands are
deterministic given --seed; GAP_SEED in the environment overrides the config
seed for training.  Exit codes: 2 invalid config/arguments, 3 training
abort, 4 missing or corrupt run state.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import metaloop, runio, tasks, verify
from .errors import ConfigError, StateIOError, TrainingAbort

METHOD_LABELS = {
    "identity": "MAML",
    "meta_sgd": "Meta-SGD",
    "meta_sgd_pd": "Meta-SGD-PD",
    "approx_gap": "ApproxGAP",
    "gap": "GAP",
}
METHOD_ORDER = ["MAML", "Meta-SGD", "Meta-SGD-PD", "ApproxGAP", "GAP"]
SHOT_COLS = [5, 10, 20]

EXIT_CONFIG = 2
EXIT_TRAIN = 3
EXIT_STATE = 4


def _load_config(path: str) -> metaloop.TrainConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError("<file>", f"cannot read {path}: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError("<file>", f"invalid JSON in {path}: {e}") from None
    return metaloop.parse_config(doc)


def cmd_train(args) -> int:
    try:
        cfg = _load_config(args.config)
        overrides = {}
        if args.iterations is not None:
            overrides["iterations"] = args.iterations
        seed_env = os.environ.get("GAP_SEED")
        if args.seed is not None:
            overrides["seed"] = args.seed
        elif seed_env is not None:
            try:
                overrides["seed"] = int(seed_env)
            except ValueError:
                raise ConfigError("seed", f"GAP_SEED={seed_env!r} is not an int") from None
        if overrides:
            import dataclasses

            cfg = dataclasses.replace(cfg, **overrides)
            cfg.validate()
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    source = tasks.training_source(cfg)
    try:
        _, record = metaloop.meta_train(
            cfg, source, out_dir=args.out, progress_every=args.progress_every
        )
    except TrainingAbort as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_TRAIN
    if not args.no_figures:
        from . import figures

        figures.render_loss_curve(record.losses, Path(args.out) / "losses.png")
    print(f"run written to {args.out} ({cfg.iterations} iterations, kind={cfg.kind})")
    return 0


def _eval_run(args, force_identity: bool):
    cfg, state, _ = runio.load_run(args.run)
    if force_identity:
        state = state.with_kind("identity")
    shots = args.shots if args.shots is not None else cfg.shots
    result = tasks.evaluate_protocol(
        state,
        n_tasks=args.n_tasks,
        shots=shots,
        seed=args.seed,
        alpha=cfg.alpha,
        k_steps_test=cfg.k_test,
        query_size=args.query_size if args.query_size else cfg.eval_query_size,
        workers=args.workers if args.workers else cfg.workers,
    )
    return cfg, shots, result


def cmd_eval(args) -> int:
    try:
        cfg, shots, result = _eval_run(args, args.force_identity)
    except StateIOError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STATE
    method = METHOD_LABELS[cfg.kind]
    if args.force_identity:
        method += "(no-precond)"
    if args.format == "markdown":
        print(f"| {method} | {shots} | {result.mean_mse:.4f} | {result.ci95:.4f} |")
    else:
        print(f"{method},{shots},{result.mean_mse!r},{result.ci95!r}")
    out_csv = Path(args.out_csv) if args.out_csv else Path(args.run) / "eval.csv"
    runio.write_eval_csv(out_csv, result.rows)
    if not args.no_figures:
        from . import figures

        figures.render_eval_hist(
            [r[4] for r in result.rows],
            out_csv.with_suffix(".png"),
            title=f"{method} {shots}-shot: {result.mean_mse:.3f} ± {result.ci95:.3f}",
        )
    return 0


def cmd_table(args) -> int:
    cells: dict[tuple[str, int], tuple[float, float]] = {}
    methods_seen = []
    for run in args.runs:
        try:
            cfg, state, _ = runio.load_run(run)
        except StateIOError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_STATE
        result = tasks.evaluate_protocol(
            state,
            n_tasks=args.n_tasks,
            shots=cfg.shots,
            seed=args.seed,
            alpha=cfg.alpha,
            k_steps_test=cfg.k_test,
            query_size=cfg.eval_query_size,
            workers=args.workers,
        )
        method = METHOD_LABELS[cfg.kind]
        cells[(method, cfg.shots)] = (result.mean_mse, result.ci95)
        if method not in methods_seen:
            methods_seen.append(method)

    methods = [m for m in METHOD_ORDER if m in methods_seen]
    lines = _format_table(methods, cells, args.format)
    text = "\n".join(lines)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
        if not args.no_figures:
            from . import figures

            figures.render_table_chart(
                methods, SHOT_COLS, cells, Path(args.out).with_suffix(".png")
            )
    return 0


def _format_table(methods, cells, fmt: str) -> list[str]:
    def cell(m, s):
        c = cells.get((m, s))
        return f"{c[0]:.2f}±{c[1]:.2f}" if c else "N/A"

    if fmt == "markdown":
        lines = ["| method | " + " | ".join(f"{s}-shot" for s in SHOT_COLS) + " |"]
        lines.append("|" + "---|" * (len(SHOT_COLS) + 1))
        for m in methods:
            lines.append(
                f"| {m} | " + " | ".join(cell(m, s) for s in SHOT_COLS) + " |"
            )
    else:
        lines = ["method," + ",".join(f"{s}-shot" for s in SHOT_COLS)]
        for m in methods:
            lines.append(m + "," + ",".join(cell(m, s) for s in SHOT_COLS))
    return lines


def cmd_verify(args) -> int:
    n_grid = tuple(int(x) for x in args.n_grid.split(",")) if args.n_grid else None
    results = verify.run_suite(args.suite, trials=args.trials, seed=args.seed, n_grid=n_grid)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_fig3(args) -> int:
    from . import theory

    rng = np.random.default_rng(np.random.SeedSequence((args.seed, 3)))
    n_grid = tuple(int(x) for x in args.n_grid.split(","))
    rows = theory.cosine_decay_sweep(args.m, n_grid, args.trials, rng)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        fh.write("n,mean_abs_cos,analytic_ref\n")
        for n, stat, ref in rows:
            fh.write(f"{n},{stat!r},{ref!r}\n")
    if not args.no_figures:
        from . import figures

        figures.render_cosine_decay(rows, out.with_suffix(".png"))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="gapmeta",
        description="Train, evaluate and verify preconditioned meta-learning "
        "on the sinusoid few-shot benchmark.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run meta-training from a JSON config")
    t.add_argument("--config", required=True, help="path to config.json")
    t.add_argument("--out", required=True, help="run directory to create")
    t.add_argument("--iterations", type=int, default=None,
                   help="override config iterations")
    t.add_argument("--seed", type=int, default=None,
                   help="override config seed (also via GAP_SEED)")
    t.add_argument("--progress-every", type=int, default=0,
                   help="print loss every N iterations (0 = silent)")
    t.add_argument("--no-figures", action="store_true",
                   help="skip the losses.png rendering")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained run on fresh tasks")
    e.add_argument("--run", required=True, help="run directory with state.bin")
    e.add_argument("--n-tasks", type=int, default=600)
    e.add_argument("--shots", type=int, default=None,
                   help="override the run's shot count")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--query-size", type=int, default=0,
                   help="query points per task (default: config)")
    e.add_argument("--workers", type=int, default=0,
                   help="parallel evaluation workers (default: config)")
    e.add_argument("--format", choices=("csv", "markdown"), default="csv")
    e.add_argument("--out-csv", default=None,
                   help="eval.csv path (default: <run>/eval.csv)")
    e.add_argument("--force-identity", action="store_true",
                   help="ablation: evaluate with the preconditioner disabled")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(fn=cmd_eval)

    tb = sub.add_parser("table", help="render the regression table from runs")
    tb.add_argument("--runs", nargs="+", required=True)
    tb.add_argument("--n-tasks", type=int, default=600)
    tb.add_argument("--seed", type=int, default=0)
    tb.add_argument("--workers", type=int, default=1)
    tb.add_argument("--format", choices=("csv", "markdown"), default="markdown")
    tb.add_argument("--out", default=None, help="write the table to this file")
    tb.add_argument("--no-figures", action="store_true")
    tb.set_defaults(fn=cmd_table)

    v = sub.add_parser("verify", help="run a property-check suite")
    v.add_argument("--suite", choices=verify.SUITES, required=True)
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--n-grid", default=None,
                   help="comma-separated column counts for cosine/approx")
    v.set_defaults(fn=cmd_verify)

    f = sub.add_parser("fig3", help="emit the row-cosine decay curve data")
    f.add_argument("--m", type=int, default=8)
    f.add_argument("--n-grid", default="16,64,256,1024,4096")
    f.add_argument("--trials", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True, help="output CSV path")
    f.add_argument("--no-figures", action="store_true")
    f.set_defaults(fn=cmd_fig3)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
