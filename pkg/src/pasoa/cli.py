"""Command-line interface: ``pasoa run | eval | check``.

Exit codes: 0 on success, 1 on a validation error (bad flags or config),
2 on a runtime error (a failed rollout or a failed self-check).
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .evaluation import EvalConfig, SequentialEvaluator, wasserstein2_blocks, wasserstein2_to_point
from .runner import ConfigError, ExperimentConfig, _dump, read_rollout, run_batch
from .smc import initial_cloud, temper_to_posterior

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

# flag -> flat config key
RUN_OVERRIDES = {
    "model": "model",
    "method": "method",
    "k": "K",
    "n": "N",
    "l": "L",
    "ess_min": "temper.ess_min_fraction",
    "grad_steps": "sg.steps",
    "lr": "sg.learning_rate",
    "seed": "seed",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="pasoa", description="Sequential Bayesian experimental design with tempered SMC.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run rollouts and write JSONL records plus a summary CSV")
    run.add_argument("--config", type=Path, help="flat key/value JSON config")
    run.add_argument("--model", choices=["lingauss", "sources", "ces"])
    run.add_argument("--method", choices=["pasoa", "smc", "random"])
    run.add_argument("--k", type=int)
    run.add_argument("--n", type=int)
    run.add_argument("--l", type=int)
    run.add_argument("--ess-min", type=float)
    run.add_argument("--grad-steps", type=int)
    run.add_argument("--lr", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--rollouts", type=int, default=1)
    run.add_argument("--workers", type=int, default=None, help="worker processes (default: $PASOA_WORKERS or 1)")
    run.add_argument("--out", type=Path, default=Path("runs"))

    ev = sub.add_parser("eval", help="re-evaluate a rollout file with fresh randomness")
    ev.add_argument("--rollout", type=Path, required=True)
    ev.add_argument("--l-eval", type=int, default=None)
    ev.add_argument("--seed", type=int, default=None, help="evaluation seed (default: rollout seed + 1)")
    ev.add_argument("--out", type=Path, default=None, help="output file (default: <rollout>.eval.jsonl)")

    chk = sub.add_parser("check", help="run quick invariant and oracle checks")
    chk.add_argument("--seed", type=int, default=0)
    return p


def _cmd_run(args):
    flat = {}
    if args.config is not None:
        flat.update(ExperimentConfig.load(args.config).to_flat())
    for flag, key in RUN_OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            flat[key] = value
    config = ExperimentConfig.from_flat(flat)
    records, rows = run_batch(config, args.rollouts, args.workers, args.out)
    failed = [r for r in records if r.error]
    for r in failed:
        print(f"rollout {r.rollout_index} failed: {r.error}", file=sys.stderr)
    if rows:
        last = rows[-1]
        print(f"k={last['k']} spce={last['spce_med']:.4f} snmc={last['snmc_med']:.4f} "
              f"w2={last['w2_med']:.4f} temper={last['temper_med']:g}")
    print(f"wrote {len(records)} rollout file(s) and a summary CSV to {args.out}")
    return EXIT_RUNTIME if failed else EXIT_OK


def evaluate_rollout_file(path, l_eval=None, seed=None, out_path=None):
    """Recompute SPCE/SNMC and W2 for every step of a stored rollout.

    SPCE/SNMC use a fresh prior contrastive set; W2 comes from re-running the
    tempered SMC along the stored history.  Writes a JSON-lines file whose
    step lines are the stored ones plus ``*_eval`` columns.
    """
    config, record = read_rollout(path)
    model = config.build_model()
    eval_cfg = config.eval if l_eval is None else EvalConfig(L_eval=l_eval, n_outer=config.eval.n_outer,
                                                             batch_size=config.eval.batch_size)
    seed = config.seed + 1 if seed is None else seed
    rng_eval, rng_smc = [np.random.default_rng(s)
                         for s in np.random.SeedSequence([seed, record.rollout_index, 1]).spawn(2)]
    theta_star = np.asarray(record.theta_star, dtype=float)
    evaluator = SequentialEvaluator(model, theta_star, eval_cfg, rng_eval)
    cloud = initial_cloud(model, rng_smc, config.M)
    out_path = Path(out_path) if out_path else Path(path).with_suffix(".eval.jsonl")
    history = record.history()
    blocks = model.param_blocks()
    with open(path) as fh:
        originals = [json.loads(line) for line in fh if line.strip()]
    steps = iter([d for d in originals if d.get("type") == "step"])
    with open(out_path, "w") as out:
        header = dict(originals[0])
        header["eval"] = {"L_eval": eval_cfg.L_eval, "n_outer": eval_cfg.n_outer, "seed": seed}
        out.write(_dump(header) + "\n")
        for k, (y, xi) in enumerate(history.pairs()):
            cloud, _ = temper_to_posterior(model, cloud, y, xi, history.prefix(k), config.temper, rng_smc)
            b = evaluator.update(y, xi)
            row = dict(next(steps))
            row.update(spce_eval=b.spce, spce_eval_se=b.spce_se, snmc_eval=b.snmc, snmc_eval_se=b.snmc_se,
                       w2_eval=wasserstein2_to_point(cloud, theta_star),
                       w2_blocks_eval=wasserstein2_blocks(cloud, theta_star, blocks))
            out.write(_dump(row) + "\n")
    return out_path


def _cmd_eval(args):
    if not args.rollout.exists():
        raise ConfigError(f"rollout file {args.rollout} does not exist")
    if args.l_eval is not None and args.l_eval < 1:
        raise ConfigError("--l-eval must be ≥ 1")
    out = evaluate_rollout_file(args.rollout, args.l_eval, args.seed, args.out)
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_check(args):
    from .checks import run_checks

    return EXIT_OK if run_checks(args.seed) else EXIT_RUNTIME


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    commands = {"run": _cmd_run, "eval": _cmd_eval, "check": _cmd_check}
    try:
        return commands[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeError, FloatingPointError, ValueError, OSError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
