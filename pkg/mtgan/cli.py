"""
mtgan command line.

    mtgan train          --config cfg.json --out runs/a [--seed N] [--verbose]
    mtgan eval           --config cfg.json --out runs/a
    mtgan transfer       --config cfg.json --out runs/b
    mtgan gradcheck
    mtgan export-metrics --out runs/a

Exit codes: 0 success, 1 run-level failure, 2 usage or configuration failure.
Every artifact is written under --out.
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from typing import List, NamedTuple, Optional

import numpy as np

from mtgan import __version__, checkpoint, gradcheck, trainer
from mtgan.environments import FamilySpec
from mtgan.errors import CheckpointError, ConfigError, DivergenceError, InputError, NumericError, SolverError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(asctime)s %(name)s %(levelname)s %(message)s"

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.npz"
EVAL_FILE = "eval.csv"
TRANSFER_FILE = "transfer.csv"
SUMMARY_FILE = "summary.csv"

DEFAULT_TRANSFER_SEEDS = 5


class ParsedConfig(NamedTuple):
    trainer: trainer.TrainerConfig
    family: FamilySpec
    checkpoint: Optional[str]
    transfer_seeds: int


def parse_config(path) -> ParsedConfig:
    """
    Reads one JSON document whose keys mirror TrainerConfig, plus an
    `environments` section (kind, n_tasks, seed) and the optional `checkpoint`
    and `transfer_seeds` keys. Missing keys take their defaults; unknown keys
    are rejected.
    """
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}:{err.lineno}:{err.colno}: {err.msg}", line=err.lineno) from err
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")
    family = FamilySpec.from_dict(data.pop("environments", {}))
    ckpt = data.pop("checkpoint", None)
    seeds = data.pop("transfer_seeds", DEFAULT_TRANSFER_SEEDS)
    if not isinstance(seeds, int) or seeds < 1:
        raise ConfigError("transfer_seeds must be an integer >= 1", field="transfer_seeds")
    return ParsedConfig(trainer.TrainerConfig.from_dict(data), family, ckpt, seeds)


def config_to_dict(parsed: ParsedConfig) -> dict:
    out = parsed.trainer.to_dict()
    out["environments"] = parsed.family.to_dict()
    if parsed.checkpoint is not None:
        out["checkpoint"] = parsed.checkpoint
    out["transfer_seeds"] = parsed.transfer_seeds
    return out


def _load_invocation(args) -> ParsedConfig:
    parsed = parse_config(args.config)
    if args.seed is not None:
        parsed = parsed._replace(trainer=replace(parsed.trainer, seed=args.seed))
    return parsed


def _prepare_out(out: str):
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as err:
        raise ConfigError(f"cannot create output directory {out}: {err}") from err
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")


def _checkpoint_path(parsed: ParsedConfig, out: str) -> str:
    return parsed.checkpoint or os.path.join(out, CHECKPOINT_FILE)


def cmd_train(args) -> int:
    parsed = _load_invocation(args)
    _prepare_out(args.out)
    cfg = parsed.trainer
    tasks = parsed.family.build()
    log.info("training %d %s tasks with seed %d", len(tasks), parsed.family.kind, cfg.seed)
    t = trainer.Trainer(cfg)
    metrics = t.run(tasks)
    metrics.to_csv(os.path.join(args.out, METRICS_FILE), comment=f"seed={cfg.seed}")
    checkpoint.save_run(os.path.join(args.out, CHECKPOINT_FILE), t)
    if metrics.balance_violations:
        log.error("%d unbalanced discriminator batches", metrics.balance_violations)
        return EXIT_FAILED
    if len(metrics.aborted) == len(tasks):
        log.error("every task aborted")
        return EXIT_FAILED
    if metrics.aborted:
        log.warning("aborted tasks: %s", metrics.aborted)
    return EXIT_OK


def cmd_eval(args) -> int:
    parsed = _load_invocation(args)
    _prepare_out(args.out)
    cfg = parsed.trainer
    state = checkpoint.load_run(_checkpoint_path(parsed, args.out))
    if not state.generators:
        raise CheckpointError("checkpoint holds no trained generator")
    rows = []
    for tid in sorted(state.generators):
        spec = state.specs[tid]

        def rng():
            return np.random.default_rng([cfg.seed, tid])

        ret, disc_ret = trainer.evaluate(state.generators[tid], spec, cfg.eval_episodes, cfg.eval_horizon,
                                         cfg.gamma, rng(), cfg.workers)
        expert, _ = trainer.evaluate_expert(spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, rng(), cfg.workers)
        uniform = trainer.baseline_uniform(spec, cfg.eval_episodes, cfg.eval_horizon, cfg.gamma, rng(), cfg.workers)
        err = trainer.error_rate(ret, expert)
        rows.append([tid, ret, disc_ret, expert, uniform, err, 1.0 - err])
    with open(os.path.join(args.out, EVAL_FILE), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "avg_return", "avg_discounted_return", "expert_return", "uniform_return",
                         "error_rate", "accuracy_rate"])
        for row in rows:
            writer.writerow([row[0]] + [f"{v:.9g}" for v in row[1:]])
    return EXIT_OK


def cmd_transfer(args) -> int:
    parsed = _load_invocation(args)
    _prepare_out(args.out)
    cfg = parsed.trainer
    state = checkpoint.load_run(_checkpoint_path(parsed, args.out))
    if state.memory.basis is None or state.memory.basis.empty:
        raise CheckpointError("checkpoint holds no trained basis")
    targets = parsed.family.build()
    seeds = [cfg.seed + k for k in range(parsed.transfer_seeds)]
    rows = trainer.jumpstart_comparison(cfg, state.memory, targets, seeds)
    trainer.write_jumpstart_csv(os.path.join(args.out, TRANSFER_FILE), rows)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite()
    for name, err in results.items():
        verdict = "ok" if err < gradcheck.TOLERANCE else "FAIL"
        print(f"{name:<26} {err:.3e} {verdict}")
    return EXIT_OK if gradcheck.passed(results) else EXIT_FAILED


def cmd_export_metrics(args) -> int:
    path = os.path.join(args.out, METRICS_FILE)
    try:
        records = trainer.RunMetrics.read_csv(path)
    except (OSError, InputError) as err:
        raise ConfigError(f"cannot read metrics: {err}") from err
    tasks = sorted({r.task_id for r in records})
    with open(os.path.join(args.out, SUMMARY_FILE), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["task_id", "final_return", "error_rate", "accuracy_rate", "final_disc_acc", "aborted"])
        for tid in tasks:
            rows = [r for r in records if r.task_id == tid]
            last = rows[-1]
            aborted = int(last.phase == trainer.ABORTED)
            writer.writerow([tid, f"{last.avg_return:.9g}", f"{last.error_rate:.9g}",
                             f"{1.0 - last.error_rate:.9g}", f"{last.disc_acc:.9g}", aborted])
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
    "export-metrics": cmd_export_metrics,
}

NEEDS_CONFIG = ("train", "eval", "transfer")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", default=".", help="output directory for every artifact")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--verbose", action="store_true", help="log at DEBUG level")

    parser = argparse.ArgumentParser(prog="mtgan", description="multi-task adversarial sequence policies")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_OK if err.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT, force=True)
    if args.seed is not None and args.seed < 0:
        log.error("--seed must be >= 0")
        return EXIT_USAGE
    if args.command in NEEDS_CONFIG and not args.config:
        log.error("%s needs --config", args.command)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError) as err:
        where = f" (field {err.field})" if getattr(err, "field", None) else ""
        log.error("%s%s", err, where)
        return EXIT_USAGE
    except OSError as err:
        log.error("cannot write outputs: %s", err)
        return EXIT_USAGE
    except (DivergenceError, NumericError, SolverError, InputError) as err:
        log.error("run failed: %s", err)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
