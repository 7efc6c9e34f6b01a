"""Command-line front end.

    freewayes train           --config C --seed S --generations G --out DIR [--checkpoint CK]
    freewayes evaluate        --config C --checkpoint CK --demands N --seed S --out DIR
    freewayes baseline        --config C --demands N --seed S --out DIR
    freewayes rollout         --config C --checkpoint CK --seed S --out DIR
    freewayes validate-config --config C

Exit status is 0 on success, 1 for invalid input (config, arguments,
checkpoint files) and 2 when a run fails.  The number of worker processes
comes from ``--workers``, else the ``FREEWAYES_WORKERS`` environment
variable, else ``es.jobs`` in the config.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import Config, ConfigError, dump_config, load_config
from .control_loop import network_for, run_episode, write_outflow_csv, write_trace_csv
from .es import CheckpointError, ESTrainer, load_checkpoint, save_checkpoint
from .evaluation import baseline, evaluate

log = logging.getLogger("freewayes")

WORKERS_ENV = "FREEWAYES_WORKERS"
EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="freewayes", description="Multi-agent freeway control trained by evolution strategies.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed_help):
        p.add_argument("--config", type=Path, help="YAML config; defaults apply when omitted")
        p.add_argument("--seed", type=int, help=seed_help)
        p.add_argument("--workers", type=int, help=f"worker processes (overrides ${WORKERS_ENV})")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")

    p = sub.add_parser("train", help="run the evolution strategy")
    common(p, "master seed (es.master_seed)")
    p.add_argument("--generations", type=int, help="train up to this generation count (es.generations)")
    p.add_argument("--checkpoint", type=Path, help="resume from this checkpoint")

    p = sub.add_parser("evaluate", help="paired evaluation of a checkpoint on held-out demands")
    common(p, "first held-out demand seed (eval.seed)")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--demands", type=int, help="number of held-out demands (eval.demands)")

    p = sub.add_parser("baseline", help="no-control episodes on held-out demands")
    common(p, "first held-out demand seed (eval.seed)")
    p.add_argument("--demands", type=int, help="number of held-out demands (eval.demands)")

    p = sub.add_parser("rollout", help="action trace and outflow series of one episode")
    common(p, "demand seed (eval.seed)")
    p.add_argument("--checkpoint", type=Path, required=True)

    p = sub.add_parser("validate-config", help="check a config file and print the resolved version")
    p.add_argument("--config", type=Path, required=True)
    return parser


def resolve_workers(flag: int | None, cfg: Config) -> int:
    """``--workers`` beats ``$FREEWAYES_WORKERS`` beats ``es.jobs``."""
    if flag is not None:
        value = flag
    elif os.environ.get(WORKERS_ENV):
        try:
            value = int(os.environ[WORKERS_ENV])
        except ValueError:
            raise UsageError(f"{WORKERS_ENV} must be an integer") from None
    else:
        value = cfg.es.jobs
    if value < 1:
        raise UsageError("worker count must be at least 1")
    return value


def _config(args) -> Config:
    return load_config(args.config) if args.config else Config()


def _outdir(args) -> Path:
    args.out.mkdir(parents=True, exist_ok=True)
    return args.out


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(es={"master_seed": args.seed})
    if args.generations is not None:
        if args.generations < 0:
            raise UsageError("--generations must be non-negative")
        cfg = cfg.replace(es={"generations": args.generations})
    jobs = resolve_workers(args.workers, cfg)
    out = _outdir(args)
    dump_config(cfg, out / "config.yaml")
    if args.checkpoint:
        trainer = ESTrainer.from_checkpoint(cfg, args.checkpoint, jobs=jobs)
        if load_checkpoint(args.checkpoint).config_hash != cfg.hash():
            log.warning("checkpoint config hash differs from the current config")
    else:
        net = network_for(cfg)
        trainer = ESTrainer(cfg, net.init_genome(cfg.network.init_seed), jobs=jobs)
    ckpt = out / "checkpoint.ckpt"
    remaining = max(0, cfg.es.generations - trainer.generation)
    for rec in trainer.run(remaining, checkpoint=ckpt, log=out / "generations.csv"):
        s = rec.summary()
        log.info("generation %d  F0=%g  max_F=%g  mean_N=%.4f  w=%.4f",
                 s["generation"], s["F_unperturbed"], s["max_F"], s["mean_N"], s["w"])
    if remaining == 0:
        save_checkpoint(ckpt, trainer)
    print(ckpt)
    return EXIT_OK


def _write_report(report, out: Path) -> None:
    report.write_rows(out / "rows.csv")
    report.write_summary(out / "summary.csv")
    s = report.summary()
    keys = [k for k in ("mean_F", "mean_F_N", "mean_TDS", "pooled_TDS", "mean_TDS_N", "pooled_TDS_N",
                        "mean_IL", "pooled_IL", "sign_test_positive", "sign_test_n", "sign_test_p") if k in s]
    for k in keys:
        print(f"{k}\t{s[k]}")


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    dump_config(cfg, out / "config.yaml")
    report = evaluate(args.checkpoint, cfg, args.demands, args.seed, resolve_workers(args.workers, cfg))
    for w in report.warnings:
        log.warning(w)
    _write_report(report, out)
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    dump_config(cfg, out / "config.yaml")
    _write_report(baseline(cfg, args.demands, args.seed, resolve_workers(args.workers, cfg)), out)
    return EXIT_OK


def cmd_rollout(args) -> int:
    cfg = _config(args)
    out = _outdir(args)
    dump_config(cfg, out / "config.yaml")
    ck = load_checkpoint(args.checkpoint)
    if ck.config_hash != cfg.hash():
        log.warning("checkpoint config hash differs from the current config")
    seed = cfg.eval.seed if args.seed is None else args.seed
    result = run_episode(ck.genome, seed, cfg)
    write_trace_csv(result, out / "trace.csv", cfg)
    write_outflow_csv(result, out / "outflow.csv", cfg)
    print(f"F\t{result.F}\nD\t{result.D}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = load_config(args.config)
    sys.stdout.write(f"# config_hash={cfg.hash()}\n")
    yaml.safe_dump(cfg.to_dict(), sys.stdout, sort_keys=False)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "baseline": cmd_baseline,
            "rollout": cmd_rollout, "validate-config": cmd_validate}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"failed: {exc!r}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
