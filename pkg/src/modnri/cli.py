"""Command-line interface.

    modnri generate      --config C   task-set files for meta-training and meta-test
    modnri meta-train    --config C   checkpoint + training log
    modnri meta-test     --config C   per-task metrics CSV + JSON summary
    modnri infer-latent  --config C   latent-node reports
    modnri report        --config C   aggregate table over the per-task metrics

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

from . import metrics
from .anneal import LOG_COLUMNS, meta_train
from .checkpoint import CheckpointMismatch, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .fileio import ParseError, VersionError, atomic_write
from .latent import config_dict
from .nn import ContractError
from .pipeline import latent_candidates, run_latent, run_meta_test
from .sim import generate_task_set, load_task_set, save_task_set

log = logging.getLogger("modnri")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

TRAIN_TASKS = "train_tasks.json"
TEST_TASKS = "test_tasks.json"
CHECKPOINT = "checkpoint.json"
TRAIN_LOG = "train_log.csv"
METRICS_CSV = "metrics.csv"
METRICS_JSON = "metrics.json"
LATENT_CSV = "latent.csv"
REPORT_CSV = "report.csv"


def _require_file(path: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"required file not found: {path}")
    return path


def cmd_generate(cfg: ExperimentConfig, args) -> None:
    sim = cfg.sim_config()
    for name, n, seed in ((TRAIN_TASKS, cfg.n_train_tasks, cfg.seed), (TEST_TASKS, cfg.n_test_tasks, cfg.seed + 1)):
        ts = generate_task_set(cfg.kind, n, cfg.n_particles, cfg.T, seed, sim, cfg.train_horizon, cfg.test_horizon)
        save_task_set(ts, cfg.path(name))
        log.info("wrote %s (%d tasks)", cfg.path(name), n)
    atomic_write(cfg.path("config.json"), json.dumps(cfg.echo(), indent=1, sort_keys=True) + "\n")


def cmd_meta_train(cfg: ExperimentConfig, args) -> None:
    ts = load_task_set(_require_file(cfg.path(TRAIN_TASKS)))
    if ts.kind != cfg.kind:
        raise CheckpointMismatch(f"{cfg.path(TRAIN_TASKS)} holds {ts.kind!r} tasks, config says {cfg.kind!r}")
    log_path = cfg.path(TRAIN_LOG)
    if os.path.exists(log_path):
        os.remove(log_path)
    progress = (lambda r: log.info("epoch %d train %.4g test %.4g acc %.2f", r["epoch"], r["mean_train_loss"],
                                   r["mean_test_loss"], r["acceptance_rate"]))
    res = meta_train(ts, cfg.meta_train_config(), log_path=log_path, progress=progress)
    if cfg.train.epochs == 0:
        atomic_write(log_path, ",".join(LOG_COLUMNS) + "\n")
    save_checkpoint(cfg.path(CHECKPOINT), cfg.kind, res.library, res.proposal, cfg.echo())
    log.info("wrote %s", cfg.path(CHECKPOINT))


def cmd_meta_test(cfg: ExperimentConfig, args) -> None:
    ck = load_checkpoint(_require_file(cfg.path(CHECKPOINT)), expect_kind=cfg.kind)
    ts = load_task_set(_require_file(cfg.path(TEST_TASKS)))
    mode = cfg.test.proposal
    if mode != "random" and ck.proposal is None:
        raise ConfigError(f"test.proposal={mode!r} but the checkpoint has no proposal encoder")
    t0 = time.perf_counter()
    rows = run_meta_test(ts, ck.library, ck.proposal, mode, cfg.meta_test_config(), cfg.test.random_rate)
    wall = time.perf_counter() - t0
    cols = [c for c in metrics.TASK_COLUMNS if c in rows[0]]
    atomic_write(cfg.path(METRICS_CSV), metrics.rows_to_csv(rows, cols))
    summary = {"format_version": 1, "kind": cfg.kind, "proposal": mode, "budget": cfg.test.budget,
               "aggregate": metrics.aggregate(rows, [c for c in cols if c != "task"]),
               "tasks": [{c: r[c] for c in cols} for r in rows]}
    atomic_write(cfg.path(METRICS_JSON), json.dumps(summary, indent=1) + "\n")
    # wall time is kept out of the metrics files so they stay reproducible
    atomic_write(cfg.path("timing.json"), json.dumps({"meta_test_seconds": wall,
                                                      "per_task": [r["wall_time"] for r in rows]}) + "\n")
    agg = summary["aggregate"]
    print(f"edge_accuracy {agg['edge_accuracy']:.4f}  mse_1 {agg.get('mse_1', float('nan')):.4g}  "
          f"static_mse_1 {agg.get('static_mse_1', float('nan')):.4g}")


def cmd_infer_latent(cfg: ExperimentConfig, args) -> None:
    ck = load_checkpoint(_require_file(cfg.path(CHECKPOINT)), expect_kind=cfg.kind)
    ts = load_task_set(_require_file(cfg.path(TEST_TASKS)))
    lc = cfg.latent_config()
    idx = latent_candidates(ts, cfg.latent.n_tasks, cfg.latent.node)
    os.makedirs(cfg.path("latent"), exist_ok=True)
    rows = []
    for i in idx:
        r = run_latent(ts.tasks[i], ck.library, lc, cfg.latent.node, cfg.latent.module_map)
        hyp = r.pop("hypothesis")
        doc = json.loads(hyp.to_json())
        doc.update(task=i, latent_mse=r["latent_mse"], static_mse=r["static_mse"], config=config_dict(lc))
        atomic_write(cfg.path(os.path.join("latent", f"task_{i:04d}.json")), json.dumps(doc) + "\n")
        rows.append({"task": i, "loss": r["loss"], "latent_mse": r["latent_mse"], "static_mse": r["static_mse"],
                     "beats_static": int(r["latent_mse"] < r["static_mse"])})
        log.info("task %d latent mse %.4g static %.4g", i, r["latent_mse"], r["static_mse"])
    cols = ("task", "loss", "latent_mse", "static_mse", "beats_static")
    atomic_write(cfg.path(LATENT_CSV), metrics.rows_to_csv(rows, cols))
    print(f"latent beats static on {sum(r['beats_static'] for r in rows)}/{len(rows)} tasks")


def cmd_report(cfg: ExperimentConfig, args) -> None:
    out = []
    for name in (METRICS_CSV, LATENT_CSV):
        path = cfg.path(name)
        if not os.path.exists(path):
            continue
        rows = metrics.read_rows(path)
        if not rows:
            continue
        agg = metrics.aggregate(rows)
        for k, v in agg.items():
            out.append({"source": name, "metric": k, "value": v})
    if not out:
        raise FileNotFoundError(f"no per-task outputs found in {cfg.out_dir}")
    atomic_write(cfg.path(REPORT_CSV), metrics.rows_to_csv(out, ("source", "metric", "value")))
    for r in out:
        print(f"{r['source']:<12} {r['metric']:<18} {r['value']:.6g}")


COMMANDS = {
    "generate": cmd_generate,
    "meta-train": cmd_meta_train,
    "meta-test": cmd_meta_test,
    "infer-latent": cmd_infer_latent,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modnri", description="Modular meta-learning for relational inference.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="override the output directory")
        sp.add_argument("--proposal", choices=("random", "learned", "mixed"),
                        help="proposal mode (meta-train: training proposer, meta-test: search proposer)")
        sp.add_argument("--budget", type=int, help="meta-test proposals per task")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "meta-train":
            sp.add_argument("--fixed-structures", choices=("truth",),
                            help="train modules on ground-truth structures instead of searching")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "out_dir": args.out, "test.budget": args.budget}
    if args.proposal is not None:
        key = "train.proposal_mode" if args.command == "meta-train" else "test.proposal"
        overrides[key] = args.proposal
    if getattr(args, "fixed_structures", None):
        overrides["train.fixed_structures"] = args.fixed_structures
    try:
        cfg = load_config(args.config, **overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(cfg.out_dir, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, CheckpointMismatch) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, ParseError, VersionError, ContractError, FloatingPointError, OSError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
