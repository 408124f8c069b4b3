"""Command-line entry point: runs, B0 calibration, communication cost, bound verifier."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .clustering import CALIBRATION_RULES, calibrate_b0
from .config import ExperimentConfig, load_config, with_overrides
from .errors import ConfigError, CosmosError, ParameterError
from .metrics import CSV_COLUMNS, check_lemma_instance, csv_rows, random_lemma_instance
from .protocol import (
    AGGREGATION_RULES,
    Federation,
    comm_bytes,
    message_bytes,
    to_mb,
)

logger = logging.getLogger("cosmosfl")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULT_OUT_DIR = "cosmos_out"

# (name, n, M) reference bandwidth rows
REFERENCE_COMM_ROWS = [
    ("CIFAR-10", 10000, 10),
    ("CIFAR-100", 10000, 100),
    ("EMNIST", 22560, 47),
    ("Tiny ImageNet", 20000, 200),
]


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    path = Path(args.out_dir or os.environ.get("COSMOS_OUT_DIR") or DEFAULT_OUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(
        cfg,
        seed=args.seed,
        rounds=args.rounds,
        clients=args.clients,
        b0=args.b0,
        lam=args.lam,
        temperature=args.temperature,
        aggregation=args.agg,
        workers=args.workers,
    )


def _write_json(path: Path, payload: dict):
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- run -----------------------------------------------------------------

def _summary_lines(cfg: ExperimentConfig, fed: Federation, elapsed: float) -> list[str]:
    lines = [f"mode: {cfg.mode}", f"seed: {cfg.seed}"]
    if fed.history:
        lines.append(f"K: {fed.history[-1].K}")
    if fed.server is not None and fed.server.calibration is not None:
        lines.append(f"calibrated b0: {fed.server.calibration.b0!r}")
    lines.append("round  server_model_acc  client_model_acc")
    for m in fed.history:
        lines.append(f"{m.round:5d}  {m.mean_server_acc:16.4f}  {m.mean_client_acc:16.4f}")
    if fed.history:
        lines.append(f"final personalization risk: {fed.history[-1].personalization_risk:.4f}")
    total = fed.ledger.total
    lines.append(f"total bytes: {total} ({to_mb(total):.2f} MB)")
    lines.append(f"elapsed: {elapsed:.1f}s")
    return lines


def cmd_run(args) -> int:
    try:
        cfg = _resolve_config(args)
        part = cfg.build_partition()
    except (CosmosError, OSError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_USAGE
    out = _out_dir(args)
    paths = {
        "metrics": str(out / "metrics.csv"),
        "manifest": str(out / "manifest.json"),
        "summary": str(out / "summary.txt"),
    }
    manifest = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "version": __version__,
        "kernel_backend": kernels.BACKEND,
        "started": _utc_now(),
        "finished": None,
        "status": "running",
        "outputs": paths,
    }
    _write_json(Path(paths["manifest"]), manifest)

    t0 = time.perf_counter()
    proto = cfg.protocol_config()
    if cfg.mode == "single_cluster":
        proto = replace(proto, b0=math.inf)
    fed = Federation(part, proto)
    status, code = "ok", EXIT_OK
    with open(paths["metrics"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        fh.flush()

        def on_round(m):
            writer.writerows(csv_rows(m))
            fh.flush()
            logger.info("round %d: server acc %.4f, client acc %.4f, K=%d",
                        m.round, m.mean_server_acc, m.mean_client_acc, m.K)

        try:
            if cfg.mode == "local_only":
                fed.run_local_only(on_round=on_round)
            else:
                fed.run(on_round=on_round)
        except Exception as exc:  # noqa: BLE001 - any failure keeps the partial CSV
            logger.error("run failed in round %d: %s", fed.round + 1, exc)
            status, code = f"failed: {exc}", EXIT_FAILURE

    lines = _summary_lines(cfg, fed, time.perf_counter() - t0)
    if code != EXIT_OK:
        lines.append(f"status: {status}")
    Path(paths["summary"]).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    manifest.update(finished=_utc_now(), status=status)
    _write_json(Path(paths["manifest"]), manifest)
    return code


# -- calibrate-b0 ----------------------------------------------------------

def cmd_calibrate_b0(args) -> int:
    try:
        cfg = _resolve_config(args)
        part = cfg.build_partition()
        fed = Federation(part, cfg.protocol_config())
    except (CosmosError, OSError) as exc:
        logger.error("config error: %s", exc)
        return EXIT_USAGE
    target = args.target_k if args.target_k is not None else cfg.partition.num_groups
    dist = fed.round1_distances()
    try:
        cal = calibrate_b0(dist, target, args.rule)
    except ParameterError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    print("b0_threshold,K")
    for b0, k in cal.sweep:
        print(f"{b0!r},{k}")
    print(f"recommended b0: {cal.b0!r} (K={cal.K}, target={target}, rule={cal.rule})")
    return EXIT_OK


# -- commcost --------------------------------------------------------------

def cmd_commcost(args) -> int:
    if args.reference_table:
        print(f"{'dataset':<14} {'n':>6} {'M':>4} {'MB/message':>10}")
        for name, n, m in REFERENCE_COMM_ROWS:
            print(f"{name:<14} {n:>6} {m:>4} {to_mb(comm_bytes(n, m)):>10.2f}")
        return EXIT_OK
    if args.n is None or args.M is None:
        logger.error("--n and --M are required unless --reference-table is given")
        return EXIT_USAGE
    try:
        payload = comm_bytes(args.n, args.M)
    except ParameterError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    framed = message_bytes(args.n, args.M)
    per_round = 2 * payload  # one upload, one download
    rows = [
        ("payload bytes per message", payload),
        ("framed bytes per message", framed),
        ("per client per round (up+down)", per_round),
        ("per client over all rounds", per_round * args.rounds),
        ("all clients over all rounds", per_round * args.rounds * args.clients),
        ("distinct server messages per round", payload * args.K),
    ]
    print(f"{'quantity':<36} {'bytes':>14} {'MB':>10}")
    for name, b in rows:
        print(f"{name:<36} {b:>14} {to_mb(b):>10.2f}")
    return EXIT_OK


# -- verify-lemma ------------------------------------------------------------

def cmd_verify_lemma(args) -> int:
    if args.trials < 0:
        logger.error("--trials must be >= 0")
        return EXIT_USAGE
    if args.trials == 0:
        logger.warning("0 trials requested: nothing checked, vacuous pass")
        print("trials=0 hold=0 inconclusive=0 violations=0")
        return EXIT_OK
    rng = np.random.default_rng(args.seed)
    hold = inconclusive = 0
    for trial in range(args.trials):
        inst = random_lemma_instance(rng, violate_margin=args.violate_margin)
        entry = check_lemma_instance(inst)
        if entry.holds is None:
            inconclusive += 1
        elif entry.holds:
            hold += 1
        else:
            path = _out_dir(args) / "lemma_counterexample.json"
            _write_json(path, {"trial": trial, "seed": args.seed, "entry": entry.__dict__,
                               "instance": inst.to_json()})
            logger.error("bound violated in trial %d (lhs %r > rhs %r); counterexample in %s",
                         trial, entry.lhs, entry.rhs, path)
            print(f"trials={trial + 1} hold={hold} inconclusive={inconclusive} violations=1")
            return EXIT_FAILURE
    print(f"trials={args.trials} hold={hold} inconclusive={inconclusive} violations=0")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _experiment_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="YAML config or run manifest")
    p.add_argument("--seed", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--b0", type=float, help="clustering threshold (default: calibrated)")
    p.add_argument("--lambda", dest="lam", type=float, help="regularizer weight")
    p.add_argument("--temperature", type=float)
    p.add_argument("--agg", choices=AGGREGATION_RULES)
    p.add_argument("--workers", type=int)
    return p


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--out-dir", help="output directory (default: $COSMOS_OUT_DIR or ./cosmos_out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cosmos", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    exp, common = _experiment_flags(), _common_flags()

    p = sub.add_parser("run", parents=[exp, common], help="run an experiment")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("calibrate-b0", parents=[exp, common], help="sweep B0 on round-1 distances")
    p.add_argument("--target-k", type=int, help="default: number of label groups")
    p.add_argument("--rule", choices=CALIBRATION_RULES, default="largest")
    p.set_defaults(func=cmd_calibrate_b0)

    p = sub.add_parser("commcost", parents=[common], help="closed-form bandwidth")
    p.add_argument("--n", type=int, help="public pool size")
    p.add_argument("--M", type=int, help="number of classes")
    p.add_argument("--rounds", type=int, default=1)
    p.add_argument("--K", type=int, default=1)
    p.add_argument("--clients", type=int, default=1)
    p.add_argument("--reference-table", action="store_true", help="print the four reference bandwidth rows")
    p.set_defaults(func=cmd_commcost)

    p = sub.add_parser("verify-lemma", parents=[common], help="randomized aggregation-bound check")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--violate-margin", action="store_true",
                   help="break the margin precondition (trials become inconclusive)")
    p.set_defaults(func=cmd_verify_lemma)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        logger.error("config error: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
