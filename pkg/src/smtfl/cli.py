"""Command-line entry point.

    smtfl run --config scenario.toml [--seed N] [--out DIR] [--paper-shape]
    smtfl sweep --config scenario.toml --grid grid.toml [--out DIR]
    smtfl unlearn --store escrow.smtf --target ID --shares shares.json

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
``SMTFL_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config, load_grid
from .metrics import emit_metrics, run_matrix, run_scenario, sweep_csv_text
from .vault import EscrowStore, ShamirShare, ThresholdPolicy, quorum_decrypt

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("smtfl")


def _setup_logging() -> None:
    level = os.environ.get("SMTFL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.seed is not None:
        config = config.replace(seed=args.seed)
    if args.paper_shape:
        config = config.full_scale()
    out = Path(args.out or config.out_dir)
    metrics = run_scenario(config, out)
    paths = emit_metrics(metrics, out)
    s = metrics.summary()
    print(
        f"acc_defended={s['acc_defended']:.4f} acc_no_attack={s['acc_no_attack']} "
        f"acc_attacked={s['acc_attacked']} acc_loc={s['acc_loc']:.3f} rate_false={s['rate_false']:.3f}"
    )
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config)
    grid = load_grid(args.grid)
    rows = run_matrix(base, grid)
    out = Path(args.out or base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv_text(rows), encoding="utf-8")
    print(f"sweep: {out / 'sweep.csv'} ({len(rows)} cells)")
    if base.figures:
        from .plots import plot_sweep

        for param, values in grid.items():
            if len(values) > 1 and all(isinstance(v, (int, float)) for v in values):
                p = plot_sweep(rows, param, out / f"sweep_{param}.png")
                print(f"figure: {p}")
    failed = [r for r in rows if r["error"]]
    if failed:
        print(f"{len(failed)} cell(s) failed", file=sys.stderr)
    return EXIT_OK


def load_shares(path) -> tuple[ThresholdPolicy, dict, list[int]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        policy = ThresholdPolicy(int(doc["m"]), int(doc["t"]), int(doc["p"]))
        holdings = {
            int(pid): {int(owner): ShamirShare(int(xy[0]), int(xy[1])) for owner, xy in held.items()}
            for pid, held in doc["holdings"].items()
        }
    except FileNotFoundError:
        raise ConfigError(f"shares file not found: {path}") from None
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed shares file ({exc})") from None
    return policy, holdings, [int(c) for c in doc.get("offline", [])]


def cmd_unlearn(args) -> int:
    """Offline recovery drill: rebuild the escrow keys a quorum needs and decrypt."""
    policy, holdings, offline = load_shares(args.shares)
    if args.t is not None:
        policy = ThresholdPolicy(policy.m, args.t, policy.p)
    if not Path(args.store).exists():
        raise ConfigError(f"store not found: {args.store}")
    store = EscrowStore.open(args.store)
    excluded = set(offline) | {args.target}
    if args.providers:
        chosen = {int(x) for x in args.providers.split(",")}
        excluded |= set(holdings) - chosen
    providers = {pid: held for pid, held in holdings.items() if pid not in excluded}
    epochs = None
    if args.epochs:
        lo, hi = (int(x) for x in args.epochs.split(":"))
        epochs = range(lo, hi)
    result = quorum_decrypt(store, args.target, epochs, providers, policy)
    report = {
        "target": args.target,
        "providers": sorted(providers),
        "recovered_owners": result.recovered_owners,
        "blocked_owners": result.blocked_owners,
        "blocked_epochs": result.blocked_epochs,
        "messages": [
            {
                "epoch": m.epoch,
                "group": m.group,
                "sender": m.sender,
                "owner": m.owner,
                "l2": float(np.linalg.norm(m.vector)),
                "vector": m.vector.tolist(),
            }
            for m in result.messages
        ],
    }
    text = json.dumps(report, indent=1)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    print(
        f"decrypted {len(result.messages)} message(s); blocked epochs: {result.blocked_epochs or 'none'}",
        file=sys.stderr,
    )
    return EXIT_OK if result.complete else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smtfl", description="Grouped secure-aggregation FL simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--paper-shape", action="store_true", help="use 150 clients as in the original setup")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a parameter grid")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    u = sub.add_parser("unlearn", help="offline quorum decryption drill")
    u.add_argument("--store", required=True)
    u.add_argument("--target", type=int, required=True)
    u.add_argument("--shares", required=True)
    u.add_argument("--providers", help="comma-separated provider ids (default: all online)")
    u.add_argument("--epochs", help="half-open range lo:hi")
    u.add_argument("--t", type=int, help="override the quorum size")
    u.add_argument("--out")
    u.set_defaults(func=cmd_unlearn)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
