"""Scenario runs, parameter sweeps and their on-disk outputs.

A run directory holds::

    epochs.csv      one row per epoch (fixed columns)
    summary.json    final metrics, versioned; bit-identical across reruns
    timings.json    wall-clock numbers (kept apart because they never repeat)
    escrow.smtf     encrypted escrow records
    history.smtf    server epoch history
    shares.json     every client's Shamir holdings, for the offline drill
    run.png         accuracy / client-count figure
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .config import ScenarioConfig
from .recovery import save_history
from .simulation import EpochMetrics, RunTrace, Simulator, build_data, detection_rates

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "smtfl-metrics/1"
# execution knobs that must not change any result, so they stay out of the summary
EXECUTION_KEYS = ("workers",)
CSV_COLUMNS = ["epoch", "acc", "accepted_groups", "rejected_groups", "evictions", "active_clients"]


@dataclass
class RunMetrics:
    config: ScenarioConfig
    epochs: list[EpochMetrics]
    malicious: list[int]
    evicted: dict[int, int]
    acc_defended: float
    acc_no_attack: float | None = None
    acc_attacked: float | None = None
    curves: dict[str, list[float]] = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    minus_one_events: int = 0
    score_events: int = 0
    timings: dict = field(default_factory=dict)

    @property
    def acc_loc(self) -> float:
        return detection_rates(self.malicious, self.evicted, self.config.m)[0]

    @property
    def rate_false(self) -> float:
        return detection_rates(self.malicious, self.evicted, self.config.m)[1]

    @property
    def last_eviction_epoch(self) -> int | None:
        return max(self.evicted.values()) if self.evicted else None

    def summary(self) -> dict:
        detected = sorted(set(self.malicious) & set(self.evicted))
        return {
            "schema_version": SCHEMA_VERSION,
            "config": {k: v for k, v in self.config.to_dict().items() if k not in EXECUTION_KEYS},
            "malicious": sorted(self.malicious),
            "evicted": {str(k): v for k, v in sorted(self.evicted.items())},
            "detected": detected,
            "surviving_malicious": sorted(set(self.malicious) - set(detected)),
            "acc_no_attack": self.acc_no_attack,
            "acc_attacked": self.acc_attacked,
            "acc_defended": self.acc_defended,
            "acc_loc": self.acc_loc,
            "rate_false": self.rate_false,
            "last_eviction_epoch": self.last_eviction_epoch,
            "score_events": self.score_events,
            "minus_one_events": self.minus_one_events,
            "rejected_groups_total": sum(e.rejected_groups for e in self.epochs),
            "curves": self.curves,
            "ledger": self.ledger,
        }

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in self.epochs:
            w.writerow(e.csv_row())
        return buf.getvalue()


def run_scenario(config: ScenarioConfig, out_dir=None) -> RunMetrics:
    """Defended run plus (if ``config.paired``) the no-attack and undefended twins.

    All three share data, partition, malicious ids and seeds, so accuracy
    gaps isolate the adversary and the defence.
    """
    data = build_data(config)
    store_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        store_path = out_dir / "escrow.smtf"
        if store_path.exists():
            store_path.unlink()
    trace = Simulator(config, data, store_path=store_path).run()
    metrics = RunMetrics(
        config=config,
        epochs=trace.epochs,
        malicious=sorted(data.malicious),
        evicted=trace.evicted,
        acc_defended=trace.final_acc,
        curves={"defended": [e.acc for e in trace.epochs]},
        ledger=trace.ledger.snapshot(),
        minus_one_events=trace.minus_one_events,
        score_events=trace.score_events,
        timings=trace.timings.summary(),
    )
    if config.paired:
        clean = Simulator(config, data, attack=False).run()
        attacked = Simulator(config, data, defend=False).run()
        metrics.acc_no_attack = clean.final_acc
        metrics.acc_attacked = attacked.final_acc
        metrics.curves["no_attack"] = [e.acc for e in clean.epochs]
        metrics.curves["attacked"] = [e.acc for e in attacked.epochs]
    if out_dir is not None:
        save_history(out_dir / "history.smtf", trace.history, config.policy.p)
        write_shares(out_dir / "shares.json", trace)
    return metrics


def write_shares(path, trace: RunTrace) -> None:
    keys = trace.keys
    doc = {
        "schema_version": SCHEMA_VERSION,
        "p": keys.policy.p,
        "t": keys.policy.t,
        "m": keys.policy.m,
        "offline": sorted(trace.evicted),
        "holdings": {
            str(pid): {str(owner): [s.x, s.y] for owner, s in sorted(held.items())}
            for pid, held in sorted(keys.holdings.items())
        },
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def emit_metrics(metrics: RunMetrics, out_dir, figures: bool | None = None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / "epochs.csv",
        "summary": out_dir / "summary.json",
        "timings": out_dir / "timings.json",
    }
    paths["csv"].write_text(metrics.csv_text(), encoding="utf-8")
    paths["summary"].write_text(json.dumps(metrics.summary(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["timings"].write_text(json.dumps(metrics.timings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if metrics.config.figures if figures is None else figures:
        from .plots import plot_run

        paths["figure"] = plot_run(metrics, out_dir / "run.png")
    return paths


SWEEP_METRICS = [
    "acc_no_attack",
    "acc_attacked",
    "acc_defended",
    "acc_loc",
    "rate_false",
    "last_eviction_epoch",
    "minus_one_events",
]


def expand_grid(grid: dict[str, list]) -> list[dict]:
    if not grid or any(len(v) == 0 for v in grid.values()):
        raise ValueError("sweep grid is empty")
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def run_matrix(base: ScenarioConfig, grid: dict[str, list]) -> list[dict]:
    """One scenario per grid point.  A failing cell records its error and the sweep moves on."""
    rows = []
    for cell in expand_grid(grid):
        row = dict(cell)
        try:
            m = run_scenario(base.replace(**cell))
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            logger.warning("sweep cell %s failed: %s", cell, exc)
            row.update({k: None for k in SWEEP_METRICS})
            row["error"] = f"{type(exc).__name__}: {exc}"
        else:
            s = m.summary()
            row.update({k: s[k] for k in SWEEP_METRICS})
            row["error"] = ""
        rows.append(row)
    return rows


def sweep_csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: ("" if v is None else v) for k, v in r.items()})
    return buf.getvalue()
