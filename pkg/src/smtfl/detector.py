"""Performance-delta scoring of group uploads and score-based client eviction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .learning import Dataset, Model, apply_update, evaluate
from .protocol import Group


@dataclass(frozen=True)
class ScoreEvent:
    epoch: int
    group: Group
    delta: float
    score: int
    aggregated: bool


@dataclass(frozen=True)
class ProbeOutcome:
    pre_acc: float
    post_acc: float
    score: int

    @property
    def accepted(self) -> bool:
        return self.score != -1


def score_group(pre_acc: float, post_acc: float, tau: float) -> int:
    """-1 if accuracy fell by more than tau, +1 if it rose by more, else 0.

    A change of exactly tau scores 0.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    delta = post_acc - pre_acc
    if -delta > tau:
        return -1
    if delta > tau:
        return 1
    return 0


def probe_and_apply(
    model: Model, group_gradient, member_count: int, test: Dataset, tau: float
) -> tuple[Model, ProbeOutcome]:
    """Tentatively add ``group_gradient / member_count`` and keep it unless accuracy drops by > tau.

    On rejection the very same ``model`` object is returned.
    """
    if member_count < 1:
        raise ValueError("member_count must be >= 1")
    pre = evaluate(model, test)
    candidate = apply_update(model, np.asarray(group_gradient, dtype=np.float64) / member_count)
    post = evaluate(candidate, test)
    outcome = ProbeOutcome(pre, post, score_group(pre, post, tau))
    return (candidate if outcome.accepted else model), outcome


@dataclass
class EvaluationLedger:
    """Running per-client score totals with the full event history.

    ``thre_eva`` is the (usually negative) bound: a client is evicted once its
    total is strictly below it.
    """

    tau: float
    thre_eva: int
    totals: dict[int, int] = field(default_factory=dict)
    history: dict[int, list[ScoreEvent]] = field(default_factory=dict)
    evicted: dict[int, int] = field(default_factory=dict)  # client -> epoch evicted

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def register(self, clients) -> None:
        for c in clients:
            self.totals.setdefault(int(c), 0)
            self.history.setdefault(int(c), [])

    def replay_total(self, client: int) -> int:
        return sum(ev.score for ev in self.history.get(client, []))

    def snapshot(self) -> dict:
        return {
            "tau": self.tau,
            "thre_eva": self.thre_eva,
            "totals": {str(k): v for k, v in sorted(self.totals.items())},
            "evicted": {str(k): v for k, v in sorted(self.evicted.items())},
        }


def record_scores(
    ledger: EvaluationLedger,
    group: Group,
    score: int,
    epoch: int,
    delta: float = 0.0,
    aggregated: bool | None = None,
) -> EvaluationLedger:
    """Give every member of ``group`` the same score event (mutates and returns ``ledger``)."""
    if score not in (-1, 0, 1):
        raise ValueError(f"score must be -1, 0 or +1, got {score}")
    for c in group.members:
        if c in ledger.evicted:
            raise ValueError(f"client {c} was evicted in epoch {ledger.evicted[c]}")
    ev = ScoreEvent(epoch, group, delta, score, score != -1 if aggregated is None else aggregated)
    for c in group.members:
        ledger.totals[c] = ledger.totals.get(c, 0) + score
        ledger.history.setdefault(c, []).append(ev)
    return ledger


def eviction_sweep(ledger: EvaluationLedger, epoch: int = -1) -> list[int]:
    """Mark and return every not-yet-evicted client whose total is below the bound."""
    out = []
    for c in sorted(ledger.totals):
        if c not in ledger.evicted and ledger.totals[c] < ledger.thre_eva:
            ledger.evicted[c] = epoch
            out.append(c)
    return out
