"""Federated unlearning by corrected replay of the server's epoch history.

Per epoch the corrected update is

    (sum of accepted group sums - sum_j w_j * g_mali_j) / (n_grouped - k)

where n_grouped counts every client grouped that epoch and k the marked ones
among them.  Replaying those corrected updates from the initial model gives the model the
server would have had without the evicted clients.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .learning import Model, apply_update
from .protocol import Group, aggregate_global
from .vault import (
    DEFAULT_PRIME,
    KIND_EPOCH,
    QuorumResult,
    read_frames,
    write_frame,
    write_header,
)

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    """What the server retains about one epoch.

    ``sums`` are the unmasked sums of the accepted groups and ``masked`` the
    uploads they came from (needed to isolate an aggregator's gradient).
    Rejected groups count as zero contributions, so the epoch update is the
    accepted total divided by every grouped client of the epoch.
    """

    epoch: int
    groups: list[Group]
    sums: list[np.ndarray]
    masked: list[np.ndarray]
    update: np.ndarray
    rejected: list[Group] = field(default_factory=list)

    @property
    def member_count(self) -> int:
        return 3 * (len(self.groups) + len(self.rejected))

    def group_of(self, client: int) -> tuple[int, Group] | None:
        for i, g in enumerate(self.groups):
            if client in g.members:
                return i, g
        return None


def epoch_update(sums, n_rejected: int, dim: int) -> np.ndarray:
    """Mean over all grouped clients with rejected groups entered as zeros."""
    padded = list(sums) + [np.zeros(dim)] * n_rejected
    if not padded:
        return np.zeros(dim)
    return aggregate_global(padded, 3 * len(padded))


@dataclass
class UnlearnRequest:
    malicious: frozenset
    gradients: dict = field(default_factory=dict)  # (client, epoch) -> vector
    weights: dict = field(default_factory=dict)  # client -> omega, default 1
    dropped: set = field(default_factory=set)  # (epoch, group index) removed wholesale

    def weight(self, client: int) -> float:
        return float(self.weights.get(client, 1.0))


def _split(record: EpochRecord, request: UnlearnRequest):
    kept = [i for i, g in enumerate(record.groups) if (record.epoch, g.index) not in request.dropped]
    n_dropped = len(record.groups) - len(kept)
    in_sum = [c for i in kept for c in record.groups[i].members if c in request.malicious]
    in_rejected = [c for g in record.rejected for c in g.members if c in request.malicious]
    n = record.member_count - 3 * n_dropped - len(in_sum) - len(in_rejected)
    return kept, in_sum, n


def unlearn_epoch(record: EpochRecord, request: UnlearnRequest) -> np.ndarray:
    """Corrected global update for one epoch.

    Marked clients leave both the numerator (their recovered uploads are
    subtracted, weighted) and the client count; groups in
    ``request.dropped`` leave entirely.
    """
    kept, marked, n = _split(record, request)
    if not marked and len(kept) == len(record.groups) and n == record.member_count:
        # same arithmetic path as the original commit, so k=0 replays bit-for-bit
        return epoch_update(record.sums, len(record.rejected), record.update.size)
    if n < 1:
        raise ValueError(f"epoch {record.epoch}: no unmarked contributors remain")
    if not kept:
        return np.zeros_like(record.update)
    total = np.sum([record.sums[i] for i in kept], axis=0)
    for c in marked:
        key = (c, record.epoch)
        if key not in request.gradients:
            raise KeyError(f"no recovered gradient for client {c} in epoch {record.epoch}")
        total = total - request.weight(c) * np.asarray(request.gradients[key], dtype=np.float64)
    return total / n


def replay_corrected(initial: Model, history, request: UnlearnRequest) -> Model:
    """Re-apply every epoch's corrected update, in order, from ``initial``.

    An epoch whose grouped clients are all marked applies no update.
    """
    model = initial
    last = None
    for record in history:
        if last is not None and record.epoch <= last:
            raise ValueError("history must be ordered by epoch")
        last = record.epoch
        if record.member_count and _split(record, request)[2] < 1:
            continue
        model = apply_update(model, unlearn_epoch(record, request))
    return model


def reconstruct_gradient(
    target: int,
    record: EpochRecord,
    decrypted: QuorumResult,
    epsilon,
) -> np.ndarray | None:
    """Isolate ``target``'s upload in ``record.epoch`` from decrypted escrow.

    ``epsilon`` is the target's perturbation vector for that epoch, which the
    server derives itself.  Returns None when a needed message is missing.
    """
    found = record.group_of(target)
    if found is None:
        return None
    i, group = found
    a, b, c = group.members
    e = np.asarray(getattr(epsilon, "values", epsilon), dtype=np.float64)
    ep = record.epoch
    to_b = decrypted.lookup(ep, a, b)
    to_c = decrypted.lookup(ep, a, c)
    relay = decrypted.lookup(ep, b, c)
    if target == a:
        if to_b is None or to_c is None:
            return None
        return to_c + to_b - e
    if target == b:
        if relay is None or to_b is None:
            return None
        return relay - to_b - e
    if to_c is None or relay is None:
        return None
    return record.masked[i] - to_c - relay - e


# -- persistence ----------------------------------------------------------------


def _vec(v) -> bytes:
    return np.ascontiguousarray(v, dtype="<f8").tobytes()


def encode_epoch(rec: EpochRecord) -> bytes:
    dim = rec.update.size
    out = [struct.pack("<IIII", rec.epoch, dim, len(rec.groups), len(rec.rejected))]
    for g, s, mk in zip(rec.groups, rec.sums, rec.masked):
        out.append(struct.pack("<IIII", g.index, *g.members))
        out.append(_vec(mk))
        out.append(_vec(s))
    for g in rec.rejected:
        out.append(struct.pack("<IIII", g.index, *g.members))
    out.append(_vec(rec.update))
    return b"".join(out)


def decode_epoch(body: bytes) -> EpochRecord:
    epoch, dim, ng, nr = struct.unpack_from("<IIII", body, 0)
    pos = 16
    width = 8 * dim

    def take_vec():
        nonlocal pos
        v = np.frombuffer(body, dtype="<f8", count=dim, offset=pos).astype(np.float64)
        pos += width
        return v

    groups, sums, masked, rejected = [], [], [], []
    for _ in range(ng):
        idx, a, b, c = struct.unpack_from("<IIII", body, pos)
        pos += 16
        groups.append(Group((a, b, c), epoch, idx))
        masked.append(take_vec())
        sums.append(take_vec())
    for _ in range(nr):
        idx, a, b, c = struct.unpack_from("<IIII", body, pos)
        pos += 16
        rejected.append(Group((a, b, c), epoch, idx))
    update = take_vec()
    return EpochRecord(epoch, groups, sums, masked, update, rejected)


def save_history(path, history, prime: int = DEFAULT_PRIME) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        write_header(fh, prime)
        for rec in history:
            write_frame(fh, KIND_EPOCH, encode_epoch(rec))


def load_history(path) -> list[EpochRecord]:
    _, frames = read_frames(path)
    return [decode_epoch(body) for kind, body in frames if kind == KIND_EPOCH]
