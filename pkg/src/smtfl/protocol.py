"""Grouped, masked gradient aggregation.

Per epoch the active clients are shuffled into triples (splitter A, relay B,
aggregator C).  A splits its update into two random-looking shares, B adds
its own masked update to A's masked second share, C folds everything together
and uploads one masked group sum.  The server knows every client's per-epoch
perturbation vector and strips the masks off the group sum.

Every vector a participant receives is logged in its :class:`ParticipantView`
so privacy properties can be checked on the actual message traffic.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .learning import as_gradient

logger = logging.getLogger(__name__)

SERVER = "server"

SHARE1 = "share1"
MASKED_SHARE2 = "masked_share2"
RELAY_SUM = "relay_sum"
GROUP_SUM = "group_sum"
VIEW_TAGS = (SHARE1, MASKED_SHARE2, RELAY_SUM, GROUP_SUM)


@dataclass(frozen=True)
class Group:
    members: tuple[int, int, int]
    epoch: int
    index: int = 0

    def __post_init__(self):
        if len(self.members) != 3 or len(set(self.members)) != 3:
            raise ValueError(f"a group needs three distinct members, got {self.members}")

    @property
    def splitter(self) -> int:
        return self.members[0]

    @property
    def relay(self) -> int:
        return self.members[1]

    @property
    def aggregator(self) -> int:
        return self.members[2]

    def role_of(self, client: int) -> str:
        return "ABC"[self.members.index(client)]


@dataclass(frozen=True)
class GradientShares:
    g1: np.ndarray
    g2: np.ndarray


@dataclass(frozen=True)
class PerturbationVector:
    owner: int
    epoch: int
    values: np.ndarray


@dataclass
class ParticipantView:
    observer: int | str
    epoch: int
    observed: list[tuple[str, np.ndarray]] = field(default_factory=list)

    def record(self, tag: str, vector: np.ndarray) -> None:
        if tag not in VIEW_TAGS:
            raise ValueError(f"unknown view tag {tag!r}")
        self.observed.append((tag, np.array(vector, dtype=np.float64, copy=True)))

    def to_bytes(self) -> bytes:
        """Canonical serialisation, used for byte-identity comparisons."""
        out = [f"{self.observer}|{self.epoch}".encode()]
        for tag, vec in self.observed:
            out.append(tag.encode())
            out.append(np.ascontiguousarray(vec, dtype="<f8").tobytes())
        return b"\x00".join(out)


@dataclass(frozen=True)
class EscrowMessage:
    """One inter-client message, as the receiver got it."""

    epoch: int
    group: int
    sender: int
    receiver: int
    tag: str
    vector: np.ndarray


@dataclass
class GroupRoundResult:
    group: Group
    masked_sum: np.ndarray
    views: list[ParticipantView]
    escrow: list[EscrowMessage]


def form_groups(
    active,
    epoch: int,
    seed: int,
    scatter: list[tuple[int, ...]] | None = None,
    scatter_tries: int = 32,
) -> tuple[list[Group], list[int]]:
    """Shuffle ``active`` and cut it into consecutive triples.

    Leftover clients (one or two) are excluded for this epoch.  Roles follow
    position inside the triple.  ``scatter`` optionally lists member sets that
    should not share a group again (e.g. previously flagged groups); the
    shuffle is redrawn up to ``scatter_tries`` times to minimise reunions.
    """
    ids = sorted(int(c) for c in active)
    rng = np.random.default_rng([seed, epoch])

    def draw():
        order = [ids[i] for i in rng.permutation(len(ids))]
        n = len(order) // 3
        return [tuple(order[3 * i : 3 * i + 3]) for i in range(n)], order[3 * n :]

    triples, excluded = draw()
    if scatter:
        flagged = [set(s) for s in scatter]

        def reunions(ts):
            return sum(len(set(t) & f) >= 2 for t in ts for f in flagged)

        best = reunions(triples)
        for _ in range(scatter_tries):
            if best == 0:
                break
            cand, cand_ex = draw()
            r = reunions(cand)
            if r < best:
                triples, excluded, best = cand, cand_ex, r
    groups = [Group(t, epoch, i) for i, t in enumerate(triples)]
    return groups, sorted(excluded)


def split_gradient(g, seed: int) -> GradientShares:
    """Additive two-way split.  The first share is uniform in [-s, s], s = max(1, |g|_inf)."""
    g = as_gradient(g)
    s = max(1.0, float(np.max(np.abs(g))))
    g1 = np.random.default_rng(seed).uniform(-s, s, g.size)
    return GradientShares(g1, g - g1)


def _prf_seed(shared_seed: int, client: int, epoch: int) -> int:
    key = struct.pack("<q", shared_seed) if -(2**63) <= shared_seed < 2**63 else str(shared_seed).encode()
    mac = hmac.new(key, b"smtfl-eps" + struct.pack("<qq", client, epoch), hashlib.sha256)
    return int.from_bytes(mac.digest(), "little")


def negotiate_epsilon(
    client: int, epoch: int, shared_seed: int, dim: int, amplitude: float = 1.0
) -> PerturbationVector:
    """Derive the per-epoch mask that only ``client`` and the server know.

    HMAC-SHA256 keyed by the pairwise shared seed picks the PCG64 state, so
    both ends compute the same vector without exchanging it.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if amplitude == 0:
        logger.warning("epsilon amplitude is 0: client %s is unmasked in epoch %s", client, epoch)
    rng = np.random.Generator(np.random.PCG64(_prf_seed(shared_seed, client, epoch)))
    return PerturbationVector(client, epoch, amplitude * rng.uniform(-1.0, 1.0, dim))


def run_group_round(
    group: Group,
    gradients: dict,
    epsilons: dict,
    seed: int,
    shares: GradientShares | None = None,
) -> GroupRoundResult:
    """Execute one group's exchange and return the masked upload plus all traffic.

    ``shares`` overrides A's random split (used by the indistinguishability tests).
    """
    a, b, c = group.members
    for who in group.members:
        if who not in gradients:
            raise KeyError(f"missing gradient for client {who}")
        if who not in epsilons:
            raise KeyError(f"missing perturbation vector for client {who}")
    dim = np.asarray(gradients[a]).size
    g = {k: as_gradient(gradients[k], dim) for k in group.members}
    eps = {k: as_gradient(_eps_values(epsilons[k]), dim) for k in group.members}

    if shares is None:
        shares = split_gradient(g[a], seed)
    elif shares.g1.size != dim or shares.g2.size != dim:
        raise ValueError("share dimension mismatch")
    elif not np.allclose(shares.g1 + shares.g2, g[a], rtol=0.0, atol=1e-9 * max(1.0, float(np.max(np.abs(g[a]))))):
        raise ValueError("shares do not sum to the splitter's gradient")

    to_c = shares.g1
    to_b = shares.g2 + eps[a]
    relay = to_b + g[b] + eps[b]
    masked = to_c + relay + g[c] + eps[c]

    views = {k: ParticipantView(k, group.epoch) for k in group.members}
    views[SERVER] = ParticipantView(SERVER, group.epoch)
    views[b].record(MASKED_SHARE2, to_b)
    views[c].record(SHARE1, to_c)
    views[c].record(RELAY_SUM, relay)
    views[SERVER].record(GROUP_SUM, masked)

    escrow = [
        EscrowMessage(group.epoch, group.index, a, b, MASKED_SHARE2, to_b.copy()),
        EscrowMessage(group.epoch, group.index, a, c, SHARE1, to_c.copy()),
        EscrowMessage(group.epoch, group.index, b, c, RELAY_SUM, relay.copy()),
    ]
    return GroupRoundResult(group, masked, [views[k] for k in (a, b, c, SERVER)], escrow)


def _eps_values(e):
    return e.values if isinstance(e, PerturbationVector) else e


def server_recover(group_sum_masked, epsilons) -> np.ndarray:
    masked = as_gradient(group_sum_masked)
    total = masked.copy()
    for e in epsilons:
        total -= as_gradient(_eps_values(e), masked.size)
    return total


def aggregate_global(recovered, member_count: int) -> np.ndarray:
    """Per-client mean of the recovered group sums."""
    recovered = list(recovered)
    if not recovered:
        raise ValueError("no group sums to aggregate")
    if member_count != 3 * len(recovered):
        raise ValueError(f"member_count {member_count} != 3 x {len(recovered)} groups")
    return np.sum(recovered, axis=0) / member_count
