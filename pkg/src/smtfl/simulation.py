"""End-to-end scenario engine.

One epoch: poisoned local training -> grouping -> masked group rounds (with
escrow) -> server unmasking -> sequential probing -> scoring -> eviction ->
quorum decryption and corrected replay for anyone evicted.

All randomness is drawn from seeds derived by hashing (master seed, label,
indices), so the thread pool used for training and group rounds cannot change
any result.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adversary import HONEST, RANDOM_UPDATE, AdversaryKind
from .config import ScenarioConfig
from .detector import EvaluationLedger, eviction_sweep, probe_and_apply, record_scores
from .learning import (
    Dataset,
    Model,
    PartitionSpec,
    apply_update,
    evaluate,
    init_model,
    load_image_file,
    local_train,
    make_blobs,
    partition_dataset,
)
from .protocol import (
    EscrowMessage,
    ParticipantView,
    form_groups,
    negotiate_epsilon,
    run_group_round,
    server_recover,
)
from .recovery import EpochRecord, UnlearnRequest, epoch_update, reconstruct_gradient, replay_corrected
from .vault import EscrowStore, KeyDirectory, encrypt_record, quorum_decrypt, setup_keys

logger = logging.getLogger(__name__)


def sub_seed(master: int, *labels) -> int:
    """Stable 63-bit seed for (master, *labels)."""
    text = "|".join(str(x) for x in (master, *labels)).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little") >> 1


@dataclass
class ScenarioData:
    train: Dataset
    validation: Dataset
    test: Dataset
    shards: list[Dataset]
    malicious: frozenset


def build_data(config: ScenarioConfig) -> ScenarioData:
    s = config.seed
    if config.dataset == "blobs":
        task = sub_seed(s, "task")
        blobs = dict(
            n_features=config.n_features,
            n_classes=config.n_classes,
            noise=config.blob_noise,
            center_seed=task,
            spread=config.blob_spread,
        )
        train = make_blobs(config.n_samples, sample_seed=sub_seed(s, "train"), **blobs)
        val = make_blobs(config.validation_size, sample_seed=sub_seed(s, "validation"), **blobs)
        test = make_blobs(config.test_size, sample_seed=sub_seed(s, "test"), **blobs)
    else:
        full = load_image_file(config.dataset)
        order = np.random.default_rng(sub_seed(s, "file-split")).permutation(len(full))
        nv, nt = config.validation_size, config.test_size
        if len(full) < nv + nt + config.m:
            raise ValueError(f"{config.dataset}: too few samples for validation/test/clients")
        val, test, train = full.subset(order[:nv]), full.subset(order[nv : nv + nt]), full.subset(order[nv + nt :])
    shards = partition_dataset(train, PartitionSpec(config.m, config.rate_iid, sub_seed(s, "partition")))
    rng = np.random.default_rng(sub_seed(s, "malicious"))
    malicious = frozenset(int(c) for c in rng.choice(config.m, config.n_malicious, replace=False))
    return ScenarioData(train, val, test, shards, malicious)


@dataclass
class EpochMetrics:
    epoch: int
    acc: float
    accepted_groups: int
    rejected_groups: int
    evictions: list[int]
    active_clients: int
    excluded_clients: int

    def csv_row(self) -> list:
        return [
            self.epoch,
            repr(self.acc),
            self.accepted_groups,
            self.rejected_groups,
            ";".join(str(c) for c in self.evictions),
            self.active_clients,
        ]


@dataclass
class Timings:
    gks: list[float] = field(default_factory=list)
    enc: list[float] = field(default_factory=list)
    dec: list[float] = field(default_factory=list)
    phases: dict[str, float] = field(default_factory=dict)

    def add_phase(self, name: str, seconds: float) -> None:
        self.phases[name] = self.phases.get(name, 0.0) + seconds

    def summary(self) -> dict:
        med = lambda xs: float(np.median(xs)) if xs else None  # noqa: E731
        return {
            "T_gks": med(self.gks),
            "T_enc": med(self.enc),
            "T_dec": med(self.dec),
            "phases": dict(sorted(self.phases.items())),
        }


@dataclass
class RunTrace:
    """Everything one simulated run produced."""

    mode: str
    epochs: list[EpochMetrics]
    initial: Model
    final: Model
    final_acc: float
    ledger: EvaluationLedger | None = None
    history: list[EpochRecord] = field(default_factory=list)
    store: EscrowStore | None = None
    keys: KeyDirectory | None = None
    request: UnlearnRequest | None = None
    timings: Timings = field(default_factory=Timings)
    views: list[ParticipantView] = field(default_factory=list)
    escrow_log: list[EscrowMessage] = field(default_factory=list)
    raw_gradients: dict = field(default_factory=dict)  # (client, epoch) -> uploaded vector
    score_events: int = 0
    minus_one_events: int = 0

    @property
    def evicted(self) -> dict[int, int]:
        return dict(self.ledger.evicted) if self.ledger else {}


class Simulator:
    """Runs one scenario variant.

    ``defend=False`` is plain FedAvg over the grouped clients (the undefended
    baseline); ``attack=False`` turns every client honest.
    """

    def __init__(
        self,
        config: ScenarioConfig,
        data: ScenarioData | None = None,
        *,
        defend: bool = True,
        attack: bool = True,
        store_path=None,
        keep_traffic: bool = False,
    ):
        self.config = config
        self.data = data if data is not None else build_data(config)
        self.defend = defend
        self.attack = attack
        self.store_path = store_path
        self.keep_traffic = keep_traffic
        self.kind = config.adversary_kind if attack else AdversaryKind(HONEST)
        self.malicious = self.data.malicious if attack and self.kind.variant != HONEST else frozenset()
        seed = config.seed
        self.shards = [
            self.kind.poison_data(sh, sub_seed(seed, "flip", i)) if i in self.malicious else sh
            for i, sh in enumerate(self.data.shards)
        ]
        self.initial = init_model(
            config.model,
            self.data.train.n_features,
            self.data.train.n_classes,
            config.n_hidden,
            seed=sub_seed(seed, "init"),
        )

    # -- per-epoch pieces ----------------------------------------------------

    def _map(self, fn, items):
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                return list(pool.map(fn, items))
        return [fn(x) for x in items]

    def _attacks(self, client: int, epoch: int) -> bool:
        if client not in self.malicious:
            return False
        rate = self.config.attack_rate
        if rate >= 1.0:
            return True
        return np.random.default_rng(sub_seed(self.config.seed, "attack", epoch, client)).random() < rate

    def local_gradients(self, model: Model, clients, epoch: int) -> dict[int, np.ndarray]:
        cfg, seed = self.config, self.config.seed

        def one(c):
            attacking = self._attacks(c, epoch)
            if attacking and self.kind.variant == RANDOM_UPDATE:
                g = np.zeros(model.dim)  # replaced wholesale below, training would be wasted
            else:
                shard = self.shards[c] if attacking else self.data.shards[c]
                g = local_train(
                    model, shard, cfg.epochs_local, cfg.batch_size, cfg.learning_rate,
                    sub_seed(seed, "train", epoch, c),
                )
            if attacking:
                g = self.kind.poison_gradient(g, sub_seed(seed, "noise", epoch, c))
            return c, g

        return dict(self._map(one, sorted(clients)))

    def epsilon(self, client: int, epoch: int, dim: int):
        return negotiate_epsilon(
            client, epoch, sub_seed(self.config.seed, "eps-key", client), dim,
            self.config.epsilon_amplitude,
        )

    # -- main loop -----------------------------------------------------------

    def run(self) -> RunTrace:
        if not self.defend:
            return self._run_fedavg()
        return self._run_smtfl()

    def _run_fedavg(self) -> RunTrace:
        cfg = self.config
        model = self.initial
        active = list(range(cfg.m))
        epochs = []
        for epoch in range(cfg.epochs_global):
            groups, excluded = form_groups(active, epoch, sub_seed(cfg.seed, "groups"))
            members = [c for g in groups for c in g.members]
            if members:
                grads = self.local_gradients(model, members, epoch)
                update = np.sum([grads[c] for c in members], axis=0) / len(members)
                model = apply_update(model, update)
            epochs.append(
                EpochMetrics(epoch, evaluate(model, self.data.test), len(groups), 0, [], len(active), len(excluded))
            )
        return RunTrace("fedavg", epochs, self.initial, model, evaluate(model, self.data.test))

    def _run_smtfl(self) -> RunTrace:
        cfg, seed = self.config, self.config.seed
        policy = cfg.policy
        clients = list(range(cfg.m))
        timings = Timings()

        t0 = time.perf_counter()
        keys = setup_keys(clients, policy, sub_seed(seed, "keys"))
        timings.gks.append(keys.gen_seconds)
        timings.add_phase("key_setup", time.perf_counter() - t0)
        store = EscrowStore(self.store_path, policy.p)
        ledger = EvaluationLedger(cfg.tau, cfg.eviction_bound)
        ledger.register(clients)
        trace = RunTrace("smtfl", [], self.initial, self.initial, 0.0, ledger, [], store, keys, timings=timings)
        request = UnlearnRequest(frozenset())
        flagged: list[tuple[int, ...]] = []

        model = self.initial
        active = list(clients)
        dim = model.dim
        nonce_seed = sub_seed(seed, "nonce")
        for epoch in range(cfg.epochs_global):
            groups, excluded = form_groups(
                active, epoch, sub_seed(seed, "groups"), scatter=flagged if cfg.scatter_flagged else None
            )
            members = [c for g in groups for c in g.members]

            t0 = time.perf_counter()
            grads = self.local_gradients(model, members, epoch) if members else {}
            timings.add_phase("local_train", time.perf_counter() - t0)
            if self.keep_traffic:
                trace.raw_gradients.update({(c, epoch): g for c, g in grads.items()})

            t0 = time.perf_counter()
            client_eps = {c: self.epsilon(c, epoch, dim) for c in members}
            rounds = self._map(
                lambda g: run_group_round(g, grads, client_eps, sub_seed(seed, "split", epoch, g.index)),
                groups,
            )
            timings.add_phase("group_rounds", time.perf_counter() - t0)

            t0 = time.perf_counter()
            for r in rounds:
                for msg in r.escrow:
                    te = time.perf_counter()
                    rec = encrypt_record(
                        msg.vector, keys.secrets[msg.receiver], msg.receiver, msg.epoch, msg.group,
                        msg.sender, nonce_seed,
                    )
                    timings.enc.append(time.perf_counter() - te)
                    store.store(rec)
                if self.keep_traffic:
                    trace.views.extend(r.views)
                    trace.escrow_log.extend(r.escrow)
            timings.add_phase("escrow", time.perf_counter() - t0)

            # server side: derive masks independently, unmask, probe in group order
            t0 = time.perf_counter()
            base, current = model, model
            n_grouped = len(members)
            accepted, sums, masked, rejected = [], [], [], []
            for r in rounds:
                eps = [self.epsilon(c, epoch, dim) for c in r.group.members]
                recovered = server_recover(r.masked_sum, eps)
                current_next, outcome = probe_and_apply(current, recovered, n_grouped, self.data.validation, cfg.tau)
                record_scores(ledger, r.group, outcome.score, epoch, outcome.post_acc - outcome.pre_acc)
                trace.score_events += 1
                if outcome.score == -1:
                    trace.minus_one_events += 1
                    flagged.append(r.group.members)
                    rejected.append(r.group)
                    continue
                current = current_next
                accepted.append(r.group)
                sums.append(recovered)
                masked.append(r.masked_sum)
            update = epoch_update(sums, len(rejected), dim)
            model = apply_update(base, update)
            trace.history.append(EpochRecord(epoch, accepted, sums, masked, update, rejected))
            timings.add_phase("probe", time.perf_counter() - t0)

            evicted = eviction_sweep(ledger, epoch)
            if evicted:
                active = [c for c in active if c not in evicted]
                t0 = time.perf_counter()
                request = self._unlearn(trace, request, evicted, active, epoch)
                model = replay_corrected(self.initial, trace.history, request)
                timings.add_phase("unlearn", time.perf_counter() - t0)

            trace.epochs.append(
                EpochMetrics(
                    epoch, evaluate(model, self.data.test), len(accepted), len(rejected),
                    evicted, len(active), len(excluded),
                )
            )

        trace.final = model
        trace.final_acc = evaluate(model, self.data.test)
        trace.request = request
        return trace

    def _unlearn(self, trace: RunTrace, request: UnlearnRequest, evicted, online, epoch: int) -> UnlearnRequest:
        """Recover each evictee's accepted uploads through the escrow quorum."""
        cfg = self.config
        providers = {c: trace.keys.provider(c) for c in online}
        gradients = dict(request.gradients)
        dropped = set(request.dropped)
        for target in evicted:
            result = quorum_decrypt(trace.store, target, range(0, epoch + 1), providers, cfg.policy)
            trace.timings.dec.extend(result.decrypt_seconds)
            for rec in trace.history:
                found = rec.group_of(target)
                if found is None:
                    continue
                g = None
                if rec.epoch not in result.blocked_epochs:
                    g = reconstruct_gradient(target, rec, result, self.epsilon(target, rec.epoch, rec.update.size))
                if g is None:
                    logger.warning("client %s epoch %s: escrow incomplete, dropping group %s",
                                   target, rec.epoch, found[1].index)
                    dropped.add((rec.epoch, found[1].index))
                else:
                    gradients[(target, rec.epoch)] = g
        return UnlearnRequest(request.malicious | frozenset(evicted), gradients, dict(request.weights), dropped)


def detection_rates(malicious, evicted, m: int) -> tuple[float, float]:
    """(share of malicious clients evicted, share of honest clients evicted)."""
    malicious = set(malicious)
    evicted = set(evicted)
    honest = m - len(malicious)
    acc_loc = len(malicious & evicted) / len(malicious) if malicious else 1.0
    rate_false = len(evicted - malicious) / honest if honest else 0.0
    return acc_loc, rate_false
