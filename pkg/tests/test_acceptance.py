"""Acceptance suite: one test (or a small family) per numbered criterion.

Each criterion prints a single PASS/FAIL line via the conftest summary hook.
"""

import time

import numpy as np
import pytest

from smtfl.adversary import binary_logistic_gradient, invert_linear_gradient, invert_model_update
from smtfl.config import ScenarioConfig
from smtfl.learning import (
    LOGISTIC,
    Dataset,
    apply_update,
    init_model,
    local_train,
    make_blobs,
    partition_dataset,
    PartitionSpec,
)
from smtfl.metrics import emit_metrics, run_scenario
from smtfl.protocol import (
    GROUP_SUM,
    MASKED_SHARE2,
    RELAY_SUM,
    SERVER,
    SHARE1,
    GradientShares,
    Group,
    aggregate_global,
    form_groups,
    negotiate_epsilon,
    run_group_round,
    server_recover,
)
from smtfl.recovery import EpochRecord, UnlearnRequest, epoch_update, reconstruct_gradient, replay_corrected
from smtfl.simulation import Simulator, build_data, detection_rates
from smtfl.vault import (
    DEFAULT_PRIME,
    EscrowStore,
    ThresholdPolicy,
    encrypt_record,
    quorum_decrypt,
    recover_secret,
    setup_keys,
    split_secret,
)

DESK = ScenarioConfig()  # m=30, 25% random-update, sigma 1, blobs, logistic, 30 epochs, tau 0.01, bound -6


def report(number, line):
    print(f"[criterion {number}] {line}")


# -- 1. aggregation transparency ---------------------------------------------------------


@pytest.mark.acceptance(1, "protocol-path global update equals raw FedAvg within 1e-9 (100 scenarios, < 10 s)")
def test_criterion_1_aggregation_transparency():
    rng = np.random.default_rng(20_241)
    t0 = time.perf_counter()
    worst = 0.0
    for trial in range(100):
        m = int(rng.integers(6, 31))
        dim = int(rng.integers(10, 201))
        scale = 10.0 ** rng.uniform(-3, 3)
        raw = {c: scale * rng.normal(size=dim) for c in range(m)}
        groups, excluded = form_groups(range(m), trial, seed=trial)
        shared = int(rng.integers(2**62))
        sums = []
        for g in groups:
            eps = {c: negotiate_epsilon(c, trial, shared, dim) for c in g.members}
            res = run_group_round(g, raw, eps, seed=trial * 1000 + g.index)
            # the server derives the masks on its own side
            server_eps = [negotiate_epsilon(c, trial, shared, dim) for c in g.members]
            sums.append(server_recover(res.masked_sum, server_eps))
        protocol = aggregate_global(sums, 3 * len(groups))
        grouped = [c for g in groups for c in g.members]
        assert sorted(grouped + excluded) == list(range(m))
        fedavg = np.mean([raw[c] for c in grouped], axis=0)
        err = float(np.max(np.abs(protocol - fedavg)))
        worst = max(worst, err)
        assert err <= 1e-9, f"trial {trial}: m={m} dim={dim} err={err:.3e}"
    elapsed = time.perf_counter() - t0
    report(1, f"max |protocol - fedavg| = {worst:.2e} over 100 scenarios in {elapsed:.2f}s")
    assert elapsed < 10.0


# -- 2. Shamir correctness and secrecy -------------------------------------------------------


@pytest.mark.acceptance(2, "Shamir roundtrip over 1000 cases and t-1 share secrecy at p=101 (< 5 s)")
def test_criterion_2_shamir():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    for case in range(1000):
        m = int(rng.integers(2, 40))
        t = int(rng.integers(1, m))
        policy = ThresholdPolicy(m, t, DEFAULT_PRIME)
        secret = int(rng.integers(0, 2**61 - 1))
        points = [int(x) for x in rng.choice(np.arange(1, 10_000), size=m - 1, replace=False)]
        shares = split_secret(secret, policy, points, seed=case)
        pick = [shares[i] for i in rng.permutation(m - 1)[:t]]
        assert recover_secret(pick, policy) == secret, f"case {case}"

    # exhaustive feasibility at p=101: every candidate secret stays consistent with t-1 shares,
    # and by exactly the same number of polynomials
    p = 101
    cand = np.arange(p)
    for t in (2, 3):
        policy = ThresholdPolicy(6, t, p)
        for trial in range(10):
            secret = int(rng.integers(0, p))
            points = [int(x) for x in rng.choice(np.arange(1, p), size=5, replace=False)]
            known = split_secret(secret, policy, points, seed=trial)[: t - 1]
            # enumerate all (S, a_1, ..., a_{t-1}) and keep those matching every known share
            coeffs = np.meshgrid(cand, *([cand] * (t - 1)), indexing="ij")
            ok = np.ones(coeffs[0].shape, dtype=bool)
            for sh in known:
                y = np.zeros_like(coeffs[0])
                for k in reversed(range(t)):
                    y = (y * sh.x + coeffs[k]) % p
                ok &= y == sh.y
            per_secret = ok.reshape(p, -1).sum(axis=1)
            assert np.all(per_secret == per_secret[0]) and per_secret[0] >= 1, f"t={t} trial {trial}"
    elapsed = time.perf_counter() - t0
    report(2, f"1000/1000 roundtrips; all 101 secrets feasible for t=2,3; {elapsed:.2f}s")
    assert elapsed < 5.0


# -- 3. view indistinguishability --------------------------------------------------------------


def _dyadic(rng, dim):
    # integers over 2^8: every sum and difference below is exact in float64
    return rng.integers(-2**12, 2**12, size=dim) / 256.0


def _views(group, grads, eps, shares):
    res = run_group_round(group, grads, eps, seed=0, shares=shares)
    return {v.observer: v.to_bytes() for v in res.views}


@pytest.mark.acceptance(3, "compensating input pairs give byte-identical server, aggregator and relay views (100/100)")
def test_criterion_3_view_indistinguishability():
    rng = np.random.default_rng(3)
    dim = 16
    group = Group((10, 11, 12), epoch=4, index=0)
    a, b, c = group.members
    hits = {"server": 0, "aggregator": 0, "relay_share1": 0, "relay_eps": 0, "control": 0}
    for _ in range(100):
        g = {k: _dyadic(rng, dim) for k in group.members}
        e = {k: _dyadic(rng, dim) for k in group.members}
        g1 = _dyadic(rng, dim)
        base_shares = GradientShares(g1, g[a] - g1)
        delta = _dyadic(rng, dim)
        assert np.any(delta != 0)
        base = _views(group, g, e, base_shares)

        # server: (g_A + d, g_B - d), A's first share absorbs d
        g2 = {**g, a: g[a] + delta, b: g[b] - delta}
        v = _views(group, g2, e, GradientShares(g1 + delta, base_shares.g2))
        hits["server"] += v[SERVER] == base[SERVER]

        # aggregator: g_A + d, carried by the second share and offset by A's mask
        g3 = {**g, a: g[a] + delta}
        e3 = {**e, a: e[a] - delta}
        v = _views(group, g3, e3, GradientShares(g1, base_shares.g2 + delta))
        hits["aggregator"] += v[c] == base[c]

        # relay: g_A + d through the first share, or through the second with the mask offset
        v = _views(group, g3, e, GradientShares(g1 + delta, base_shares.g2))
        hits["relay_share1"] += v[b] == base[b]
        v = _views(group, g3, e3, GradientShares(g1, base_shares.g2 + delta))
        hits["relay_eps"] += v[b] == base[b]

        # control: the same shift without the mask offset is visible to the aggregator
        v = _views(group, g3, e, GradientShares(g1, base_shares.g2 + delta))
        hits["control"] += v[c] != base[c]

        # tags are exactly what each role should see
        res = run_group_round(group, g, e, seed=0, shares=base_shares)
        tags = {vw.observer: [t for t, _ in vw.observed] for vw in res.views}
        assert tags == {a: [], b: [MASKED_SHARE2], c: [SHARE1, RELAY_SUM], SERVER: [GROUP_SUM]}
    report(3, " ".join(f"{k}={n}/100" for k, n in hits.items()))
    assert all(n == 100 for n in hits.values()), hits


# -- 4. inversion defeat ------------------------------------------------------------------


@pytest.mark.acceptance(4, "inversion exact on raw updates (< 1e-9), defeated on all four protocol messages (>= 100 seeds)")
def test_criterion_4_inversion_defeat():
    n_seeds = 200
    worst_raw, closest = 0.0, np.inf
    failures = {SHARE1: 0, MASKED_SHARE2: 0, RELAY_SUM: 0, GROUP_SUM: 0}
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(5, 60))
        w, bias = rng.normal(size=d), float(rng.normal())
        xs = {k: rng.normal(size=d) for k in (0, 1, 2)}
        ys = {k: int(rng.integers(0, 2)) for k in (0, 1, 2)}
        grads = {}
        for k in (0, 1, 2):
            g_w, g_b = binary_logistic_gradient(w, bias, xs[k], ys[k])
            raw = invert_linear_gradient(g_w, g_b, truth=xs[k])
            assert raw.ok and raw.residual < 1e-9
            worst_raw = max(worst_raw, raw.residual)
            grads[k] = np.append(g_w, g_b)

        group = Group((0, 1, 2), seed)
        eps = {k: negotiate_epsilon(k, seed, 99, d + 1) for k in (0, 1, 2)}
        res = run_group_round(group, grads, eps, seed)
        for view in res.views:
            for tag, msg in view.observed:
                inv = invert_linear_gradient(msg[:d], float(msg[d]))
                for k in (0, 1, 2):
                    if not inv.ok:
                        continue
                    r = float(np.linalg.norm(inv.reconstructed - xs[k])) / float(np.linalg.norm(xs[k]))
                    closest = min(closest, r)
                    assert r > 0.1, f"seed {seed}: {tag} leaks client {k} (relative residual {r:.3f})"
                failures[tag] += 1

    # the same oracle on a real multi-class single-sample local update
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        model = init_model(LOGISTIC, 12, 5, seed=seed, scale=0.5)
        x = rng.normal(size=12)
        upd = local_train(model, Dataset(x[None, :], np.array([seed % 5]), 5), 1, 1, 0.1, seed)
        res = invert_model_update(model, upd, truth=x)
        assert res.residual < 1e-9
        worst_raw = max(worst_raw, res.residual)

    report(4, f"raw residual max {worst_raw:.1e}; protocol messages defeated {failures} "
              f"(closest relative residual {closest:.2f})")
    assert all(n == n_seeds for n in failures.values())


# -- 5. detection quality ----------------------------------------------------------------------


@pytest.mark.acceptance(5, "desk scenario over 20 seeds: localization >= 0.95, honest false positives <= 0.05 (< 2 min)")
def test_criterion_5_detection_quality():
    t0 = time.perf_counter()
    detected = malicious_total = false_pos = honest_total = 0
    per_seed = []
    for seed in range(20):
        config = DESK.replace(seed=seed, paired=False)
        data = build_data(config)
        trace = Simulator(config, data).run()
        acc_loc, rate_false = detection_rates(data.malicious, trace.evicted, config.m)
        per_seed.append((acc_loc, rate_false))
        detected += len(set(data.malicious) & set(trace.evicted))
        malicious_total += len(data.malicious)
        false_pos += len(set(trace.evicted) - set(data.malicious))
        honest_total += config.m - len(data.malicious)
    elapsed = time.perf_counter() - t0
    acc_loc, rate_false = detected / malicious_total, false_pos / honest_total
    report(5, f"acc_loc={acc_loc:.3f} rate_false={rate_false:.3f} "
              f"(worst seed acc_loc {min(a for a, _ in per_seed):.3f}) in {elapsed:.1f}s")
    assert acc_loc >= 0.95
    assert rate_false <= 0.05
    assert elapsed < 120.0


# -- 6. recovery quality -----------------------------------------------------------------


@pytest.mark.acceptance(6, "defended within 3 points of no-attack at 25%; undefended loses >= 10 points at 45% (10 seeds)")
def test_criterion_6_recovery_quality():
    gaps, losses = [], []
    for seed in range(10):
        m25 = run_scenario(DESK.replace(seed=seed, malicious_fraction=0.25))
        gaps.append(abs(m25.acc_defended - m25.acc_no_attack))
        m45 = run_scenario(DESK.replace(seed=seed, malicious_fraction=0.45))
        losses.append(m45.acc_no_attack - m45.acc_attacked)
    report(6, f"25%: mean |defended - no_attack| {np.mean(gaps):.4f} (max {max(gaps):.4f}); "
              f"45%: mean loss undefended {np.mean(losses):.3f} (min {min(losses):.3f})")
    assert np.mean(gaps) <= 0.03
    assert np.mean(losses) >= 0.10


# -- 7. unlearning exactness ------------------------------------------------------------------


def _instrumented_run(n_epochs, malicious):
    """Four clients (one group plus one sitting out per epoch), every upload accepted.

    Returns everything the server kept plus the harness's ground truth.
    """
    m, lr = 4, 0.1
    data = make_blobs(400, 6, 3, center_seed=1, sample_seed=2)
    shards = partition_dataset(data, PartitionSpec(m, 0.5, 3))
    policy = ThresholdPolicy(m, 2, DEFAULT_PRIME)
    keys = setup_keys(range(m), policy, seed=4)
    store = EscrowStore()
    initial = init_model(LOGISTIC, 6, 3, seed=5)
    model, history, truth, grouped = initial, [], {}, {}
    for epoch in range(n_epochs):
        (group,), excluded = form_groups(range(m), epoch, seed=6)
        grouped[epoch] = group.members
        grads = {}
        for c in group.members:
            g = local_train(model, shards[c], 1, 16, lr, seed=100 * epoch + c)
            grads[c] = -3.0 * g if c == malicious else g
        truth.update({(c, epoch): v for c, v in grads.items()})
        eps = {c: negotiate_epsilon(c, epoch, 77 + c, model.dim) for c in group.members}
        res = run_group_round(group, grads, eps, seed=epoch)
        for msg in res.escrow:
            store.store(encrypt_record(msg.vector, keys.secrets[msg.receiver], msg.receiver,
                                       msg.epoch, msg.group, msg.sender))
        total = server_recover(res.masked_sum, eps.values())
        update = epoch_update([total], 0, model.dim)
        history.append(EpochRecord(epoch, [group], [total], [res.masked_sum], update))
        model = apply_update(model, update)
    return dict(initial=initial, history=history, store=store, keys=keys, policy=policy,
                truth=truth, grouped=grouped, shards=shards, lr=lr, final=model)


def _recover_request(run, target):
    providers = {c: run["keys"].provider(c) for c in range(4) if c != target}  # target offline
    decrypted = quorum_decrypt(run["store"], target, None, providers, run["policy"])
    assert decrypted.complete
    gradients = {}
    for rec in run["history"]:
        if target in rec.groups[0].members:
            eps = negotiate_epsilon(target, rec.epoch, 77 + target, rec.update.size)
            g = reconstruct_gradient(target, rec, decrypted, eps)
            assert g is not None
            gradients[(target, rec.epoch)] = g
    return UnlearnRequest(frozenset({target}), gradients)


@pytest.mark.acceptance(7, "escrow-recovered replay equals the clean-retrain oracle within 1e-9")
@pytest.mark.parametrize("n_epochs", [1, 12])
def test_criterion_7_unlearning_exactness(n_epochs):
    (first,), _ = form_groups(range(4), 0, seed=6)
    target = first.aggregator  # grouped in epoch 0, so even the 1-epoch run is attacked
    run = _instrumented_run(n_epochs, malicious=target)
    request = _recover_request(run, target)
    for key, g in request.gradients.items():
        np.testing.assert_allclose(g, run["truth"][key], atol=1e-9)
    corrected = replay_corrected(run["initial"], run["history"], request)

    # oracle: per epoch, the plain mean of the honest grouped clients' uploads
    oracle = run["initial"]
    for epoch in range(n_epochs):
        honest = [c for c in run["grouped"][epoch] if c != target]
        oracle = apply_update(oracle, np.mean([run["truth"][(c, epoch)] for c in honest], axis=0))
    err = float(np.max(np.abs(corrected.params - oracle.params)))

    if n_epochs == 1:
        # a single epoch has no trajectory effect, so this is also a true retrain from scratch
        honest = [c for c in run["grouped"][0] if c != target]
        retrain = apply_update(run["initial"], np.mean(
            [local_train(run["initial"], run["shards"][c], 1, 16, run["lr"], seed=c) for c in honest], axis=0))
        err = max(err, float(np.max(np.abs(corrected.params - retrain.params))))
    report(7, f"{n_epochs} epoch(s): max |replay - oracle| = {err:.2e}")
    assert err <= 1e-9
    assert float(np.max(np.abs(run["final"].params - oracle.params))) > 1e-3  # the attack mattered


# -- 8. threshold-sweep trend ------------------------------------------------------------------


@pytest.mark.acceptance(8, "mean epochs-until-last-eviction non-decreasing in |bound| from 4 to 9 (10 seeds)")
def test_criterion_8_threshold_trend():
    means = []
    for bound in range(4, 10):
        lasts = []
        for seed in range(10):
            config = DESK.replace(seed=seed, thre_eva=bound, paired=False)
            evicted = Simulator(config).run().evicted
            # no eviction inside the run is censored at the run length
            lasts.append(max(evicted.values()) if evicted else config.epochs_global)
        means.append(float(np.mean(lasts)))
    report(8, "mean last-eviction epoch by bound 4..9: " + ", ".join(f"{x:.1f}" for x in means))
    assert all(b >= a for a, b in zip(means, means[1:])), means


# -- 9. determinism ------------------------------------------------------------------------------


@pytest.mark.acceptance(9, "rerun and 8-worker run give bitwise-identical CSV/JSON and store files")
def test_criterion_9_determinism(tmp_path):
    files = ("epochs.csv", "summary.json", "escrow.smtf", "history.smtf", "shares.json")
    outputs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 8)):
        out = tmp_path / name
        config = DESK.replace(seed=13, workers=workers)
        emit_metrics(run_scenario(config, out), out, figures=False)
        outputs.append({f: (out / f).read_bytes() for f in files})
    same = [f for f in files if outputs[0][f] == outputs[1][f] == outputs[2][f]]
    report(9, f"identical across rerun and workers=8: {len(same)}/{len(files)} files")
    assert same == list(files)
