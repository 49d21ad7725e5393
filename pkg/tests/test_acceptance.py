"""The eleven acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line verdict (see ``acceptance_report``); the lines
are printed together at the end of the pytest run. Run on its own with

    pytest tests/test_acceptance.py -v
"""
import dataclasses
import time
from pathlib import Path

import numpy as np

from fedsq import cli, dualcopy, fedproto, nncore
from fedsq import data as D
from fedsq.calibrate import Schedule, TrainConfig, obtain_schedule
from fedsq.fedproto import FederationConfig, aggregate, aggregation_weights, run_federation
from fedsq.partition import dirichlet_split, heterogeneity_index, iid_split

from acceptance_report import record
from conftest import conv_arch, dense_arch, flat, unflat
from oracles import central_difference, relative_error, weighted_mean_bruteforce
from test_calibrate import solved_task

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def blobs(n, k, shape, seed, **kw):
    return D.generate(D.SyntheticSpec(n_samples=n, n_classes=k, input_shape=shape, seed=seed, **kw))


# ---------------------------------------------------------------------------
# 1. gradient oracle
# ---------------------------------------------------------------------------


def _fd_errors(loss_of, params, layers, analytic, count, rng):
    base = flat(params, layers)
    grad = flat(analytic, layers)
    picks = rng.choice(base.size, size=min(count, base.size), replace=False)
    f = lambda v: loss_of(unflat(params, layers, v))  # noqa: E731
    return [relative_error(grad[i], central_difference(f, base, i, eps=1e-5)) for i in picks]


def test_criterion_01_gradient_oracle():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = {"dense": [], "conv": [], "gated": []}

    arch = dense_arch()
    for _ in range(3):
        p = nncore.init_params(arch, rng)
        x, y = rng.normal(size=(8, 4)), rng.integers(0, 3, 8)
        _, g = nncore.backward(arch, p, x, y)
        loss_of = lambda q: nncore.loss_ce(nncore.forward(arch, q, x)[0], y)  # noqa: E731
        errs["dense"] += _fd_errors(loss_of, p, arch.param_layers, g, 40, rng)

    carch = conv_arch()
    for _ in range(2):
        p = nncore.init_params(carch, rng)
        x, y = rng.normal(size=(4, 2, 6, 6)), rng.integers(0, 3, 4)
        _, g = nncore.backward(carch, p, x, y)
        loss_of = lambda q: nncore.loss_ce(nncore.forward(carch, q, x)[0], y)  # noqa: E731
        errs["conv"] += _fd_errors(loss_of, p, (0, 1), g, 60, rng)

    for arch_, shape in ((dense_arch(), (8, 4)), (conv_arch(), (4, 2, 6, 6))):
        sk = nncore.init_params(arch_, rng)
        model = dualcopy.make_dual_copy(sk, Schedule.all_trainable(len(arch_.param_layers)))
        model = model.with_qk(nncore.init_params(arch_, rng))
        x, y = rng.normal(size=shape), rng.integers(0, 3, shape[0])
        masks = dualcopy.compute_masks(model, x)
        _, g = dualcopy.gated_backward(model, masks, x, y)
        loss_of = lambda q: nncore.loss_ce(dualcopy.gated_forward(model.with_qk(q), masks, x), y)  # noqa: E731
        errs["gated"] += _fd_errors(loss_of, model.qk, arch_.param_layers, g, 60, rng)

    elapsed = time.perf_counter() - start
    ok = all(len(e) >= 100 and max(e) <= 1e-4 for e in errs.values()) and elapsed <= 30
    detail = ", ".join(f"{k} n={len(e)} max rel {max(e):.1e}" for k, e in errs.items()) + f", {elapsed:.1f}s"
    assert record(1, "finite-difference gradients", ok, detail)


# ---------------------------------------------------------------------------
# 2. ReLU equivalence
# ---------------------------------------------------------------------------


def test_criterion_02_relu_equivalence():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(100):
        if i % 2:
            arch, x = conv_arch(), rng.normal(size=(int(rng.integers(1, 6)), 2, 6, 6))
        else:
            hidden = list(rng.integers(2, 12, size=int(rng.integers(1, 4))))
            arch = nncore.mlp(5, hidden, 4)
            x = rng.normal(size=(int(rng.integers(1, 20)), 5)) * rng.uniform(0.1, 10)
        w = nncore.init_params(arch, rng)
        model = dualcopy.make_dual_copy(w, Schedule.all_trainable(len(arch.param_layers)))
        gated = dualcopy.gated_forward(model, dualcopy.compute_masks(model, x), x)
        worst = max(worst, float(np.max(np.abs(gated - nncore.forward(arch, w, x)[0]))))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed <= 10
    assert record(2, "gated forward equals ReLU forward", ok, f"100 instances, max |diff| {worst:.1e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. mask stability
# ---------------------------------------------------------------------------


def test_criterion_03_mask_stability():
    start = time.perf_counter()
    arch = nncore.mlp(8, [16, 16], 4)
    target = blobs(600, 4, (8,), 1, center_scale=1.0)
    val = blobs(200, 4, (8,), 2, center_scale=1.0)
    probe = np.random.default_rng(3).normal(size=(32, 8))
    w_pt = nncore.init_params(arch, np.random.default_rng(4))
    cfg = FederationConfig(m=5, t=10, strategy="fedsq", partition="dirichlet", alpha=0.5, batch_size=32,
                           lr=0.05, min_per_client=8)
    seen, qk_moved = [], []

    def snapshot(r, server):
        seen.append(dualcopy.compute_masks(server.global_state, probe))
        qk_moved.append(server.global_state.qk.max_abs_diff(w_pt))

    run_federation(cfg, target, val, w_pt, Schedule.all_trainable(3), callback=snapshot)
    elapsed = time.perf_counter() - start
    first = seen[0]
    stable = all(m.equal(first) for m in seen)
    ok = stable and len(seen) == 10 and qk_moved[-1] > 0 and elapsed <= 60
    assert record(3, "masks bit-identical over 10 FedSQ rounds", ok,
                  f"{len(seen)} rounds, QK moved {qk_moved[-1]:.3f}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. within-region affinity
# ---------------------------------------------------------------------------


def test_criterion_04_within_region_affinity():
    rng = np.random.default_rng(11)
    worst_affine = worst_super = 0.0
    for arch, shape in ((dense_arch(), (4,)), (conv_arch(), (2, 6, 6))):
        sk = nncore.init_params(arch, rng)
        model = dualcopy.make_dual_copy(sk, Schedule.all_trainable(len(arch.param_layers)))
        model = model.with_qk(nncore.init_params(arch, rng))
        x0 = rng.normal(size=(1, *shape))
        masks = dualcopy.compute_masks(model, x0)
        A, b = dualcopy.extract_affine(model, masks)
        for _ in range(50):
            x = rng.normal(size=(1, *shape)) * 3
            out = dualcopy.gated_forward(model, masks, x)[0]
            worst_affine = max(worst_affine, float(np.max(np.abs(A @ x.ravel() + b - out))))
            x1, x2 = rng.normal(size=(1, *shape)), rng.normal(size=(1, *shape))
            a1, a2 = rng.normal(), rng.normal()
            f = lambda z: dualcopy.gated_forward(model, masks, z)[0]  # noqa: E731
            # affine maps satisfy f(a1 x1 + a2 x2) = a1 f(x1) + a2 f(x2) + (1 - a1 - a2) f(0)
            lhs = f(a1 * x1 + a2 * x2)
            rhs = a1 * f(x1) + a2 * f(x2) + (1 - a1 - a2) * f(np.zeros_like(x1))
            worst_super = max(worst_super, float(np.max(np.abs(lhs - rhs))))
    ok = worst_affine <= 1e-9 and worst_super <= 1e-9
    assert record(4, "fixed-mask network is affine", ok,
                  f"100 inputs, max |Ax+b - f(x)| {worst_affine:.1e}, superposition {worst_super:.1e}")


# ---------------------------------------------------------------------------
# 5. aggregation oracle
# ---------------------------------------------------------------------------


def test_criterion_05_aggregation_oracle():
    rng = np.random.default_rng(5)
    worst, worst_sum = 0.0, 0.0
    for trial in range(20):
        arch = dense_arch() if trial % 2 else conv_arch()
        n = int(rng.integers(1, 8))
        updates = [nncore.init_params(arch, rng) * float(rng.uniform(0.1, 5)) for _ in range(n)]
        sizes = [int(s) for s in rng.integers(1, 500, size=n)]
        out = aggregate(list(zip(updates, sizes)))
        for k in arch.param_layers:
            for j in range(2):
                ref = weighted_mean_bruteforce([u[k][j] for u in updates], sizes)
                worst = max(worst, float(np.max(np.abs(out[k][j] - ref))))
        worst_sum = max(worst_sum, abs(float(aggregation_weights(sizes).sum()) - 1.0))
    ok = worst <= 1e-12 and worst_sum <= 1e-15
    assert record(5, "aggregation matches brute-force weighted mean", ok,
                  f"20 update sets, max |diff| {worst:.1e}, |sum w - 1| {worst_sum:.1e}")


# ---------------------------------------------------------------------------
# 6. degenerate federation
# ---------------------------------------------------------------------------


def _centralized(strategy, w_pt, schedule, data, cfg):
    """T epochs of the strategy's local rule on the pooled data, one rng per round."""
    if strategy == "fedsq":
        model = dualcopy.make_dual_copy(w_pt, schedule)
        params = model.qk
        for r in range(cfg.t):
            params = fedproto.local_train_fedsq(params, model.sk, schedule, fedproto.ClientState(0, data),
                                                cfg, round_idx=r)
        return model.with_qk(params)
    params = w_pt
    for r in range(cfg.t):
        rng = fedproto.client_rng(cfg.seed, 0, r)
        params, _ = nncore.minibatch_sgd(w_pt.arch, params, data.inputs, data.labels, lr=cfg.lr, wd=cfg.wd,
                                         batch_size=cfg.batch_size, epochs=cfg.e, rng=rng,
                                         trainable_mask=schedule)
    return params


def test_criterion_06_degenerate_federation():
    arch = nncore.mlp(6, [10, 10], 3)
    data = blobs(150, 3, (6,), 21)
    val = blobs(60, 3, (6,), 22)
    w_pt = nncore.init_params(arch, np.random.default_rng(23))
    schedule = Schedule.last(3, 2)
    verdicts = []
    for strategy in fedproto.STRATEGIES:
        cfg = FederationConfig(m=1, k=1, t=4, e=2, batch_size=16, strategy=strategy, mu=0.0, seed=9,
                               min_per_client=1)
        res = run_federation(cfg, data, val, w_pt, schedule)
        ref = _centralized(strategy, w_pt, schedule, data, cfg)
        if strategy == "fedsq":
            same = res.final.qk.equal(ref.qk) and res.final.sk.equal(ref.sk)
        else:
            same = res.final.equal(ref)
        verdicts.append(f"{strategy} {'identical' if same else 'DIFFERS'}")

    cfg = FederationConfig(m=5, t=10, batch_size=16, partition="dirichlet", alpha=0.5, seed=4, min_per_client=8)
    data = blobs(400, 3, (6,), 24)
    avg = run_federation(cfg, data, val, w_pt, schedule)
    prox = run_federation(dataclasses.replace(cfg, strategy="fedprox", mu=0.0), data, val, w_pt, schedule)
    prox_same = prox.final.equal(avg.final) and all(
        a.csv_row()[2:7] == b.csv_row()[2:7] for a, b in zip(avg.logs, prox.logs)
    )
    verdicts.append(f"FedProx(0) vs FedAvg over 10 rounds {'identical' if prox_same else 'DIFFERS'}")
    ok = "DIFFERS" not in " ".join(verdicts)
    assert record(6, "M=K=1 equals centralized; FedProx(0) equals FedAvg", ok, "; ".join(verdicts))


# ---------------------------------------------------------------------------
# 7. partition statistics
# ---------------------------------------------------------------------------


def test_criterion_07_partition_statistics():
    start = time.perf_counter()
    data = blobs(1000, 10, (2,), 31)
    covers = True
    means = []
    for alpha in (0.1, 0.5, 10.0, 1e6):
        idx = []
        for seed in range(50):
            plan = dirichlet_split(data, 10, alpha, seed)
            allocated = np.concatenate(plan.assignments)
            covers &= len(allocated) == len(data) and np.array_equal(np.sort(allocated), np.arange(len(data)))
            idx.append(heterogeneity_index(plan, data))
        means.append(float(np.mean(idx)))
    decreasing = all(a > b for a, b in zip(means, means[1:]))
    iid_worst = max(heterogeneity_index(iid_split(data, 10, s), data) for s in range(50))
    elapsed = time.perf_counter() - start
    ok = covers and decreasing and iid_worst <= 0.05 and elapsed <= 30
    detail = (f"disjoint covers {covers}, mean index over alpha 0.1/0.5/10/1e6 = "
              + "/".join(f"{m:.3f}" for m in means) + f", iid worst {iid_worst:.3f}, {elapsed:.1f}s")
    assert record(7, "partition statistics", ok, detail)


# ---------------------------------------------------------------------------
# 8. trainable-parameter conservation and upload bytes
# ---------------------------------------------------------------------------


def test_criterion_08_conservation_and_bytes():
    arch = conv_arch()
    w = nncore.init_params(arch, np.random.default_rng(41))
    counts_ok = True
    for k in range(1, len(arch.param_layers) + 1):
        schedule = Schedule.last(len(arch.param_layers), k)
        model = dualcopy.make_dual_copy(w, schedule)
        single = w.num_scalars([l for l, t in zip(arch.param_layers, schedule.trainable) if t])
        counts_ok &= model.num_trainable_scalars() == single

    data = D.generate(D.SyntheticSpec(n_samples=200, n_classes=3, input_shape=(2, 6, 6), seed=42))
    val = D.generate(D.SyntheticSpec(n_samples=60, n_classes=3, input_shape=(2, 6, 6), seed=43))
    schedule = Schedule.last(4, 2)
    cfg = FederationConfig(m=4, t=3, batch_size=16, min_per_client=1)
    avg = run_federation(cfg, data, val, w, schedule)
    sq = run_federation(dataclasses.replace(cfg, strategy="fedsq"), data, val, w, schedule)
    up_sq = [l.bytes_uploaded for l in sq.logs]
    up_avg = [l.bytes_uploaded for l in avg.logs]
    ok = counts_ok and all(a < b for a, b in zip(up_sq, up_avg))
    assert record(8, "trainable counts conserved; FedSQ uploads less", ok,
                  f"counts equal for every schedule {counts_ok}, upload/round FedSQ {up_sq[0]} B vs FedAvg {up_avg[0]} B")


# ---------------------------------------------------------------------------
# 9. qualitative trend
# ---------------------------------------------------------------------------


def oscillation(logs, after=5):
    acc = np.array([l.val_accuracy for l in logs])[after:]
    return float(np.mean(np.abs(np.diff(acc))))


def centralized_bound(strategy, w_pt, schedule, data, val, cfg):
    """Best validation accuracy of the strategy's update rule trained on pooled data for T epochs."""
    rng = np.random.default_rng([cfg.seed, 99])
    base = dualcopy.make_dual_copy(w_pt, schedule)

    def gated_grad(qk, xb, yb):
        m = base.with_qk(qk)
        return dualcopy.gated_backward(m, dualcopy.compute_masks(m, xb), xb, yb)

    fedsq = strategy == "fedsq"
    params, grad_fn = (base.qk, gated_grad) if fedsq else (w_pt, None)

    best = 0.0
    for _ in range(cfg.t):
        params, _ = nncore.minibatch_sgd(w_pt.arch, params, data.inputs, data.labels, lr=cfg.lr, wd=cfg.wd,
                                         batch_size=cfg.batch_size, epochs=1, rng=rng, trainable_mask=schedule,
                                         grad_fn=grad_fn)
        state = base.with_qk(params) if fedsq else params
        best = max(best, fedproto.evaluate_global(state, val)[0])
    return best


def test_criterion_09_qualitative_trend():
    start = time.perf_counter()
    ratios = {s: [] for s in fedproto.STRATEGIES}
    osc = {s: [] for s in fedproto.STRATEGIES}
    for seed in range(5):
        exp = cli.load_config(CONFIGS / "dirichlet_threeway.ini", seed=seed)
        fc = exp.federation
        assert (fc.m, fc.k, fc.e, fc.t, fc.partition, fc.alpha) == (10, 10, 1, 20, "dirichlet", 0.5)
        datasets = cli.make_datasets(exp)
        w_pt, schedule, _ = cli.calibrate_phase(exp, datasets)
        for strategy in fedproto.STRATEGIES:
            cfg = fedproto.with_strategy(fc, strategy)
            res = run_federation(cfg, datasets["target"], datasets["validation"], w_pt, schedule)
            bound = centralized_bound(strategy, w_pt, schedule, datasets["target"], datasets["validation"], cfg)
            ratios[strategy].append(res.best[1] / bound)
            osc[strategy].append(oscillation(res.logs))
    elapsed = time.perf_counter() - start
    mean_osc = {s: float(np.mean(v)) for s, v in osc.items()}
    part_a = all(min(r) >= 0.9 for r in ratios.values())
    part_b = mean_osc["fedsq"] <= mean_osc["fedavg"]
    ok = part_a and part_b and elapsed <= 300
    detail = ("(a) min BVA/bound " + ", ".join(f"{s} {min(r):.3f}" for s, r in ratios.items())
              + "; (b) mean oscillation " + ", ".join(f"{s} {v:.5f}" for s, v in mean_osc.items())
              + f"; {elapsed:.0f}s")
    assert record(9, "trend on Dirichlet(0.5), 5 seeds (soft)", ok, detail)


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg_path = tmp_path / "det.ini"
    cfg_path.write_text((CONFIGS / "dirichlet_threeway.ini").read_text().replace(
        "record_wall_time = true", "record_wall_time = false").replace("t = 20", "t = 5"))
    outs = []
    for tag, workers in (("a", 1), ("b", 1), ("c", 4)):
        out = tmp_path / tag
        assert cli.main(["run", "--config", str(cfg_path), "--out", str(out), "--workers", str(workers)]) == 0
        outs.append({s: (out / f"{s}.csv").read_bytes() for s in fedproto.STRATEGIES})
    same_runs = outs[0] == outs[1]
    same_workers = outs[0] == outs[2]
    ok = same_runs and same_workers
    assert record(10, "byte-identical round logs", ok,
                  f"repeat run identical {same_runs}, workers 1 vs 4 identical {same_workers}")


# ---------------------------------------------------------------------------
# 11. calibration behavior
# ---------------------------------------------------------------------------


def test_criterion_11_calibration():
    start = time.perf_counter()
    arch, w_pt, data = solved_task()
    report = obtain_schedule(w_pt, data, TrainConfig(batch_size=16))
    accs = [a for _, a in report.candidates]
    sizes = [s.n_trainable for s, _ in report.candidates]
    elapsed = time.perf_counter() - start
    stopped_early = report.stop_reason == "no-improvement" and max(sizes) < len(arch.param_layers)
    argmax = dict(report.candidates)[report.selected] == max(accs)
    ordered = all(b == a + 1 for a, b in zip(sizes, sizes[1:])) and sizes[0] == 2
    single_drop = all(b > a for a, b in zip(accs[:-2], accs[1:-1])) and (len(accs) < 2 or accs[-1] <= max(accs[:-1]))
    head = report.selected.trainable[-1]
    ok = stopped_early and argmax and ordered and single_drop and head and elapsed <= 60
    detail = (", ".join(f"{s.bitstring()}={a:.3f}" for s, a in report.candidates)
              + f", selected {report.selected.bitstring()}, stop {report.stop_reason}, {elapsed:.1f}s")
    assert record(11, "calibration stops before full unfreezing", ok, detail)
