"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Full-dataset runs (Split-MNIST, Split-CIFAR10) take several minutes in total.
Data locations come from CONCEPTCELLS_MNIST / CONCEPTCELLS_CIFAR10.
"""
import json
import math
import os
import sys

import numpy as np
import pytest

import conftest
from conftest import ACCEPTANCE_RESULTS, CIFAR_DIR, MNIST_DIR, small_cnn, small_mlp
from conceptcells import learner, masks, metrics, netcore, streams
from conceptcells.drift import Decision, DriftDetector
from conceptcells.experiment import RunConfig, run

SEEDS = (0, 1, 2)
SPLIT_MNIST_CLASS_TOTALS = [12665, 12089, 11263, 12183, 11800]


def verdict(n: int, checks: dict, detail: str) -> None:
    ok = all(bool(v) for v in checks.values())
    failed = [k for k, v in checks.items() if not v]
    line = detail if ok else f"{detail} | failed: {'; '.join(failed)}"
    ACCEPTANCE_RESULTS[n] = (ok, line)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {line}")
    assert ok, line


def need_mnist():
    if not conftest.have_mnist():
        pytest.skip(f"MNIST not found under {MNIST_DIR}")


def need_cifar():
    if not conftest.have_cifar():
        pytest.skip(f"CIFAR-10 not found under {CIFAR_DIR}")


class FreezeAudit:
    """Per-batch audit: frozen weights and frozen-cell outputs never change."""

    def __init__(self, probe: np.ndarray, check_weights: bool):
        self.probe = probe
        self.check_weights = check_weights
        self.weights: list[np.ndarray] | None = None
        self.frozen: list[np.ndarray] | None = None
        self.logits: dict[int, np.ndarray] = {}
        self.weight_violations = 0
        self.output_violations = 0
        self.cells_seen = 0

    def __call__(self, state, row):
        frozen_now = state.num_cells - 1
        if self.check_weights and self.frozen is not None:
            for w, f, ref in zip(state.params.weights, self.frozen, self.weights):
                if not np.array_equal(w[f], ref[f]):
                    self.weight_violations += 1
        if frozen_now > self.cells_seen:
            for c in range(self.cells_seen + 1, frozen_now + 1):
                self.logits[c] = learner.predict_cell(state, self.probe, c)
            self.cells_seen = frozen_now
            self.frozen = [f.copy() for f in state.params.frozen]
            self.weights = [w.copy() for w in state.params.weights]

    def final_check(self, state) -> None:
        for c, ref in self.logits.items():
            if not np.array_equal(learner.predict_cell(state, self.probe, c), ref):
                self.output_violations += 1


@pytest.fixture(scope="session")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance_runs")


@pytest.fixture(scope="session")
def mnist_probe():
    need_mnist()
    _, test = streams.load_mnist(MNIST_DIR)
    return test.x[::20]


@pytest.fixture(scope="session")
def serena_split(out_root, mnist_probe):
    need_mnist()
    runs = {}
    for seed in SEEDS:
        audit = FreezeAudit(mnist_probe, check_weights=(seed == 0))
        cfg = RunConfig(seed=seed, data_dir=MNIST_DIR, output_dir=str(out_root), run_id=f"serena_split_s{seed}")
        res = run(cfg, on_batch=audit)
        audit.final_check(res.state)
        runs[seed] = (res, audit)
    return runs


@pytest.fixture(scope="session")
def baseline_split(out_root):
    need_mnist()
    return {m: run(RunConfig(method=m, data_dir=MNIST_DIR, output_dir=str(out_root), run_id=f"{m}_split"))
            for m in ("finetune", "reservoir", "iid_offline")}


@pytest.fixture(scope="session")
def imbalanced(out_root):
    need_mnist()
    return {(m, d): run(RunConfig(method=m, scenario=d, data_dir=MNIST_DIR, output_dir=str(out_root),
                                  run_id=f"{m}_{d}"))
            for d in ("ascending", "descending") for m in ("serena", "reservoir")}


@pytest.fixture(scope="session")
def cifar_runs(out_root):
    need_cifar()
    _, test = streams.load_cifar10(CIFAR_DIR)
    audit = FreezeAudit(test.x[::50], check_weights=True)
    base = dict(dataset="cifar10", data_dir=CIFAR_DIR, architecture="cnn_small", output_dir=str(out_root))
    serena = run(RunConfig(run_id="serena_cifar", **base), on_batch=audit)
    audit.final_check(serena.state)
    finetune = run(RunConfig(method="finetune", run_id="finetune_cifar", **base))
    return serena, finetune, audit


# -- 1 -----------------------------------------------------------------------

def test_criterion_01_split_mnist_reproduction(serena_split):
    accs = [serena_split[s][0].summary["avg_accuracy"] for s in SEEDS]
    forgets = [serena_split[s][0].summary["avg_forgetting"] for s in SEEDS]
    per_cell = [serena_split[s][0].summary["per_cell_forgetting"] for s in SEEDS]
    bit_violations = sum(serena_split[s][1].output_violations for s in SEEDS)
    seconds = [serena_split[s][0].wall_seconds for s in SEEDS]
    mean_acc, mean_forget = float(np.mean(accs)), float(np.mean(forgets))
    verdict(1, {
        f"avg accuracy {100 * mean_acc:.2f}% >= 97.0%": mean_acc >= 0.97,
        f"ensemble forgetting {100 * mean_forget:.2f}% <= 1.5%": mean_forget <= 0.015,
        "per-cell forgetting exactly 0": all(f == 0.0 for f in per_cell),
        "frozen-cell outputs bit-identical": bit_violations == 0,
        "runtime <= 20 min per seed": max(seconds) <= 1200,
    }, f"acc per seed {[round(100 * a, 2) for a in accs]}, forgetting {[round(100 * f, 2) for f in forgets]}, "
       f"cells {[serena_split[s][0].summary['num_cells'] for s in SEEDS]}, max {max(seconds):.0f}s/seed")


# -- 2 -----------------------------------------------------------------------

def test_criterion_02_baseline_ordering(serena_split, baseline_split):
    ft = baseline_split["finetune"].summary["avg_accuracy"]
    rs = baseline_split["reservoir"].summary["avg_accuracy"]
    off = baseline_split["iid_offline"].summary["avg_accuracy"]
    se = float(np.mean([serena_split[s][0].summary["avg_accuracy"] for s in SEEDS]))
    verdict(2, {
        f"finetune {100 * ft:.1f}% in [12, 30]": 0.12 <= ft <= 0.30,
        f"reservoir {100 * rs:.1f}% >= 85": rs >= 0.85,
        f"iid-offline {100 * off:.1f}% >= 97": off >= 0.97,
        f"serena {100 * se:.1f}% >= iid-offline - 1": se >= off - 0.01,
    }, f"finetune {100 * ft:.1f}, reservoir {100 * rs:.1f}, iid-offline {100 * off:.1f}, serena {100 * se:.1f}")


# -- 3 -----------------------------------------------------------------------

def synthetic_learner_drifts(num_streams, per_class, seed=0):
    scen, train, _ = streams.synthetic_streams(2, num_streams, 2, per_class, 10.0, seed)
    state = learner.create_state(netcore.mlp_400(2, train.num_classes), train.num_classes, 0.2, 10, 0.5, seed=seed)
    reports = learner.run_scenario(state, streams.batches(scen, train))
    return scen, [r.batch_index for r in reports if r.drift_fired], len(reports)


def test_criterion_03_drift_detection(serena_split):
    summary = serena_split[0][0].summary
    drifts, starts = summary["drift_batches"], summary["stream_start_batches"]
    near = all(any(b <= d <= b + 10 for d in drifts) for b in starts[1:])

    scen, sw_drifts, _ = synthetic_learner_drifts(2, 300)
    switch = scen.counts[0] // scen.batch_size

    _, steady, n = synthetic_learner_drifts(1, 5500)
    steady_fp = [d for d in steady if d >= 100]

    rng = np.random.default_rng(0)
    det = DriftDetector(10, 0.5)
    scripted_fp = sum(det.observe(float(a)) is Decision.DRIFT for a in rng.uniform(0.9, 1.0, 1000))

    verdict(3, {
        f"Split-MNIST drifts {len(drifts)} == 4": len(drifts) == 4,
        "each boundary has a drift within w=10 batches": near,
        f"synthetic switch drifts {sw_drifts} == [{switch}] (+-1)":
            len(sw_drifts) == 1 and abs(sw_drifts[0] - switch) <= 1,
        f"learner false positives over {n - 100} steady batches: {len(steady_fp)}": not steady_fp,
        f"detector false positives over 1000 steady batches: {scripted_fp}": scripted_fp == 0,
    }, f"split-mnist drifts {drifts[:8]}{'...' if len(drifts) > 8 else ''} (starts {starts[1:]}), "
       f"synthetic {sw_drifts}")


# -- 4 -----------------------------------------------------------------------

def erk_suite(arch, densities=(0.01, 0.05, 0.20, 0.80)) -> dict:
    checks = {}
    for target in densities:
        plan = masks.erk_densities(arch, target)
        checks[f"density {target}: planned {plan.planned_density:.5f} within 0.5%"] = \
            abs(plan.planned_density - target) <= 0.005 * target
        order = np.argsort(plan.factors, kind="stable")
        checks[f"density {target}: ordering follows r_l"] = bool(np.all(np.diff(np.array(plan.densities)[order]) >= 0))
        for idx in (1, 2, 3):
            cell = masks.sample_cell(plan, idx, 7)
            checks[f"density {target}: cell {idx} quotas exact"] = cell.popcounts == plan.quotas()
    return checks


def test_criterion_04_erk_plan_properties():
    checks = {}
    for name, arch in (("mlp_400", netcore.mlp_400()), ("cnn_small", netcore.cnn_small())):
        checks.update({f"{name} {k}": v for k, v in erk_suite(arch).items()})
    verdict(4, checks, f"{len(checks)} checks over mlp_400 and cnn_small at densities 1/5/20/80%")


# -- 5 -----------------------------------------------------------------------

def gradient_errors(arch, shape, seed):
    rng = np.random.default_rng(seed)
    params = netcore.init_network(arch, seed, shape, precision="verify")
    cell = masks.sample_cell(masks.erk_densities(arch, float(rng.uniform(0.2, 0.8))), 1, seed, np.float64)
    for b in cell.biases:
        b[:] = rng.normal(size=b.shape) * 0.1
    x = rng.normal(size=(4,) + shape)
    y = rng.integers(0, arch[-1].out_features, 4)
    logits, cache = netcore.forward(params, cell, x)
    grads = netcore.backward(params, cell, cache, netcore.cross_entropy(logits, y)[1])
    worst, masked_nonzero = 0.0, 0
    for k, w in enumerate(params.weights):
        masked_nonzero += int(np.count_nonzero(grads.weights[k][~cell.masks[k]]))
        live = np.flatnonzero(cell.masks[k])
        for f in rng.choice(live, size=min(8, len(live)), replace=False):
            idx = np.unravel_index(f, w.shape)
            old = w[idx]
            w[idx] = old + 1e-6
            lp = netcore.cross_entropy(netcore.forward(params, cell, x, keep_cache=False)[0], y)[0]
            w[idx] = old - 1e-6
            lm = netcore.cross_entropy(netcore.forward(params, cell, x, keep_cache=False)[0], y)[0]
            w[idx] = old
            num, ana = (lp - lm) / 2e-6, grads.weights[k][idx]
            denom = max(abs(num) + abs(ana), 1e-8)
            worst = max(worst, abs(num - ana) / denom)
    return worst, masked_nonzero


def random_small_net(rng, conv):
    classes = int(rng.integers(2, 6))
    if conv:
        c, size = int(rng.integers(1, 4)), int(rng.choice([6, 8]))
        return small_cnn(c, size, classes), (c, size, size)
    d, h = int(rng.integers(2, 12)), int(rng.integers(3, 16))
    return small_mlp(d, h, classes), (d,)


def test_criterion_05_gradient_oracle():
    rng = np.random.default_rng(2024)
    worst, masked = 0.0, 0
    for i in range(20):
        arch, shape = random_small_net(rng, conv=i % 2 == 1)
        w, m = gradient_errors(arch, shape, i)
        worst, masked = max(worst, w), masked + m
    verdict(5, {f"max relative error {worst:.2e} <= 1e-4": worst <= 1e-4,
                f"masked gradient entries nonzero: {masked}": masked == 0},
            "20 random nets (10 dense, 10 conv), verify precision")


# -- 6 -----------------------------------------------------------------------

def test_criterion_06_freeze_invariant(serena_split):
    res, audit = serena_split[0]
    verdict(6, {f"frozen-weight violations {audit.weight_violations} == 0": audit.weight_violations == 0,
                "run froze at least one cell": audit.cells_seen >= 1},
            f"checked every frozen weight after each of {res.summary['num_batches']} batches "
            f"({audit.cells_seen} frozen cells)")


# -- 7 -----------------------------------------------------------------------

def ensemble_checks(state, x) -> dict:
    per_cell = [learner.predict_cell(state, x, i) for i in range(1, state.num_cells + 1)]
    w = learner.recency_weights(state.num_cells)
    base = learner.combine(per_cell, w)[1]
    single_total, single_y = learner.combine(per_cell[:1], learner.recency_weights(1))
    return {
        "S=1 ensemble equals single-path prediction":
            np.array_equal(single_y, per_cell[0].argmax(1)) and np.array_equal(single_total, per_cell[0].astype(float)),
        "argmax invariant under positive rescaling":
            all(np.array_equal(base, learner.combine(per_cell, c * w)[1]) for c in (1e-3, 0.5, 3.0, 1e3)),
    }


def test_criterion_07_ensemble_algebra(serena_split, mnist_probe):
    z = [np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]])]
    total, y = learner.combine(z)
    checks = {"hand example (0.333, 1.667) -> class 1":
              np.allclose(total, [[1 / 3, 5 / 3]], rtol=0, atol=1e-15) and y.tolist() == [1],
              "S=4 weights (0.25, 0.5, 0.75, 1.0)": np.allclose(learner.recency_weights(4), [0.25, 0.5, 0.75, 1])}
    checks.update(ensemble_checks(serena_split[0][0].state, mnist_probe))
    verdict(7, checks, "on the trained Split-MNIST state and the hand-computed example")


# -- 8 -----------------------------------------------------------------------

def saturation_checks(arch, density=0.2, cells=5, seed=0):
    plan = masks.erk_densities(arch, density)
    shape = None if isinstance(arch[0], netcore.Dense) else (arch[0].in_channels, 32, 32)
    params = netcore.init_network(arch, seed, shape)
    for i in range(1, cells + 1):
        masks.freeze_cell(params, masks.sample_cell(plan, i, seed))
    got = masks.layer_saturation(params)
    expect = [1 - (1 - d) ** cells for d in plan.densities]
    total = masks.saturation(params)
    return got, expect, total


def test_criterion_08_saturation():
    got, expect, total = saturation_checks(netcore.mlp_400())
    diffs = [abs(a - b) for a, b in zip(got, expect)]
    verdict(8, {f"per-layer |measured - 1-(1-d)^5| max {max(diffs):.4f} <= 0.02": max(diffs) <= 0.02,
                f"total saturation {100 * total:.1f}% < 100%": total < 1.0},
            f"layers measured {[round(g, 4) for g in got]} vs expected {[round(e, 4) for e in expect]}")


# -- 9 -----------------------------------------------------------------------

def test_criterion_09_imbalanced(imbalanced, mnist):
    train, _ = mnist
    asc = streams.make_imbalanced(train, 5, 2, 2500, 12000, "ascending", allow_shortfall=True)
    target = (2500, 3701, 5477, 8107, 12000)
    accs = {k: v.summary["avg_accuracy"] for k, v in imbalanced.items()}
    checks = {f"ascending counts {asc.requested_counts} within +-1 of {target}":
              all(abs(a - b) <= 1 for a, b in zip(asc.requested_counts, target))}
    for d in ("ascending", "descending"):
        se, rs = accs[("serena", d)], accs[("reservoir", d)]
        checks[f"serena {d} {100 * se:.1f}% >= 93"] = se >= 0.93
        checks[f"serena {d} {100 * se:.1f}% >= reservoir {100 * rs:.1f}%"] = se >= rs
    verdict(9, checks, f"realized ascending counts {imbalanced[('serena', 'ascending')].summary['stream_counts']}, "
                       + ", ".join(f"{m}/{d} {100 * a:.1f}" for (m, d), a in accs.items()))


# -- 10 ----------------------------------------------------------------------

def replay_from_files(run_dir):
    """Independent recomputation from matrix.csv using plain Python."""
    with open(os.path.join(run_dir, "matrix.csv")) as fh:
        lines = fh.read().splitlines()[1:]
    rows = [[float(v) for v in line.split(",")[1:] if v != ""] for line in lines]
    last = rows[-1]
    acc = math.fsum(last) / len(last)
    S = len(rows)
    if S < 2 or any(len(r) == 0 for r in rows[:-1]):
        return acc, None
    forget = math.fsum(max(rows[k][j] for k in range(j, S - 1)) - last[j] for j in range(S - 1)) / (S - 1)
    return acc, forget


def test_criterion_10_metric_oracles(serena_split, baseline_split, imbalanced, cifar_runs, out_root):
    checks = {}
    dirs = sorted(d for d in os.listdir(out_root) if os.path.exists(os.path.join(out_root, d, "summary.json")))
    for d in dirs:
        with open(os.path.join(out_root, d, "summary.json")) as fh:
            s = json.load(fh)
        acc, forget = replay_from_files(os.path.join(out_root, d))
        ok = abs(acc - s["avg_accuracy"]) <= 1e-12
        if forget is None:
            ok &= s["avg_forgetting"] is None
        else:
            ok &= abs(forget - s["avg_forgetting"]) <= 1e-12
        checks[f"{d} replay agrees"] = ok
    hand = [([[0.9], [0.9, 0.8]], 0.0), ([[0.9], [0.5, 0.8]], 0.4)]
    for rows, want in hand:
        got = metrics.average_forgetting(metrics.MetricsMatrix.from_rows(rows))
        checks[f"forgetting {rows} == {want}"] = abs(got - want) <= 1e-15
    checks["average accuracy (0.8, 0.6, 0.7) == 0.7"] = abs(metrics.average_accuracy(
        metrics.MetricsMatrix.from_rows([[0.8], [0.8, 0.6], [0.8, 0.6, 0.7]])) - 0.7) <= 1e-15
    verdict(10, checks, f"log-replay over {len(dirs)} exported runs plus hand cases")


# -- 11 ----------------------------------------------------------------------

def test_criterion_11_compact_cnn_split_cifar(cifar_runs):
    serena, finetune, audit = cifar_runs
    s, f = serena.summary, finetune.summary
    expected_steps = sum(-(-n // 10) for n in s["stream_counts"])
    arch = netcore.cnn_small()
    checks = {
        f"single pass: {s['num_batches']} steps == {expected_steps}": s["num_batches"] == expected_steps,
        f"drifts {len(s['drift_batches'])} >= 4": len(s["drift_batches"]) >= 4,
        f"serena {100 * s['avg_accuracy']:.1f}% >= finetune {100 * f['avg_accuracy']:.1f}% + 30":
            s["avg_accuracy"] >= f["avg_accuracy"] + 0.30,
        "conv ERK suite (4)": all(erk_suite(arch).values()),
        "conv gradient oracle (5)": all(
            (lambda r: r[0] <= 1e-4 and r[1] == 0)(gradient_errors(*random_small_net(np.random.default_rng(i), True), i))
            for i in range(5)),
        f"conv freeze invariant (6): {audit.weight_violations} weight / {audit.output_violations} output violations":
            audit.weight_violations == 0 and audit.output_violations == 0,
        "conv ensemble algebra (7)": all(ensemble_checks(serena.state, audit.probe).values()),
    }
    got, expect, total = saturation_checks(arch)
    checks[f"conv saturation (8) max diff {max(abs(a - b) for a, b in zip(got, expect)):.4f}, total {total:.3f}"] = \
        max(abs(a - b) for a, b in zip(got, expect)) <= 0.02 and total < 1.0
    verdict(11, checks, f"cells {s['num_cells']}, {serena.wall_seconds:.0f}s")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
