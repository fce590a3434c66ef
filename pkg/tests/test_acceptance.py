"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed by the test and repeated in the terminal summary
(see conftest.py). The desk experiment is the built-in default config.
"""
import statistics
import time

import numpy as np
import pytest

import gradcases
from conftest import ACCEPTANCE, SESSION_START
from oracles import brute_spearman, covariance_trace_oracle
from unlearnfair.data import split_retain_forget
from unlearnfair.harness import default_config, parse_config, run_experiment
from unlearnfair.harness.pipeline import ORIGINAL, checkpoint_path
from unlearnfair.metrics import AttackConfig, adversarial_accuracy, class_variance, fairness_gap, fgsm
from unlearnfair.nn import freeze_prefix, load_model, same_parameters
from unlearnfair.training import TrainConfig, evaluate_accuracy, train
from unlearnfair.unlearning import UnlearnMethod, cf_unlearn, run_method


def record(request, n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    request.config.stash[ACCEPTANCE][n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Two independent runs of the default desk experiment."""
    out = []
    for i in range(2):
        cfg = parse_config(default_config()).with_output_dir(tmp_path_factory.mktemp(f"desk{i}"))
        t0 = time.perf_counter()
        report = run_experiment(cfg)
        out.append((cfg, report, time.perf_counter() - t0))
    return out


def _runs(report, method):
    return [r for r in report["runs"] if r["method"] == method]


def test_criterion_01_gradients(request):
    t0 = time.perf_counter()
    worst = {op: gradcases.run_op_cases(op, 100) for op in gradcases.OP_CASES}
    worst.update({f"model:{m}": gradcases.run_model_cases(m, 100) for m in gradcases.MODEL_ARCHS})
    elapsed = time.perf_counter() - t0
    name = max(worst, key=worst.get)
    ok = max(worst.values()) <= 1e-6 and elapsed <= 30.0
    record(
        request,
        1,
        ok,
        f"{len(gradcases.OP_CASES)} ops + {len(gradcases.MODEL_ARCHS)} models x 100 cases, "
        f"max rel err {worst[name]:.2e} ({name}), {elapsed:.1f}s",
    )


def test_criterion_02_variance_oracle(request):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        n, d = int(rng.integers(2, 60)), int(rng.integers(1, 24))
        f = rng.normal(size=(n, d)) * rng.uniform(0.1, 3.0, size=d) + rng.normal(size=d)
        worst = max(worst, abs(class_variance(f) - covariance_trace_oracle(f)))
    elapsed = time.perf_counter() - t0
    record(request, 2, worst <= 1e-12 and elapsed <= 10.0, f"1000 feature sets, max abs diff {worst:.1e}, {elapsed:.1f}s")


def test_criterion_03_metric_exactness(request, desk):
    rng = np.random.default_rng(3)
    single = all(fairness_gap({int(c): float(rng.random())}) == 0.0 for c in rng.integers(0, 10, 100))
    random_gaps = [fairness_gap(dict(enumerate(rng.random(int(rng.integers(1, 10)))))) for _ in range(1000)]
    _, report, _ = desk[0]
    rows = report["original"] + report["runs"]
    report_gaps = [layer["gap"] for r in rows for layer in r["profile"]["layers"]]
    nonneg = min(random_gaps) >= 0.0 and min(report_gaps) >= 0.0

    cfg = desk[0][0]
    split = cfg.load_split()
    model = load_model(checkpoint_path(cfg, ORIGINAL, 0))
    eta0 = all(
        adversarial_accuracy(model, ds, AttackConfig(0.0)) == evaluate_accuracy(model, ds) for ds in split.quadrants().values()
    )
    eta0 = eta0 and all(
        next(e["accuracy"] for e in r["robustness"]["adversarial"] if e["eta"] == 0.0) == r["robustness"]["clean_accuracy"]
        for r in rows
    )

    in_bounds, count = True, 0
    for eta in np.linspace(0.0, 0.3, 10):
        x = rng.random((1000, 16))
        x[:50] = 0.0
        x[50:100] = 1.0
        adv = fgsm(model, x, rng.integers(0, 4, 1000), AttackConfig(float(eta)))
        in_bounds &= bool(np.all(adv <= x + eta) and np.all(adv >= x - eta) and adv.min() >= 0.0 and adv.max() <= 1.0)
        count += len(x)
    ok = single and nonneg and eta0 and in_bounds and count == 10_000
    record(
        request,
        3,
        ok,
        f"single-class gap 0: {single}; gaps >= 0: {nonneg}; eta=0 == clean: {eta0}; "
        f"FGSM bound+clip on {count} samples: {in_bounds}",
    )


def test_criterion_04_exact_unlearning_pattern(request, desk):
    cfg, report, elapsed = desk[0]
    retrain = _runs(report, "retrain")
    good = [r["accuracy"]["forget_test"] <= 0.05 and r["accuracy"]["retain_test"] >= 0.90 for r in retrain]
    cf = _runs(report, "cf")
    cf_forget = [r["accuracy"]["forget_test"] for r in cf]
    cf_epochs = cfg.method("cf").method.epochs
    ok = sum(good) >= 4 and max(cf_forget) <= 0.10 and cf_epochs <= 50 and elapsed <= 180.0
    record(
        request,
        4,
        ok,
        f"retrain meets forget<=0.05 & retain>=0.90 in {sum(good)}/5 seeds; "
        f"cf forget-test max {max(cf_forget):.3f} after {cf_epochs} epochs; desk pipeline {elapsed:.1f}s",
    )


def test_criterion_05_method_identities(request, desk):
    cfg, report, _ = desk[0]
    split = cfg.load_split()
    original = load_model(checkpoint_path(cfg, ORIGINAL, 0))
    sgd = cfg.method("salun").method.optimizer
    assert sgd.kind == "sgd"
    common = dict(arch=cfg.arch, train_cfg=cfg.train_cfg, train_opt=cfg.train_opt, seed=0)
    rl, _ = run_method(UnlearnMethod("rl", epochs=50, optimizer=sgd), original, split, **common)
    sal, _ = run_method(UnlearnMethod("salun", epochs=50, optimizer=sgd, fraction=1.0), original, split, **common)
    salun_eq = same_parameters(rl, sal)

    full = split.full_train()
    keep = np.flatnonzero(full.labels != cfg.forget_class)
    no_forget = split_retain_forget(full.subset(keep), split.retain_test, cfg.forget_class)
    cf_opt = cfg.method("cf").method.optimizer
    cf = cf_unlearn(original, no_forget, 50, cf_opt, batch_size=32, seed=9)
    plain = original.clone()
    train(plain, full.subset(keep), TrainConfig(50, 32, 9), cf_opt)
    cf_eq = len(no_forget.forget_train) == 0 and same_parameters(cf.model, plain)

    access = [r["audit"]["accesses"]["forget_train"] for r in _runs(report, "retrain")]
    ok = salun_eq and cf_eq and access == [0] * 5
    record(
        request,
        5,
        ok,
        f"salun(1)==rl bit-exact: {salun_eq}; cf(empty forget)==continued training: {cf_eq}; "
        f"retrain forget accesses per seed: {access}",
    )


def test_criterion_06_preservation_ordering(request, desk):
    _, report, _ = desk[0]
    order = report["preservation_ordering"]
    dev = {(r["method"], r["seed"]): r["preservation"]["max_deviation"] for r in report["runs"]}
    flags_right = order["reference"] == "rl" and all(
        e["holds"] == (dev[("retrain", e["seed"])] <= dev[("rl", e["seed"])]) for e in order["per_seed"]
    )
    flags_right &= order["violating_seeds"] == [e["seed"] for e in order["per_seed"] if not e["holds"]]
    held = order["holds_count"]
    detail = f"retrain <= rl max deviation in {held}/5 seeds; flagged seeds {order['violating_seeds']}; flags consistent: {flags_right}"
    assert flags_right, detail
    if held < 4:
        line = f"criterion  6: FAIL  {detail} (reported, not gating)"
        request.config.stash[ACCEPTANCE][6] = line
        print(line)
        pytest.xfail(line)
    record(request, 6, True, detail)


def test_criterion_07_correlation_oracle(request, desk):
    _, report, _ = desk[0]
    runs = report["runs"]
    methods = {r["method"] for r in runs}
    seeds = {r["seed"] for r in runs}
    worst, values = 0.0, []
    for entry in report["correlation"]:
        eta = entry["eta"]
        xs = [r["preservation"]["max_deviation"] for r in runs]
        ys = [next(e["accuracy"] for e in r["robustness"]["adversarial"] if e["eta"] == eta) for r in runs]
        assert entry["n"] == len(runs)
        if len(set(xs)) == 1 or len(set(ys)) == 1:
            worst = max(worst, 0.0 if entry["degenerate"] and entry["spearman"] == 0.0 else 1.0)
        else:
            worst = max(worst, abs(entry["spearman"] - brute_spearman(xs, ys)))
        values.append(f"eta={eta:g}: {entry['spearman']:+.3f}")
    ok = len(methods) >= 4 and len(seeds) == 5 and worst <= 1e-12
    record(request, 7, ok, f"{len(methods)} methods x {len(seeds)} seeds, max |diff| vs oracle {worst:.1e}; " + ", ".join(values))


def test_criterion_08_determinism(request, desk):
    (cfg_a, _, _), (cfg_b, _, _) = desk
    names = ["report.json", "tables/accuracy.csv", "tables/accuracy.txt", "tables/robustness.csv", "tables/robustness.txt", "plots/fairness_gap.svg"]
    same = [(cfg_a.output_dir / n).read_bytes() == (cfg_b.output_dir / n).read_bytes() for n in names]
    record(request, 8, all(same), f"{sum(same)}/{len(names)} files byte-identical across two desk runs")


def test_criterion_09_layer_subset_cf(request, desk):
    cfg = desk[0][0]
    split = cfg.load_split()
    original = load_model(checkpoint_path(cfg, ORIGINAL, 0))
    method = cfg.method("cf").method
    k = original.num_norm_layers - 1  # intermediate and last norm layers stay trainable
    frozen, full = [], []
    cf_unlearn(original, split, 2, method.optimizer, seed=1)  # warm-up
    model = None
    # machine speed drifts, so compare each frozen run with an adjacent full run, alternating the order
    for i in range(7):
        for variant in ((k, None) if i % 2 == 0 else (None, k)):
            t0 = time.perf_counter()
            res = cf_unlearn(original, split, method.epochs, method.optimizer, batch_size=method.batch_size, seed=1, freeze_k=variant)
            (frozen if variant else full).append(time.perf_counter() - t0)
            if variant:
                model = res.model
    mask = freeze_prefix(original, k)
    fixed = [np.array_equal(p.data, q.data) for m, p, q in zip(mask, model.parameters(), original.parameters()) if not m.any()]
    stats_fixed = all(
        np.array_equal(a.running_mean, b.running_mean) and np.array_equal(a.running_var, b.running_var)
        for a, b in list(zip(model.norm_layers, original.norm_layers))[: k - 1]
    )
    t_frozen, t_full = statistics.median(frozen), statistics.median(full)
    ratio = statistics.median(a / b for a, b in zip(frozen, full))
    ok = len(fixed) > 0 and all(fixed) and stats_fixed and ratio < 1.0
    record(
        request,
        9,
        ok,
        f"freeze_k={k}: {sum(fixed)}/{len(fixed)} frozen tensors unchanged, frozen norm stats unchanged: {stats_fixed}; "
        f"median wall {t_frozen:.3f}s vs full cf {t_full:.3f}s, median paired ratio {ratio:.3f}",
    )


def test_criterion_10_total_runtime(request):
    elapsed = time.perf_counter() - request.config.stash[SESSION_START]
    record(request, 10, elapsed <= 600.0, f"test session so far {elapsed:.1f}s (acceptance runs last)")
