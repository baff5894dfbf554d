"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers,
then asserts. Benchmark runs are cached per module so variants shared between
criteria are trained once.
"""

import functools
import math
import time

import numpy as np
import pytest

from fedpall.config import FEDPALL_ONLY, parse_config
from fedpall.federation import (init_clients, init_server, load_datasets, metrics_to_csv,
                                phase1_generate_global_prototypes, phase2_local_training, run,
                                write_metrics_csv)
from fedpall.losses import LossWeights, combined_local_loss, cross_entropy, info_nce_loss, kl_uniform_loss
from fedpall.neural import MlpSpec, backward_mlp, forward_mlp, init_mlp, make_rng, serialize_params, softmax
from fedpall.prototypes import (PrototypeSet, aggregate_global_prototypes, bernoulli_mask,
                                compute_local_prototypes, mix_with_prototype)

from conftest import central_diff, rel_err

SEEDS = (0, 1, 2)
BENCH = {"global_rounds": 30, "local_epochs": 5}
IDENTITY_DRIFT = {"drift.rotation": False, "drift.scale_min": 1.0, "drift.scale_max": 1.0,
                  "drift.shift_scale": 0.0}
VARIANTS = {
    "full": {},
    "ce": {"enable_kl": False, "enable_infonce": False},
    "ce+kl": {"enable_infonce": False},
    "ce+nce": {"enable_kl": False},
    "no_global_classifier": {"enable_global_classifier": False},
}


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        return ok
    return report


@functools.lru_cache(maxsize=None)
def _bench(method, variant, seed, drift_free=False):
    overrides = {**BENCH, **VARIANTS[variant], "method": method, "seed": seed}
    if drift_free:
        overrides.update(IDENTITY_DRIFT)
    if method != "fedpall":
        overrides = {k: v for k, v in overrides.items() if k not in FEDPALL_ONLY}
    return 100 * run(parse_config(None, overrides)).report.macro_avg


def bench(method, variant="full", drift_free=False):
    return np.array([_bench(method, variant, s, drift_free) for s in SEEDS])


def fmt(accs):
    return "[" + ", ".join(f"{a:.2f}" for a in accs) + f"] mean {np.mean(accs):.2f}"


# --------------------------------------------------------------------------- 1. gradients

EXTRACTOR = MlpSpec((6, 9, 7, 5))
N_INSTANCES = 20


def _extractor_grad_check(loss_and_feature_grad, seed):
    """Compare backprop through the extractor with central differences over all its parameters."""
    r = np.random.default_rng(seed)
    g = init_mlp(EXTRACTOR, make_rng(seed, 1))
    g = g.with_flat(g.flatten() + 0.1 * r.normal(size=g.flatten().shape))  # nonzero biases too
    x = r.normal(size=(8, EXTRACTOR.input_dim))
    z, cache = forward_mlp(g, x, cache=True)
    _, dz = loss_and_feature_grad(z)
    grads, _ = backward_mlp(g, cache, dz)
    analytic = grads.flatten()
    numeric = central_diff(lambda flat: loss_and_feature_grad(forward_mlp(g.with_flat(flat), x)[0])[0],
                           g.flatten(), h=1e-5)
    return rel_err(analytic, numeric)


def _ce_case(seed):
    r = np.random.default_rng(seed + 100)
    head = init_mlp(MlpSpec((5, 4)), make_rng(seed, 2))
    y = r.integers(0, 4, size=8)

    def f(z):
        logits, cache = forward_mlp(head, z, cache=True)
        out = cross_entropy(softmax(logits), y)
        return out.value, backward_mlp(head, cache, out.grad, need_param_grads=False)[1]
    return f


def _kl_case(seed):
    amp = init_mlp(MlpSpec((5, 6, 3)), make_rng(seed, 3))

    def f(z):
        logits, cache = forward_mlp(amp, z, cache=True)
        out = kl_uniform_loss(softmax(logits))
        return out.value, backward_mlp(amp, cache, out.grad, need_param_grads=False)[1]
    return f


def _nce_case(inclusive):
    def build(seed):
        r = np.random.default_rng(seed + 200)
        protos = r.normal(size=(4, 5))
        y = r.integers(0, 4, size=8)
        w = LossWeights(tau=float(r.uniform(0.1, 1.0)), include_positive_in_denominator=inclusive)

        def f(z):
            out = info_nce_loss(z, y, protos, w)
            return out.value, out.grad
        return f
    return build


def _combined_case(seed):
    r = np.random.default_rng(seed + 300)
    head = init_mlp(MlpSpec((5, 6, 4)), make_rng(seed, 4))
    amp = init_mlp(MlpSpec((5, 6, 3)), make_rng(seed, 5))
    protos = PrototypeSet(r.normal(size=(4, 5)), np.full(4, 2))
    y = r.integers(0, 4, size=8)
    w = LossWeights(mu=float(r.uniform(0.1, 1.0)), delta=float(r.uniform(0.1, 1.0)), tau=0.5)

    def f(z):
        out = combined_local_loss(z, y, head, amp, protos, w)
        return out.value, out.grad_features
    return f


def test_gradient_suite(verdict):
    cases = {"cross_entropy": _ce_case, "kl_uniform": _kl_case, "infonce_exclusive": _nce_case(False),
             "infonce_inclusive": _nce_case(True), "combined": _combined_case}
    start = time.perf_counter()
    worst = {name: max(_extractor_grad_check(build(s), s) for s in range(N_INSTANCES))
             for name, build in cases.items()}
    elapsed = time.perf_counter() - start
    ok = all(e <= 1e-4 for e in worst.values()) and elapsed < 30
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    assert verdict("1 gradient suite", ok, f"{detail}; {elapsed:.1f}s for {N_INSTANCES} instances each")


# --------------------------------------------------------------------------- 2. analytic values

def test_analytic_loss_values(verdict):
    n, k = 4, 7
    kl_uniform = kl_uniform_loss(np.full((5, n), 1 / n)).value
    kl_onehot = kl_uniform_loss(np.eye(n)[[0, 1, 3, 2, 0]]).value
    ce_uniform = cross_entropy(np.full((6, k), 1 / k), [0, 1, 2, 3, 4, 6]).value
    # three prototypes at 120 degrees in a plane; features on the normal axis see all of them equally
    angles = 2 * np.pi * np.arange(3) / 3
    protos = np.stack([np.cos(angles), np.sin(angles), np.zeros(3)], axis=1)
    z = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -2.0], [0.0, 0.0, 0.5]])
    nce = info_nce_loss(z, [0, 1, 2], protos, LossWeights(tau=0.7)).value
    errs = {"KL(uniform)": abs(kl_uniform), "KL(one-hot) - ln N": abs(kl_onehot - math.log(n)),
            "CE(uniform) - ln K": abs(ce_uniform - math.log(k)), "InfoNCE(symmetric) - ln 2": abs(nce - math.log(2))}
    ok = all(e <= 1e-9 for e in errs.values())
    assert verdict("2 analytic loss values", ok, ", ".join(f"|{k}| = {v:.1e}" for k, v in errs.items()))


# --------------------------------------------------------------------------- 3. aggregation oracle

def test_aggregation_matches_pooled(verdict):
    worst = 0.0
    for seed in range(10):
        r = np.random.default_rng(seed)
        g = init_mlp(MlpSpec((8, 16, 6)), make_rng(seed))
        x = r.normal(size=(300, 8))
        y = r.integers(0, 5, size=300)
        cuts = np.sort(r.choice(np.arange(1, 300), size=int(r.integers(1, 6)), replace=False))
        parts = np.split(r.permutation(300), cuts)
        local = [compute_local_prototypes(forward_mlp(g, x[p])[0], y[p], 5) for p in parts]
        pooled = compute_local_prototypes(forward_mlp(g, x)[0], y, 5)
        agg = aggregate_global_prototypes(local)
        assert np.array_equal(agg.counts, pooled.counts)
        worst = max(worst, float(np.max(np.abs(agg.prototypes - pooled.prototypes))))
    assert verdict("3 aggregation = pooled prototypes", worst <= 1e-12,
                   f"max abs diff {worst:.1e} over 10 random partitions")


# --------------------------------------------------------------------------- 4. mixing and masking

def test_mixing_and_masking(verdict):
    r = np.random.default_rng(0)
    z, proto = r.normal(size=32), r.normal(size=32)
    identities = (np.array_equal(mix_with_prototype(z, proto, 1.0), z)
                  and np.array_equal(mix_with_prototype(z, proto, 0.0), proto)
                  and np.array_equal(bernoulli_mask(z, 1.0, make_rng(1)), z)
                  and not np.any(bernoulli_mask(z, 0.0, make_rng(1))))
    mask_rng = make_rng(2)
    kept = [np.count_nonzero(bernoulli_mask(np.ones(1000), 0.8, mask_rng)) for _ in range(100)]
    fraction = sum(kept) / (100 * 1000)
    ok = identities and abs(fraction - 0.8) <= 0.02
    assert verdict("4 mixing/masking identities", ok,
                   f"identities {'hold' if identities else 'broken'}; retained fraction {fraction:.4f} "
                   f"over 100 masks of d=1000 (per-mask range {min(kept) / 1000:.3f}..{max(kept) / 1000:.3f})")


# --------------------------------------------------------------------------- 5. benchmark ordering

def test_benchmark_ordering(verdict):
    start = time.perf_counter()
    fp, fa, lo = bench("fedpall"), bench("fedavg"), bench("local")
    elapsed = time.perf_counter() - start
    seeds_ok = int(np.sum((fp >= fa + 2) & (fp >= lo)))
    mean_ok = fp.mean() >= fa.mean() + 2 and fp.mean() >= lo.mean()
    ok = seeds_ok >= 2 and mean_ok and elapsed <= 300
    assert verdict("5 FedPall vs FedAvg (+2) and local-only", ok,
                   f"fedpall {fmt(fp)}; fedavg {fmt(fa)}; local {fmt(lo)}; "
                   f"{seeds_ok}/3 seeds ok; {elapsed:.0f}s")


# --------------------------------------------------------------------------- 6. loss ablation

def test_loss_ablation(verdict):
    full = bench("fedpall", "full").mean()
    others = {v: bench("fedpall", v).mean() for v in ("ce", "ce+kl", "ce+nce")}
    ok = all(full >= m - 0.5 for m in others.values()) and all(full > m for m in others.values())
    detail = f"full {full:.2f}; " + ", ".join(f"{k} {m:.2f}" for k, m in others.items())
    assert verdict("6 full loss strictly best among ablations", ok, detail)


# --------------------------------------------------------------------------- 7. global classifier

def test_global_classifier_helps(verdict):
    with_gc, without = bench("fedpall", "full"), bench("fedpall", "no_global_classifier")
    ok = with_gc.mean() >= without.mean()
    assert verdict("7 global classifier + fine-tune >= disabled", ok,
                   f"enabled {fmt(with_gc)}; disabled {fmt(without)}")


# --------------------------------------------------------------------------- 8. determinism

DET = {"global_rounds": 3, "local_epochs": 2, "drift.samples_per_class": 60}


@pytest.mark.parametrize("method", ["fedpall", "fedavg", "local"])
def test_determinism(verdict, tmp_path, method):
    cfg = parse_config(None, {**DET, "method": method, "seed": 5})
    paths = []
    for i, order in enumerate([None, None, [3, 1, 0, 2], [2, 3, 1, 0]]):
        res = run(cfg, client_order=order)
        paths.append(write_metrics_csv(res.metrics, tmp_path / f"{i}.csv"))
    blobs = [p.read_bytes() for p in paths]
    ok = all(b == blobs[0] for b in blobs)
    assert verdict(f"8 determinism ({method})", ok,
                   "repeat run and two client orders give byte-identical CSVs" if ok else "CSV bytes differ")


# --------------------------------------------------------------------------- 9. frozen amplifier, reduction

def test_amplifier_frozen_and_local_reduction(verdict):
    cfg = parse_config(None, {**DET, "seed": 3})
    datasets = load_datasets(cfg)
    clients = init_clients(cfg, datasets)
    server = init_server(cfg, len(clients), datasets[0].input_dim, 5)
    phase1_generate_global_prototypes(clients, server, 5)
    frozen = True
    for c in clients:
        before = serialize_params(c.frozen_amplifier)
        phase2_local_training(c, cfg.loss_weights, cfg.local_epochs, cfg.batch_size, cfg.lr)
        frozen &= serialize_params(c.frozen_amplifier) == before

    off = {**DET, "seed": 3, "mu": 0.0, "delta": 0.0, "enable_global_classifier": False}
    reduced = run(parse_config(None, off))
    local = run(parse_config(None, {**DET, "seed": 3, "method": "local"}))
    same_models = all(a.extractor.equals(b.extractor) and a.classifier.equals(b.classifier)
                      for a, b in zip(reduced.clients, local.clients))
    same_acc = reduced.report.per_client == local.report.per_client
    ok = frozen and same_models and same_acc
    assert verdict("9 amplifier frozen in phase 2; reduction to local-only", ok,
                   f"amplifier bytes {'unchanged' if frozen else 'CHANGED'}; "
                   f"models {'bit-identical' if same_models else 'differ'}; "
                   f"per-client accuracy {'identical' if same_acc else 'differs'}")


# --------------------------------------------------------------------------- 10. drift-free control

def test_drift_free_control(verdict):
    fp, fa = bench("fedpall", drift_free=True), bench("fedavg", drift_free=True)
    gap = abs(fa.mean() - fp.mean())
    assert verdict("10 drift-free control: FedAvg within 5 of FedPall", gap <= 5,
                   f"fedpall {fmt(fp)}; fedavg {fmt(fa)}; gap {gap:.2f}")


def test_metrics_csv_sanity():
    res = run(parse_config(None, {**DET, "method": "local"}))
    assert metrics_to_csv(res.metrics).count("\n") == 1 + 4 * (3 + 1)
