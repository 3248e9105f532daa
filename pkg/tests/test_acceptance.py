"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import math
import time

import numpy as np
import pytest

from oracles import betti_by_flood_fill, dihedral
from phpseg.divergence import sym_kl
from phpseg.exemplars import ScoreTable, build_exemplar_set, iqr_bin_select
from phpseg.forest import ForestConfig, read_features, train
from phpseg.homology import betti0, betti1, betti_curves, default_filtration, patch_php
from phpseg.metrics import Confusion, bench, confusion, prf1, specificity
from phpseg.segmenter import AccurateModel, FastConfig, ensemble_predict, fast_decision, segment


def test_01_betti_oracle_equivalence(acceptance):
    f = default_filtration()
    rng = np.random.default_rng(2024)
    images = [rng.integers(0, 256, (32, 32), dtype=np.uint8) for _ in range(1000)]
    betti_curves(images[0], f)  # compile outside the timed region
    t0 = time.perf_counter()
    ours = [betti_curves(img, f) for img in images]
    elapsed = time.perf_counter() - t0
    mismatches = 0
    for img, (b0, b1) in zip(images, ours):
        r0, r1 = betti_by_flood_fill(img, f.thresholds)
        mismatches += int(b0.tolist() != r0) + int(b1.tolist() != r1)
    ok = mismatches == 0 and elapsed < 30
    acceptance("1 betti oracle", ok, f"mismatches={mismatches} incremental={elapsed:.2f}s")
    assert mismatches == 0
    assert elapsed < 30


def test_02_unit_shapes(acceptance):
    empty = np.zeros((5, 5), bool)
    full = np.ones((5, 5), bool)
    ring = full.copy()
    ring[1:-1, 1:-1] = False
    diag = np.zeros((3, 3), bool)
    diag[0, 0] = diag[1, 1] = True
    got = [(betti0(empty), betti1(empty)), (betti0(full), betti1(full)), (betti0(ring), betti1(ring)), betti0(diag)]
    ok = got == [(0, 0), (1, 0), (1, 1), 1]
    acceptance("2 unit shapes", ok, str(got))
    assert ok


def test_03_dihedral_invariance(acceptance):
    rng = np.random.default_rng(3)
    bad = 0
    for _ in range(100):
        rgb = rng.integers(0, 256, (256, 256, 3), dtype=np.uint8)
        ref = patch_php(rgb)
        bad += sum(patch_php(np.ascontiguousarray(g)) != ref for g in dihedral(rgb))
    acceptance("3 dihedral invariance", bad == 0, f"{bad} of 800 differ")
    assert bad == 0


def test_04_divergence(acceptance):
    p, q = (0.5, 0.5), (0.25, 0.75)
    v = sym_kl(p, q)
    ok = abs(v - 0.27465) <= 1e-5 and sym_kl(p, p) == 0 and sym_kl(p, q) == sym_kl(q, p)
    acceptance("4 divergence arithmetic", ok, f"sym_kl={v:.6f}")
    assert ok


def test_05_fast_rule_worked_case(acceptance):
    label, s_t, s_n = fast_decision([0, 5, 9], [4, 6, 7], FastConfig(c=0.2, k=3))
    ok = label == "tumor" and abs(s_t - 1.3679) <= 1e-4 and abs(s_n - 0.4493) <= 1e-4
    acceptance("5 fast rule worked case", ok, f"{label} {s_t:.4f} vs {s_n:.4f}")
    assert ok


def test_06_ensemble_branches(acceptance):
    got = [ensemble_predict(0.9, 0.8), ensemble_predict(0.2, 0.3), ensemble_predict(0.48, 0.52)]
    acceptance("6 ensemble branch table", got == [1, 0, 0], str(got))
    assert got == [1, 0, 0]


def _f1(decisions, truth):
    pred = {d.patch_id: d.label for d in decisions}
    return prf1(confusion(pred, truth))[2]


@pytest.mark.slow
def test_07_synthetic_discrimination(acceptance, bench_corpus):
    m, gen_seconds = bench_corpus
    t0 = time.perf_counter()
    train_ids = {lab: m.ids(lab)[:100] for lab in ("tumor", "normal")}
    test_ids = [i for lab in ("tumor", "normal") for i in m.ids(lab)[100:]]
    truth = {i: m[i].label for i in test_ids}

    # trivial score: mean RGB intensity of the tile
    table = ScoreTable()
    for lab, ids in train_ids.items():
        for i in ids:
            table.add(i, lab, float(m.read_rgb(m[i]).mean()))
    ex = build_exemplar_set(m, iqr_bin_select(table, "tumor", 64), iqr_bin_select(table, "normal", 64), method="scores")
    held_out = m.subset(test_ids)
    fast = segment(held_out, "fast", exemplars=ex)
    f1_fast = _f1(fast.decisions, truth)

    ids, H, labels = read_features(m.root / "features.csv")
    hist = dict(zip(ids, H))
    tr = train_ids["tumor"] + train_ids["normal"]
    y = np.array([1.0 if m[i].label == "tumor" else 0.0 for i in tr])
    P = np.stack([patch_php(m.read_rgb(m[i])).feature_vector() for i in tr])
    cfg = ForestConfig(seed=0)
    model = AccurateModel(train(P, y, cfg), train(np.stack([hist[i] for i in tr]), y, cfg))
    acc = segment(held_out, "accurate", model=model, features=hist)
    f1_acc = _f1(acc.decisions, truth)
    elapsed = gen_seconds + time.perf_counter() - t0

    ok = f1_fast >= 0.90 and f1_acc >= f1_fast - 0.02 and elapsed < 300
    acceptance("7 synthetic discrimination", ok, f"fast F1={f1_fast:.4f} accurate F1={f1_acc:.4f} runtime={elapsed:.1f}s")
    assert f1_fast >= 0.90
    assert f1_acc >= f1_fast - 0.02
    assert elapsed < 300


@pytest.mark.slow
def test_08_fast_latency(acceptance, bench_corpus):
    m, _ = bench_corpus
    ex = build_exemplar_set(m, m.ids("tumor")[:128], m.ids("normal")[:128])
    probe = m.subset(m.ids("tumor")[150:160] + m.ids("normal")[150:160])
    rep = bench(probe, "fast", repetitions=5, exemplars=ex)
    med = rep["latency_ms"]["median"]
    stages = ", ".join(f"{k}={v['median']:.2f}" for k, v in rep["stages_ms"].items())
    acceptance("8 fast latency", med <= 30.0, f"median={med:.2f} ms ({stages})")
    assert med <= 30.0


def test_09_forest_determinism_and_sanity(acceptance):
    rng = np.random.default_rng(9)
    X = rng.uniform(size=(400, 5))
    y = X[:, 0]
    cfg = ForestConfig(seed=4)
    same = train(X[:200], y[:200], cfg).dumps() == train(X[:200], y[:200], cfg).dumps()
    f = train(X[:200], y[:200], cfg)
    ratio = np.mean((f.predict(X[200:]) - y[200:]) ** 2) / np.mean((y[200:] - y[:200].mean()) ** 2)
    ok = same and ratio < 0.25
    acceptance("9 forest determinism + sanity", ok, f"identical={same} mse/var={ratio:.4f}")
    assert ok


def test_10_metric_formulas(acceptance):
    pr, re, f1 = prf1(Confusion(tp=9, fp=1, fn=3))
    sp = specificity(Confusion(tn=8, fp=2))
    ok = pr == 0.9 and re == 0.75 and math.isclose(f1, 0.81818, abs_tol=1e-5) and sp == 0.8
    acceptance("10 metric formulas", ok, f"({pr}, {re}, {f1:.5f}) specificity={sp}")
    assert ok
