import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phpseg.exemplars import build_exemplar_set
from phpseg.metrics import Confusion, _summary, bench, confusion, prf1, report, specificity
from phpseg.segmenter import FastConfig

counts = st.builds(Confusion, *(st.integers(0, 50) for _ in range(4)))


def test_prf1_worked():
    pr, re, f1 = prf1(Confusion(tp=9, fp=1, fn=3))
    assert (pr, re) == (0.9, 0.75)
    assert f1 == pytest.approx(0.81818, abs=1e-5)


def test_perfect():
    assert prf1(Confusion(tp=5, tn=5)) == (1.0, 1.0, 1.0)


def test_degenerate_warns():
    with pytest.warns(RuntimeWarning):
        assert prf1(Confusion(tp=0, fp=2, fn=3)) == (0.0, 0.0, 0.0)
    with pytest.warns(RuntimeWarning):
        assert prf1(Confusion(tn=4)) == (0.0, 0.0, 0.0)


def test_specificity():
    assert specificity(Confusion(tn=8, fp=2)) == 0.8
    assert specificity(Confusion(tn=3)) == 1.0
    assert specificity(Confusion(fp=6)) == 0.0
    with pytest.warns(RuntimeWarning):
        assert specificity(Confusion(tp=1)) == 0.0


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        Confusion(tp=-1)


def test_confusion_from_maps():
    pred = {"a": "tumor", "b": "tumor", "c": "normal", "d": "normal", "extra": "tumor"}
    truth = {"a": "tumor", "b": "normal", "c": "tumor", "d": "normal", "missing": "tumor"}
    assert confusion(pred, truth) == Confusion(tp=1, fp=1, fn=1, tn=1)


def test_report_schema():
    r = report(Confusion(tp=9, fp=1, fn=3, tn=7))
    assert set(r) == {"precision", "recall", "f1", "specificity", "counts"}
    assert r["counts"] == {"tp": 9, "fp": 1, "fn": 3, "tn": 7}


@given(counts)
def test_f1_between_precision_and_recall(c):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pr, re, f1 = prf1(c)
    if pr + re > 0:
        assert min(pr, re) - 1e-12 <= f1 <= max(pr, re) + 1e-12


@given(st.lists(st.tuples(st.sampled_from(["tumor", "normal"]), st.sampled_from(["tumor", "normal"])), min_size=1), st.randoms())
def test_permutation_invariant(rows, rnd):
    ids = [f"p{i}" for i in range(len(rows))]
    pred = {i: r[0] for i, r in zip(ids, rows)}
    truth = {i: r[1] for i, r in zip(ids, rows)}
    shuffled = list(zip(ids, rows))
    rnd.shuffle(shuffled)
    assert confusion(dict((i, r[0]) for i, r in shuffled), dict((i, r[1]) for i, r in shuffled)) == confusion(pred, truth)


@pytest.fixture(scope="module")
def setup(small_corpus):
    ex = build_exemplar_set(small_corpus, small_corpus.ids("tumor")[:5], small_corpus.ids("normal")[:5])
    return small_corpus.subset(small_corpus.ids()[:6]), ex


class TestBench:
    def test_one_sample_per_tile(self, setup):
        m, ex = setup
        rep = bench(m, "fast", 1, warmup=1, exemplars=ex, fast=FastConfig(k=5))
        assert rep["n_tiles"] == 6
        assert all(len(v) == 1 for v in rep["samples_ms"].values())
        assert set(rep["stages_ms"]) == {"deconvolution", "filtration", "betti", "classify"}

    def test_summary_arithmetic(self, setup):
        m, ex = setup
        rep = bench(m, "fast", 3, warmup=0, exemplars=ex, fast=FastConfig(k=5))
        samples = np.concatenate([np.array(v) for v in rep["samples_ms"].values()])
        assert samples.size == 18
        lat = rep["latency_ms"]
        assert lat["median"] == pytest.approx(np.median(samples))
        assert lat["mean"] == pytest.approx(samples.mean())
        assert lat["median"] <= lat["p95"]
        # stage means add up to the total mean
        assert sum(s["mean"] for s in rep["stages_ms"].values()) == pytest.approx(lat["mean"])

    def test_right_skew_median_below_mean(self):
        s = _summary(np.array([5.0, 5.1, 5.2, 5.3, 9.0]))
        assert s["median"] <= s["mean"]

    def test_bad_arguments(self, setup):
        m, ex = setup
        with pytest.raises(ValueError):
            bench(m, "fast", 0, exemplars=ex)
        with pytest.raises(ValueError):
            bench(m, "fast", 1)
        with pytest.raises(ValueError):
            bench(m, "other", 1, exemplars=ex)
