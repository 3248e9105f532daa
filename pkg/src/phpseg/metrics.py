"""Evaluation metrics and the per-patch latency benchmark."""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from .exemplars import ExemplarSet
from .homology import Filtration, betti_curves, default_filtration, filtration_order, php_from_curves
from .imaging import DEFAULT_C_MAX, StainMatrix, TileManifest, hematoxylin_channel
from .segmenter import AccurateModel, FastConfig, classify_fast

__all__ = ["Confusion", "bench", "confusion", "prf1", "report", "specificity"]


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(predicted: Mapping[str, str], truth: Mapping[str, str]) -> Confusion:
    """Count outcomes over ids present in both maps; 'tumor' is positive."""
    tp = fp = fn = tn = 0
    for tid, actual in truth.items():
        if tid not in predicted:
            continue
        pos, act = predicted[tid] == "tumor", actual == "tumor"
        tp += pos and act
        fp += pos and not act
        fn += act and not pos
        tn += not pos and not act
    return Confusion(tp, fp, fn, tn)


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        warnings.warn(f"{what} is undefined (zero denominator); reporting 0", RuntimeWarning, stacklevel=3)
        return 0.0
    return num / den


def prf1(c: Confusion) -> tuple[float, float, float]:
    """Precision, recall and their harmonic mean."""
    pr = _ratio(c.tp, c.tp + c.fp, "precision")
    re = _ratio(c.tp, c.tp + c.fn, "recall")
    if pr + re == 0:
        if c.tp + c.fp > 0 and c.tp + c.fn > 0:
            warnings.warn("F1 is undefined (precision = recall = 0); reporting 0", RuntimeWarning, stacklevel=2)
        return pr, re, 0.0
    return pr, re, 2 * pr * re / (pr + re)


def specificity(c: Confusion) -> float:
    """True negative rate ``tn / (tn + fp)``."""
    return _ratio(c.tn, c.tn + c.fp, "specificity")


def report(c: Confusion) -> dict:
    pr, re, f1 = prf1(c)
    return {"precision": pr, "recall": re, "f1": f1, "specificity": specificity(c), "counts": asdict(c)}


# --------------------------------------------------------------------------
# Latency benchmark
# --------------------------------------------------------------------------

STAGES = ("deconvolution", "filtration", "betti", "classify")


def _summary(ms: np.ndarray) -> dict:
    return {
        "mean": float(ms.mean()),
        "median": float(np.median(ms)),
        "p95": float(np.percentile(ms, 95)),
    }


def bench(
    manifest: TileManifest,
    pipeline: str = "fast",
    repetitions: int = 3,
    *,
    warmup: int = 5,
    exemplars: ExemplarSet | None = None,
    fast: FastConfig = FastConfig(),
    model: AccurateModel | None = None,
    features: Mapping[str, np.ndarray] | None = None,
    filtration: Filtration | None = None,
    stains: StainMatrix | None = None,
    c_max: float = DEFAULT_C_MAX,
    literal_complement: bool = False,
) -> dict:
    """Single-threaded per-patch latency (ms) with a per-stage breakdown.

    Tiles are decoded before timing; each timed sample covers deconvolution,
    profile computation and classification of one tile.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if pipeline == "fast":
        if exemplars is None:
            raise ValueError("the fast pipeline needs an exemplar set")
        filtration = filtration or exemplars.filtration

        def classify(tid, prof):
            return classify_fast(prof, exemplars, fast, tid)

    elif pipeline == "accurate":
        if model is None or features is None:
            raise ValueError("the accurate pipeline needs both forests and a feature table")
        filtration = filtration or default_filtration()

        def classify(tid, prof):
            return model.decide(prof, features[tid], tid)

    else:
        raise ValueError(f"unknown pipeline {pipeline!r}")

    stains = stains or StainMatrix.ruifrok()
    tiles = [(e.tile_id, manifest.read_rgb(e)) for e in manifest]
    if not tiles:
        raise ValueError("empty manifest")

    def run_once(tid, rgb, clock=time.perf_counter_ns):
        t0 = clock()
        hema = hematoxylin_channel(rgb, stains, c_max)
        t1 = clock()
        order = filtration_order(hema)
        t2 = clock()
        b0, b1 = betti_curves(hema, filtration, literal_complement=literal_complement, order=order)
        prof = php_from_curves(filtration, b0, b1)
        t3 = clock()
        classify(tid, prof)
        t4 = clock()
        return (t1 - t0, t2 - t1, t3 - t2, t4 - t3)

    per_tile: dict[str, list[float]] = {tid: [] for tid, _ in tiles}
    stage_ns = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            run_once(*tiles[0])
        for _ in range(repetitions):
            for tid, rgb in tiles:
                parts = run_once(tid, rgb)
                stage_ns.append(parts)
                per_tile[tid].append(sum(parts) / 1e6)
    stage_ms = np.array(stage_ns, dtype=np.float64) / 1e6
    total = stage_ms.sum(axis=1)
    return {
        "pipeline": pipeline,
        "n_tiles": len(tiles),
        "tile_shape": list(tiles[0][1].shape[:2]),
        "repetitions": repetitions,
        "warmup": warmup,
        "latency_ms": _summary(total),
        "stages_ms": {name: _summary(stage_ms[:, i]) for i, name in enumerate(STAGES)},
        "samples_ms": per_tile,
    }
