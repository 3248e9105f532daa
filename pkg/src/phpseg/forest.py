"""Bagged regression forest (variance-reduction CART trees).

Each tree is grown on a bootstrap sample; at every node ``mtry`` features
are drawn without replacement and the split maximizing the reduction in
squared error is taken.  Thresholds sit midway between consecutive distinct
sorted values and rows with ``x <= threshold`` go left.  Ties prefer the
lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from ._parallel import pmap
from .errors import ConfigError, DataError, ManifestError

__all__ = [
    "ForestConfig",
    "RegressionForest",
    "RegressionTree",
    "predict",
    "read_features",
    "train",
    "write_features",
]

FORMAT = "phpseg-forest/1"


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 200
    mtry: int | None = None  # None -> ceil(p / 3)
    min_leaf: int = 5
    max_depth: int | None = None
    seed: int = 0
    bootstrap: bool = True

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ConfigError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_leaf < 1:
            raise ConfigError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError(f"mtry must be >= 1, got {self.mtry}")
        if self.max_depth is not None and self.max_depth < 0:
            raise ConfigError(f"max_depth must be >= 0, got {self.max_depth}")

    def resolve_mtry(self, p: int) -> int:
        m = math.ceil(p / 3) if self.mtry is None else self.mtry
        if not 1 <= m <= p:
            raise ConfigError(f"mtry={m} outside [1, {p}]")
        return m


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: NDArray[np.int64]
    threshold: NDArray[np.float64]
    left: NDArray[np.int64]
    right: NDArray[np.int64]
    value: NDArray[np.float64]
    n_samples: NDArray[np.int64]
    oob: NDArray[np.int64] | None = field(default=None, repr=False, compare=False)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def apply(self, X: NDArray[np.float64]) -> NDArray[np.int64]:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r, n = rows[inner], node[inner]
            go_left = X[r, f[inner]] <= self.threshold[n]
            node[inner] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X) -> NDArray[np.float64]:
        return self.value[self.apply(np.asarray(X, dtype=np.float64))]

    def to_dict(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"value": float(self.value[i]), "n": int(self.n_samples[i])}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "n": int(self.n_samples[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, root: dict) -> "RegressionTree":
        feature, threshold, left, right, value, n_samples = [], [], [], [], [], []

        def visit(node: dict) -> int:
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            n_samples.append(int(node.get("n", 0)))
            if "value" in node:
                value[i] = float(node["value"])
            else:
                feature[i] = int(node["feature"])
                threshold[i] = float(node["threshold"])
                left[i] = visit(node["left"])
                right[i] = visit(node["right"])
            return i

        visit(root)
        return cls(
            np.array(feature, dtype=np.int64),
            np.array(threshold, dtype=np.float64),
            np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64),
            np.array(value, dtype=np.float64),
            np.array(n_samples, dtype=np.int64),
        )


def _leaf_value(y: NDArray[np.float64]) -> float:
    lo, hi = y.min(), y.max()
    if lo == hi:
        return float(lo)
    return float(min(max(y.mean(), lo), hi))


def _best_split(
    Xn: NDArray[np.float64], yn: NDArray[np.float64], feats: NDArray[np.int64], min_leaf: int
) -> tuple[int, float, float] | None:
    """Best ``(feature, threshold, gain)`` among ``feats`` or None."""
    n = yn.shape[0]
    if n < 2 * min_leaf:
        return None
    cols = Xn[:, feats]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    ys = yn[order]
    csum = np.cumsum(ys, axis=0)[:-1]  # left sums for left sizes 1..n-1
    total = float(yn.sum())
    nl = np.arange(1, n, dtype=np.float64)[:, None]
    score = csum**2 / nl + (total - csum) ** 2 / (n - nl)
    valid = xs[1:] > xs[:-1]
    valid[: min_leaf - 1] = False
    valid[n - min_leaf :] = False
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    # feature-major flattening: argmax picks the lowest feature, then lowest threshold
    flat = int(np.argmax(score.T))
    j, i = divmod(flat, n - 1)
    gain = score[i, j] - total**2 / n
    sse = float(np.sum((yn - total / n) ** 2))
    if not gain > 1e-12 * max(sse, 1e-300):
        return None
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = 0.5 * (lo + hi)
    if not lo <= thr < hi:
        thr = lo
    return int(feats[j]), float(thr), float(gain)


def _grow(
    X: NDArray[np.float64],
    y: NDArray[np.float64],
    rows: NDArray[np.int64],
    cfg: ForestConfig,
    mtry: int,
    rng: np.random.Generator,
) -> RegressionTree:
    p = X.shape[1]
    feature, threshold, left, right, value, n_samples = [], [], [], [], [], []

    def new_node(idx: NDArray[np.int64]) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(_leaf_value(y[idx]))
        n_samples.append(idx.shape[0])
        return len(feature) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if cfg.max_depth is not None and depth >= cfg.max_depth:
            continue
        yn = y[idx]
        if yn.min() == yn.max():
            continue
        feats = np.sort(rng.choice(p, size=mtry, replace=False))
        split = _best_split(X[idx], yn, feats, cfg.min_leaf)
        if split is None:
            continue
        f, thr, _ = split
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is expanded first (preorder ids)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=np.float64),
        np.array(n_samples, dtype=np.int64),
    )


@dataclass
class RegressionForest:
    trees: list[RegressionTree]
    n_features: int
    config: ForestConfig
    y_range: tuple[float, float] = (0.0, 1.0)

    def tree_outputs(self, X) -> NDArray[np.float64]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X) -> NDArray[np.float64]:
        """Mean tree output per row, clamped to ``[0, 1]``."""
        out = self.tree_outputs(X)
        lo, hi = out.min(axis=0), out.max(axis=0)
        mean = np.clip(out.mean(axis=0), lo, hi)
        return np.clip(np.where(lo == hi, lo, mean), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "n_features": self.n_features,
            "config": asdict(self.config),
            "y_range": list(self.y_range),
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, doc: dict) -> "RegressionForest":
        if doc.get("format") != FORMAT:
            raise DataError(f"not a serialized forest (format={doc.get('format')!r})")
        return cls(
            [RegressionTree.from_dict(t) for t in doc["trees"]],
            int(doc["n_features"]),
            ForestConfig(**doc["config"]),
            tuple(doc["y_range"]),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "RegressionForest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed forest file ({exc!r})") from exc


def train(X, y, cfg: ForestConfig | None = None, workers: int = 1) -> RegressionForest:
    """Fit a bagged forest; identical inputs and seed give an identical forest."""
    cfg = cfg or ForestConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"X must be (n, p) and y (n,), got {X.shape} and {y.shape}")
    n, p = X.shape
    if n < 2:
        raise ValueError(f"need at least 2 training rows, got {n}")
    if p < 1:
        raise ValueError("need at least one feature")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValueError("training data must be finite")
    mtry = cfg.resolve_mtry(p)
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees)

    def fit_one(ss: np.random.SeedSequence) -> RegressionTree:
        rng = np.random.default_rng(ss)
        if cfg.bootstrap:
            rows = rng.integers(0, n, size=n)
            in_bag = np.zeros(n, dtype=bool)
            in_bag[rows] = True
            oob = np.flatnonzero(~in_bag)
        else:
            rows = np.arange(n)
            oob = np.empty(0, dtype=np.int64)
        tree = _grow(X, y, rows, cfg, mtry, rng)
        tree.oob = oob
        return tree

    trees = pmap(fit_one, streams, workers)
    return RegressionForest(trees, p, cfg, (float(y.min()), float(y.max())))


def predict(forest: RegressionForest, x) -> float:
    """Tumor probability for a single feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D feature vector, got shape {x.shape}")
    return float(forest.predict(x)[0])


# --------------------------------------------------------------------------
# Feature tables
# --------------------------------------------------------------------------


def write_features(path: str | os.PathLike, ids: Sequence[str], X, labels: Sequence[str | None] | None = None) -> None:
    X = np.asarray(X, dtype=np.float64)
    labels = labels if labels is not None else [None] * len(ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{j}" for j in range(X.shape[1])] + ["label"])
        for tid, row, lab in zip(ids, X, labels):
            w.writerow([tid] + [repr(float(v)) for v in row] + [lab or ""])


def read_features(path: str | os.PathLike) -> tuple[list[str], NDArray[np.float64], list[str | None]]:
    """Read an ``id,f0..f{p-1},label`` table."""
    ids, rows, labels = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or header[-1] != "label" or len(header) < 3:
            raise ManifestError(f"{path}:1: expected header 'id,f0..f{{p-1}},label', got {header}")
        p = len(header) - 2
        if header[1:-1] != [f"f{j}" for j in range(p)]:
            raise ManifestError(f"{path}:1: feature columns must be named f0..f{p - 1}")
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 2:
                raise ManifestError(f"{path}:{lineno}: expected {p + 2} fields, got {len(row)}")
            if row[0] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {row[0]!r}")
            seen.add(row[0])
            try:
                vals = [float(v) for v in row[1:-1]]
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-numeric feature value") from None
            lab = row[-1] or None
            if lab is not None and lab not in ("tumor", "normal"):
                raise ManifestError(f"{path}:{lineno}: label must be 'tumor' or 'normal', got {lab!r}")
            ids.append(row[0])
            rows.append(vals)
            labels.append(lab)
    X = np.array(rows, dtype=np.float64).reshape(len(rows), p)
    return ids, X, labels
