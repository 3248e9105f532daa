"""Patch classifiers and whole-manifest segmentation.

Two pipelines share one output schema:

``fast``
    Symmetric-KL distance from the patch profile to every exemplar; among
    the ``k`` nearest, similarities ``exp(-c * d)`` are summed per class and
    the larger sum wins (ties go to normal).
``accurate``
    Two regression forests, one on the concatenated profile, one on an
    external feature vector, merged by :func:`ensemble_predict`.

Class 1 is tumor throughout.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from ._parallel import pmap
from .divergence import php_distances
from .errors import ConfigError, DataError, ManifestError
from .exemplars import ExemplarSet
from .forest import RegressionForest
from .homology import Filtration, PHProfile, default_filtration, patch_php
from .imaging import DEFAULT_C_MAX, StainMatrix, TileEntry, TileManifest

__all__ = [
    "AccurateModel",
    "FastConfig",
    "PatchDecision",
    "ProbabilityMap",
    "SegmentResult",
    "classify_fast",
    "ensemble_predict",
    "fast_decision",
    "segment",
]

log = logging.getLogger(__name__)

DECISION_HEADER = ["tile_id", "x", "y", "label", "score_t", "score_n", "prob"]


@dataclass(frozen=True)
class FastConfig:
    c: float = 0.2
    k: int = 11

    def __post_init__(self) -> None:
        if not (self.c > 0 and math.isfinite(self.c)):
            raise ConfigError(f"similarity constant c must be positive, got {self.c}")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")


@dataclass(frozen=True)
class PatchDecision:
    patch_id: str
    label: str
    score_t: float
    score_n: float
    prob: float | None = None

    @property
    def is_tumor(self) -> bool:
        return self.label == "tumor"


def fast_decision(
    tumor_d: Sequence[float], normal_d: Sequence[float], cfg: FastConfig = FastConfig()
) -> tuple[str, float, float]:
    """Label and per-class similarity sums from raw exemplar distances.

    The ``k`` smallest distances are taken over both classes together; at a
    tie on the cutoff, normal exemplars come first.
    """
    td = np.asarray(tumor_d, dtype=np.float64)
    nd = np.asarray(normal_d, dtype=np.float64)
    if td.size == 0 or nd.size == 0:
        raise ConfigError("both exemplar classes must be non-empty")
    if cfg.k > td.size + nd.size:
        raise ConfigError(f"k={cfg.k} exceeds the {td.size + nd.size} available exemplars")
    d = np.concatenate([td, nd])
    is_tumor = np.concatenate([np.ones(td.size, bool), np.zeros(nd.size, bool)])
    nearest = np.lexsort((is_tumor, d))[: cfg.k]
    sim = np.exp(-d[nearest] * cfg.c)
    sel = is_tumor[nearest]
    s_t = float(np.sum(sim[sel]))
    s_n = float(np.sum(sim[~sel]))
    return ("tumor" if s_t > s_n else "normal"), s_t, s_n


def classify_fast(
    profile: PHProfile, exemplars: ExemplarSet, cfg: FastConfig = FastConfig(), patch_id: str = ""
) -> PatchDecision:
    if profile.thresholds != exemplars.filtration.thresholds:
        raise ValueError("patch profile and exemplar set use different filtrations")
    p0, p1, is_tumor = exemplars.stacked
    d = php_distances(profile, p0, p1)
    label, s_t, s_n = fast_decision(d[is_tumor], d[~is_tumor], cfg)
    return PatchDecision(patch_id, label, s_t, s_n, s_t / (s_t + s_n))


def ensemble_predict(o1: float, o2: float) -> int:
    """Merge the profile-forest output ``o1`` and the external-forest output ``o2``.

    Returns 0 below an average of 0.49, 1 above 0.51, and ``o1`` rounded
    half-up for the critical patches in between.
    """
    for name, v in (("o1", o1), ("o2", o2)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    avg = (o1 + o2) / 2
    if avg < 0.49:
        return 0
    if avg > 0.51:
        return 1
    return int(math.floor(o1 + 0.5))


@dataclass
class AccurateModel:
    php_forest: RegressionForest
    feature_forest: RegressionForest

    def decide(self, profile: PHProfile, features, patch_id: str = "") -> PatchDecision:
        o1 = float(self.php_forest.predict(profile.feature_vector())[0])
        o2 = float(self.feature_forest.predict(np.asarray(features, dtype=np.float64))[0])
        label = "tumor" if ensemble_predict(o1, o2) == 1 else "normal"
        return PatchDecision(patch_id, label, o1, o2, (o1 + o2) / 2)


# --------------------------------------------------------------------------
# Segmentation of a manifest
# --------------------------------------------------------------------------


@dataclass
class ProbabilityMap:
    """Per-tile probabilities on the grid spanned by the tile offsets."""

    xs: list[int]
    ys: list[int]
    prob: NDArray[np.float64]  # NaN where no decision
    label: NDArray[np.int8]  # 1 tumor, 0 normal, -1 missing

    @classmethod
    def from_decisions(cls, manifest: TileManifest, decisions: Sequence[PatchDecision]) -> "ProbabilityMap":
        xs = sorted({e.x for e in manifest})
        ys = sorted({e.y for e in manifest})
        col = {x: i for i, x in enumerate(xs)}
        row = {y: i for i, y in enumerate(ys)}
        prob = np.full((len(ys), len(xs)), np.nan)
        label = np.full((len(ys), len(xs)), -1, dtype=np.int8)
        for d in decisions:
            e = manifest[d.patch_id]
            p = d.prob if d.prob is not None else float(d.is_tumor)
            prob[row[e.y], col[e.x]] = min(max(p, 0.0), 1.0)
            label[row[e.y], col[e.x]] = 1 if d.is_tumor else 0
        return cls(xs, ys, prob, label)

    def write_label_grid(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["y\\x"] + self.xs)
            for y, r in zip(self.ys, self.label):
                w.writerow([y] + ["" if v < 0 else int(v) for v in r])


@dataclass
class SegmentResult:
    decisions: list[PatchDecision]
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def _tile_task(
    manifest: TileManifest,
    decide: Callable[[TileEntry, PHProfile], PatchDecision],
    filtration: Filtration,
    stains: StainMatrix | None,
    c_max: float,
    literal_complement: bool,
):
    def run(entry: TileEntry):
        try:
            rgb = manifest.read_rgb(entry)
            prof = patch_php(rgb, filtration, stains, c_max=c_max, literal_complement=literal_complement)
            return decide(entry, prof)
        except (DataError, KeyError, ValueError) as exc:
            log.warning("tile %s skipped: %s", entry.tile_id, exc)
            return (entry.tile_id, str(exc))

    return run


def segment(
    manifest: TileManifest,
    pipeline: str = "fast",
    *,
    exemplars: ExemplarSet | None = None,
    fast: FastConfig = FastConfig(),
    model: AccurateModel | None = None,
    features: Mapping[str, NDArray[np.float64]] | None = None,
    filtration: Filtration | None = None,
    stains: StainMatrix | None = None,
    c_max: float = DEFAULT_C_MAX,
    literal_complement: bool = False,
    workers: int = 1,
) -> SegmentResult:
    """Classify every tile; unreadable tiles are recorded as failures and skipped."""
    if pipeline == "fast":
        if exemplars is None:
            raise ConfigError("the fast pipeline needs an exemplar set")
        filtration = filtration or exemplars.filtration
        if filtration != exemplars.filtration:
            raise ConfigError("configured filtration differs from the exemplar set's")
        if fast.k > sum(exemplars.sizes):
            raise ConfigError(f"k={fast.k} exceeds the {sum(exemplars.sizes)} exemplars")

        def decide(entry: TileEntry, prof: PHProfile) -> PatchDecision:
            return classify_fast(prof, exemplars, fast, entry.tile_id)

    elif pipeline == "accurate":
        if model is None or features is None:
            raise ConfigError("the accurate pipeline needs both forests and a feature table")
        filtration = filtration or default_filtration()
        if model.php_forest.n_features != filtration.feature_length:
            raise ConfigError(
                f"profile forest expects {model.php_forest.n_features} features but the "
                f"filtration yields {filtration.feature_length}"
            )

        def decide(entry: TileEntry, prof: PHProfile) -> PatchDecision:
            if entry.tile_id not in features:
                raise DataError(f"no external feature vector for tile {entry.tile_id!r}")
            return model.decide(prof, features[entry.tile_id], entry.tile_id)

    else:
        raise ConfigError(f"unknown pipeline {pipeline!r} (expected 'fast' or 'accurate')")

    run = _tile_task(manifest, decide, filtration, stains, c_max, literal_complement)
    results = pmap(run, sorted(manifest, key=lambda e: e.tile_id), workers)
    decisions = [r for r in results if isinstance(r, PatchDecision)]
    failures = [r for r in results if not isinstance(r, PatchDecision)]
    return SegmentResult(decisions, failures)


def write_decisions(path: str | os.PathLike, manifest: TileManifest, decisions: Sequence[PatchDecision]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECISION_HEADER)
        for d in sorted(decisions, key=lambda d: d.patch_id):
            e = manifest[d.patch_id]
            w.writerow([d.patch_id, e.x, e.y, d.label, repr(d.score_t), repr(d.score_n), "" if d.prob is None else repr(d.prob)])


def read_decisions(path: str | os.PathLike) -> dict[str, str]:
    """Map tile id to predicted label from a decision CSV."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != DECISION_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(DECISION_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(DECISION_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(DECISION_HEADER)} fields, got {len(row)}")
            if row[3] not in ("tumor", "normal"):
                raise ManifestError(f"{path}:{lineno}: bad label {row[3]!r}")
            if row[0] in out:
                raise ManifestError(f"{path}:{lineno}: duplicate tile id {row[0]!r}")
            out[row[0]] = row[3]
    return out


def render_overlay(
    manifest: TileManifest,
    decisions: Sequence[PatchDecision],
    path: str | os.PathLike,
    max_side: int = 2048,
    alpha: float = 0.45,
) -> None:
    """Mosaic of the tiles at their offsets with tumor tiles tinted red."""
    by_id = {d.patch_id: d for d in decisions}
    entries = [e for e in manifest if e.tile_id in by_id]
    if not entries:
        Image.new("RGB", (1, 1), (255, 255, 255)).save(path)
        return
    first = manifest.read_rgb(entries[0])
    th, tw = first.shape[:2]
    width = max(e.x for e in entries) + tw
    height = max(e.y for e in entries) + th
    scale = max(1, math.ceil(max(width, height) / max_side))
    canvas = Image.new("RGB", (math.ceil(width / scale), math.ceil(height / scale)), (255, 255, 255))
    red = np.array([255.0, 0.0, 0.0])
    for e in entries:
        try:
            rgb = manifest.read_rgb(e).astype(np.float64)
        except DataError:
            continue
        if by_id[e.tile_id].is_tumor:
            rgb = (1 - alpha) * rgb + alpha * red
        im = Image.fromarray(np.clip(rgb + 0.5, 0, 255).astype(np.uint8))
        if scale > 1:
            im = im.resize((max(1, im.width // scale), max(1, im.height // scale)), Image.BILINEAR)
        canvas.paste(im, (e.x // scale, e.y // scale))
    canvas.save(path)


def write_outputs(out_dir: str | os.PathLike, manifest: TileManifest, result: SegmentResult) -> dict[str, Path]:
    """Write ``decisions.csv``, ``label_grid.csv`` and ``overlay.png`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "decisions": out / "decisions.csv",
        "grid": out / "label_grid.csv",
        "overlay": out / "overlay.png",
    }
    write_decisions(paths["decisions"], manifest, result.decisions)
    ProbabilityMap.from_decisions(manifest, result.decisions).write_label_grid(paths["grid"])
    render_overlay(manifest, result.decisions, paths["overlay"])
    return paths
