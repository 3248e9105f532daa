"""Exemplar selection and the persisted reference set of the fast classifier.

Three selection strategies are provided:

* :func:`iqr_bin_select` - bins the interquartile range of per-patch scores
  (typically medians of flattened CNN activation maps) and keeps the patch
  closest to each bin center;
* :func:`kmeans_exemplars` - patches nearest to k-means centroids of their
  mean RGB color;
* :func:`random_exemplars` - seeded uniform sampling.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from ._parallel import pmap
from .errors import ConfigError, DataError, ManifestError
from .homology import Filtration, PHProfile, default_filtration, patch_php
from .imaging import DEFAULT_C_MAX, LABELS, StainMatrix, TileManifest

__all__ = [
    "ExemplarSet",
    "ScoreTable",
    "build_exemplar_set",
    "flatten_activation",
    "iqr_bin_select",
    "kmeans_exemplars",
    "patch_score",
    "random_exemplars",
    "read_activation",
    "write_activation",
]

_ACTV_MAGIC = b"ACTV"


# --------------------------------------------------------------------------
# Activation maps
# --------------------------------------------------------------------------


def read_activation(path: str | os.PathLike) -> NDArray[np.float64]:
    """Read an ``ACTV`` file into an array of shape ``(W, H, Z)``."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != _ACTV_MAGIC:
        raise DataError(f"{path}: not an ACTV activation file")
    w, h, z = struct.unpack("<III", data[4:16])
    if min(w, h, z) < 1:
        raise DataError(f"{path}: activation dimensions must be >= 1, got {(w, h, z)}")
    expected = 16 + 4 * w * h * z
    if len(data) != expected:
        raise DataError(f"{path}: expected {expected} bytes for {(w, h, z)}, got {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: activation values must be finite")
    return values.reshape(w, h, z)


def write_activation(path: str | os.PathLike, alpha) -> None:
    a = np.asarray(alpha, dtype="<f4")
    if a.ndim != 3:
        raise ValueError(f"activation tensor must be 3-D (W, H, Z), got shape {a.shape}")
    with open(path, "wb") as fh:
        fh.write(_ACTV_MAGIC + struct.pack("<III", *a.shape))
        fh.write(np.ascontiguousarray(a).tobytes())


def flatten_activation(alpha) -> NDArray[np.float64]:
    """Collapse a ``(W, H, Z)`` activation tensor to a ``(W, H)`` energy map.

    ``F(w, h) = sum_z |alpha(w, h, z)|^2``, min-max scaled to ``[0, 1]``;
    a constant map becomes all zeros.
    """
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim != 3 or min(a.shape) < 1:
        raise ValueError(f"activation tensor must be 3-D with positive dims, got shape {a.shape}")
    f = np.sum(np.abs(a) ** 2, axis=2)
    lo, hi = f.min(), f.max()
    if hi == lo:
        return np.zeros_like(f)
    return (f - lo) / (hi - lo)


def patch_score(fmap) -> float:
    """Lower median of a 2-D map."""
    v = np.sort(np.asarray(fmap, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("cannot score an empty map")
    return float(v[(v.size - 1) // 2])


# --------------------------------------------------------------------------
# Score tables and selection
# --------------------------------------------------------------------------


@dataclass
class ScoreTable:
    ids: list[str] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not len(self.ids) == len(self.labels) == len(self.scores):
            raise ValueError("ids, labels and scores must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("patch ids must be unique")
        for pid, lab, s in zip(self.ids, self.labels, self.scores):
            if lab not in LABELS:
                raise ValueError(f"patch {pid!r}: unknown label {lab!r}")
            if not np.isfinite(s):
                raise ValueError(f"patch {pid!r}: score must be finite")

    def add(self, patch_id: str, label: str, score: float) -> None:
        if patch_id in self.ids:
            raise ValueError(f"duplicate patch id {patch_id!r}")
        if label not in LABELS or not np.isfinite(score):
            raise ValueError(f"patch {patch_id!r}: bad label {label!r} or score {score!r}")
        self.ids.append(patch_id)
        self.labels.append(label)
        self.scores.append(float(score))

    def of_class(self, label: str) -> tuple[list[str], NDArray[np.float64]]:
        idx = [i for i, lab in enumerate(self.labels) if lab == label]
        return [self.ids[i] for i in idx], np.array([self.scores[i] for i in idx], dtype=np.float64)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patch_id", "label", "score"])
            for row in zip(self.ids, self.labels, self.scores):
                w.writerow([row[0], row[1], repr(row[2])])

    @classmethod
    def read(cls, path: str | os.PathLike) -> "ScoreTable":
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["patch_id", "label", "score"]:
                raise ManifestError(f"{path}:1: expected header 'patch_id,label,score', got {header}")
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 3:
                    raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
                try:
                    table.add(row[0], row[1], float(row[2]))
                except ValueError as exc:
                    raise ManifestError(f"{path}:{lineno}: {exc}") from None
        return table


def iqr_bin_select(scores: ScoreTable, label: str, q: int) -> list[str]:
    """Pick ``q`` patches of one class spread evenly over its interquartile range.

    ``[Q1, Q3]`` (linear-interpolation quartiles) is split into ``q`` equal
    bins.  For each bin, in ascending order, the not-yet-chosen patch whose
    score is closest to the bin center is taken; ties go to the patch listed
    first.
    """
    if q < 1:
        raise ValueError(f"Q must be >= 1, got {q}")
    ids, s = scores.of_class(label)
    if len(ids) < q:
        raise ValueError(f"class {label!r} has {len(ids)} scores, fewer than Q={q}")
    q1, q3 = np.quantile(s, [0.25, 0.75], method="linear")
    width = (q3 - q1) / q
    index = np.arange(len(s))
    taken = np.zeros(len(s), dtype=bool)
    chosen = []
    for j in range(q):
        center = q1 + (j + 0.5) * width
        ranking = np.lexsort((index, np.abs(s - center)))
        pick = next(i for i in ranking if not taken[i])
        taken[pick] = True
        chosen.append(ids[pick])
    return chosen


def kmeans_exemplars(ids: Sequence[str], patches: Sequence, q: int, seed: int = 0) -> list[str]:
    """Patches closest to the centroids of a k-means clustering of mean RGB.

    Clustering uses k-means++ seeding and at most 50 Lloyd iterations.  Each
    centroid claims its nearest unclaimed patch.
    """
    from sklearn.cluster import KMeans

    if len(ids) == 0:
        raise ValueError("no patches to cluster")
    if len(ids) != len(patches):
        raise ValueError("ids and patches differ in length")
    if not 1 <= q <= len(ids):
        raise ValueError(f"Q must lie in [1, {len(ids)}], got {q}")
    colors = np.array(
        [np.asarray(p, dtype=np.float64).reshape(-1, 3).mean(axis=0) for p in patches], dtype=np.float64
    )
    km = KMeans(n_clusters=q, init="k-means++", n_init=1, max_iter=50, random_state=seed)
    km.fit(colors)
    taken = np.zeros(len(ids), dtype=bool)
    chosen = []
    for center in km.cluster_centers_:
        d = np.sum((colors - center) ** 2, axis=1)
        d[taken] = np.inf
        pick = int(np.argmin(d))
        taken[pick] = True
        chosen.append(ids[pick])
    return chosen


def random_exemplars(ids: Sequence[str], q: int, seed: int = 0) -> list[str]:
    if not 1 <= q <= len(ids):
        raise ValueError(f"cannot draw {q} exemplars from a population of {len(ids)}")
    rng = np.random.default_rng(seed)
    return [ids[i] for i in rng.choice(len(ids), size=q, replace=False)]


# --------------------------------------------------------------------------
# Exemplar sets
# --------------------------------------------------------------------------


@dataclass
class ExemplarSet:
    """Labeled reference profiles plus how they were chosen."""

    tumor: list[tuple[str, PHProfile]]
    normal: list[tuple[str, PHProfile]]
    filtration: Filtration
    method: str = "unknown"
    seed: int | None = None

    def __post_init__(self) -> None:
        if not self.tumor or not self.normal:
            raise ConfigError(
                f"an exemplar set needs at least one exemplar per class "
                f"(tumor={len(self.tumor)}, normal={len(self.normal)})"
            )
        for _, prof in self.tumor + self.normal:
            if prof.thresholds != self.filtration.thresholds:
                raise ConfigError("all exemplar profiles must share the set's filtration")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ExemplarSet):
            return NotImplemented
        return (
            self.tumor == other.tumor
            and self.normal == other.normal
            and self.filtration == other.filtration
            and self.method == other.method
            and self.seed == other.seed
        )

    @property
    def sizes(self) -> tuple[int, int]:
        return len(self.tumor), len(self.normal)

    @cached_property
    def stacked(self) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.bool_]]:
        """``(p0, p1, is_tumor)`` arrays over tumor exemplars followed by normal ones."""
        profiles = [p for _, p in self.tumor] + [p for _, p in self.normal]
        is_tumor = np.array([True] * len(self.tumor) + [False] * len(self.normal))
        return (
            np.stack([p.p0 for p in profiles]),
            np.stack([p.p1 for p in profiles]),
            is_tumor,
        )

    def save(self, directory: str | os.PathLike) -> Path:
        """Write ``exemplars.json`` plus one profile CSV per exemplar; returns the JSON path."""
        directory = Path(directory)
        (directory / "profiles").mkdir(parents=True, exist_ok=True)
        doc = {
            "method": self.method,
            "seed": self.seed,
            "filtration": list(self.filtration.thresholds),
            "tumor": [],
            "normal": [],
        }
        for label, members in (("tumor", self.tumor), ("normal", self.normal)):
            for pid, prof in members:
                doc[label].append({"id": pid, "php": prof.rows()})
                prof.to_csv(directory / "profiles" / f"{label}_{_safe_name(pid)}.csv")
        path = directory / "exemplars.json"
        path.write_text(json.dumps(doc, indent=1))
        return path

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExemplarSet":
        path = Path(path)
        if path.is_dir():
            path = path / "exemplars.json"
        try:
            doc = json.loads(path.read_text())
            filtration = Filtration(tuple(doc["filtration"]))
            members = {
                label: [(str(e["id"]), PHProfile.from_rows(e["php"])) for e in doc[label]]
                for label in LABELS
            }
            return cls(members["tumor"], members["normal"], filtration, doc.get("method", "unknown"), doc.get("seed"))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: malformed exemplar manifest ({exc!r})") from exc


def _safe_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s)


def build_exemplar_set(
    manifest: TileManifest,
    tumor_ids: Sequence[str],
    normal_ids: Sequence[str],
    filtration: Filtration | None = None,
    *,
    stains: StainMatrix | None = None,
    c_max: float = DEFAULT_C_MAX,
    literal_complement: bool = False,
    method: str = "unknown",
    seed: int | None = None,
    workers: int = 1,
    out_dir: str | os.PathLike | None = None,
) -> ExemplarSet:
    """Compute profiles of the chosen tiles and bundle them as an :class:`ExemplarSet`."""
    filtration = filtration or default_filtration()
    for label, ids in (("tumor", tumor_ids), ("normal", normal_ids)):
        if not ids:
            raise ConfigError(f"no {label} exemplars selected")
        missing = [i for i in ids if i not in manifest]
        if missing:
            raise DataError(f"{label} exemplar ids not in manifest: {missing[:5]}")

    def profile(tile_id: str) -> PHProfile:
        rgb = manifest.read_rgb(manifest[tile_id])
        return patch_php(rgb, filtration, stains, c_max=c_max, literal_complement=literal_complement)

    all_ids = list(tumor_ids) + list(normal_ids)
    profiles = pmap(profile, all_ids, workers)
    nt = len(tumor_ids)
    ex = ExemplarSet(
        list(zip(tumor_ids, profiles[:nt])),
        list(zip(normal_ids, profiles[nt:])),
        filtration,
        method,
        seed,
    )
    if out_dir is not None:
        ex.save(out_dir)
    return ex
