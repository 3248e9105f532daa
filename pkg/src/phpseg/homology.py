"""Persistent homology profiles of grayscale patches.

The filtration is the nested family of sublevel sets ``X_i = {p : I(p) < t_i}``.
For every threshold we need two Betti numbers:

* ``beta0`` - 8-connected components of ``X_i``;
* ``beta1`` - 4-connected components of the complement that do not reach the
  image border (bounded voids).  ``literal_complement=True`` instead counts
  every complement component.

Both curves come out of a single incremental union-find sweep each.  Pixels
are inserted in intensity order; a component count is read off whenever the
sweep crosses a threshold.  The complement ``I(p) >= t`` is a superlevel set,
so the void sweep walks the same ordering backwards.  There the one-pixel
padding ring around the grid is a single active set: every border-touching
component merges into it and is discounted.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np
from numpy.typing import NDArray

from .errors import ConfigError
from .imaging import DEFAULT_C_MAX, StainMatrix, as_gray, hematoxylin_channel

__all__ = [
    "SMOOTHING",
    "Filtration",
    "PHProfile",
    "betti0",
    "betti1",
    "betti_curves",
    "default_filtration",
    "filtration_order",
    "php",
    "patch_php",
    "php_from_curves",
    "sublevel_mask",
]

SMOOTHING = 1e-4


@dataclass(frozen=True)
class Filtration:
    """Interior thresholds ``t_1 < ... < t_{k-1}``; ``t_0 = 0`` and ``t_k = 256`` are implicit."""

    thresholds: tuple[int, ...]

    def __post_init__(self) -> None:
        ts = tuple(int(t) for t in self.thresholds)
        if any(int(t) != t for t in self.thresholds):
            raise ConfigError(f"thresholds must be integers: {list(self.thresholds)}")
        object.__setattr__(self, "thresholds", ts)
        if len(ts) < 1:
            raise ConfigError("a filtration needs at least one threshold")
        if any(t < 1 or t > 255 for t in ts):
            raise ConfigError(f"thresholds must lie in [1, 255]: {list(ts)}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"thresholds must be strictly increasing: {list(ts)}")

    @property
    def k(self) -> int:
        return len(self.thresholds) + 1

    @property
    def feature_length(self) -> int:
        return 2 * self.k - 2

    def __len__(self) -> int:
        return len(self.thresholds)

    def as_array(self) -> NDArray[np.int64]:
        return np.asarray(self.thresholds, dtype=np.int64)


def default_filtration() -> Filtration:
    """Uniform thresholds 16, 32, ..., 240 (k = 16)."""
    return Filtration(tuple(range(16, 241, 16)))


def sublevel_mask(img, t: int) -> NDArray[np.bool_]:
    if not 0 <= t <= 256:
        raise ValueError(f"threshold must lie in [0, 256], got {t}")
    return as_gray(img) < t


# --------------------------------------------------------------------------
# Union-find kernels
# --------------------------------------------------------------------------


@numba.njit(cache=True, nogil=True, inline="always")
def _find(parent, x):
    # path halving
    while parent[x] != x:
        parent[x] = parent[parent[x]]
        x = parent[x]
    return x


@numba.njit(cache=True, nogil=True)
def _sweep(flat, height, width, order, thresholds, connectivity, descending, border_set):
    """Component counts of the pixels inserted up to each threshold.

    Pixels live on a grid padded by one cell on every side so neighbor
    lookups need no bounds checks.  Ascending sweeps insert ``I < t``;
    descending sweeps insert ``I >= t``.  With ``border_set`` the padding
    ring is one active pre-merged set whose component is not counted.
    """
    pw = width + 2
    npad = (height + 2) * pw
    n = height * width
    parent = np.arange(npad).astype(np.int32)
    size = np.ones(npad, np.int32)
    active = np.zeros(npad, np.bool_)
    if connectivity == 8:
        offs = np.array([-pw - 1, -pw, -pw + 1, -1, 1, pw - 1, pw, pw + 1], np.int32)
    else:
        offs = np.array([-pw, -1, 1, pw], np.int32)
    count = 0
    if border_set:
        for i in range(npad):
            r = i // pw
            c = i - r * pw
            if r == 0 or c == 0 or r == height + 1 or c == width + 1:
                active[i] = True
                parent[i] = 0
        size[0] = 2 * (height + width) + 4
        count = 1
    nt = thresholds.shape[0]
    out = np.zeros(nt, np.int64)
    pos = n - 1 if descending else 0
    for step in range(nt):
        ti = nt - 1 - step if descending else step
        t = thresholds[ti]
        while 0 <= pos < n:
            src = order[pos]
            v = flat[src]
            if descending:
                if v < t:
                    break
                pos -= 1
            else:
                if v >= t:
                    break
                pos += 1
            r = src // width
            p = (r + 1) * pw + (src - r * width) + 1
            active[p] = True
            count += 1
            rp = p
            for k in range(offs.shape[0]):
                q = p + offs[k]
                if active[q]:
                    rq = _find(parent, q)
                    if rq != rp:
                        count -= 1
                        if size[rq] < size[rp]:
                            parent[rq] = rp
                            size[rp] += size[rq]
                        else:
                            parent[rp] = rq
                            size[rq] += size[rp]
                            rp = rq
        out[ti] = count - 1 if border_set else count
    return out


def _sublevel_components(flat, height, width, order, thresholds):
    """8-connected component counts of ``{I < t}`` per threshold."""
    return _sweep(flat, height, width, order, thresholds, 8, False, False)


def _superlevel_voids(flat, height, width, order, thresholds, bounded):
    """4-connected component counts of ``{I >= t}``; ``bounded`` drops border-touching ones."""
    return _sweep(flat, height, width, order, thresholds, 4, True, bounded)


def filtration_order(img) -> NDArray[np.intp]:
    """Flat pixel indices sorted by ascending intensity (stable)."""
    return np.argsort(as_gray(img).ravel(), kind="stable")


def betti_curves(
    img,
    filtration: Filtration | None = None,
    *,
    literal_complement: bool = False,
    order: NDArray[np.intp] | None = None,
) -> tuple[NDArray[np.int64], NDArray[np.int64]]:
    """Betti numbers ``(beta0, beta1)`` of every sublevel set in the filtration.

    ``order`` may be passed to reuse a precomputed :func:`filtration_order`.
    """
    a = as_gray(img)
    filtration = filtration or default_filtration()
    h, w = a.shape
    flat = np.ascontiguousarray(a).ravel()
    if order is None:
        order = filtration_order(a)
    ts = filtration.as_array()
    b0 = _sublevel_components(flat, h, w, order, ts)
    b1 = _superlevel_voids(flat, h, w, order, ts, not literal_complement)
    return b0, b1


def _mask_as_image(mask) -> NDArray[np.uint8]:
    m = np.asarray(mask, dtype=bool)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"expected a non-empty 2-D mask, got shape {m.shape}")
    return np.where(m, 0, 1).astype(np.uint8)


_MASK_FILTRATION = Filtration((1,))


def betti0(mask) -> int:
    """Number of 8-connected foreground components."""
    b0, _ = betti_curves(_mask_as_image(mask), _MASK_FILTRATION)
    return int(b0[0])


def betti1(mask, *, literal_complement: bool = False) -> int:
    """Number of bounded 4-connected background components (holes).

    ``literal_complement`` counts all background components, border-touching
    ones included, so an empty mask yields 1.
    """
    _, b1 = betti_curves(_mask_as_image(mask), _MASK_FILTRATION, literal_complement=literal_complement)
    return int(b1[0])


# --------------------------------------------------------------------------
# Profiles
# --------------------------------------------------------------------------


def _normalize(counts: NDArray[np.int64], eps: float) -> NDArray[np.float64]:
    v = counts.astype(np.float64) + eps
    return v / v.sum()


@dataclass(frozen=True, eq=False)
class PHProfile:
    """Betti curves of one patch and their smoothed, normalized distributions."""

    thresholds: tuple[int, ...]
    beta0: NDArray[np.int64] = field(repr=False)
    beta1: NDArray[np.int64] = field(repr=False)
    p0: NDArray[np.float64] = field(repr=False)
    p1: NDArray[np.float64] = field(repr=False)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PHProfile):
            return NotImplemented
        return (
            self.thresholds == other.thresholds
            and np.array_equal(self.beta0, other.beta0)
            and np.array_equal(self.beta1, other.beta1)
            and np.array_equal(self.p0, other.p0)
            and np.array_equal(self.p1, other.p1)
        )

    __hash__ = None

    @property
    def filtration(self) -> Filtration:
        return Filtration(self.thresholds)

    def feature_vector(self) -> NDArray[np.float64]:
        """Concatenated ``p0 || p1``, length ``2k - 2``."""
        return np.concatenate([self.p0, self.p1])

    def rows(self) -> list[list]:
        return [
            [int(t), int(b0), int(b1), float(q0), float(q1)]
            for t, b0, b1, q0, q1 in zip(self.thresholds, self.beta0, self.beta1, self.p0, self.p1)
        ]

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence]) -> "PHProfile":
        if not rows:
            raise ValueError("a profile needs at least one row")
        ts = tuple(int(r[0]) for r in rows)
        Filtration(ts)
        return cls(
            ts,
            np.array([int(r[1]) for r in rows], dtype=np.int64),
            np.array([int(r[2]) for r in rows], dtype=np.int64),
            np.array([float(r[3]) for r in rows], dtype=np.float64),
            np.array([float(r[4]) for r in rows], dtype=np.float64),
        )

    def to_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "beta0", "beta1", "p0", "p1"])
            # repr() keeps floats round-trippable
            for t, b0, b1, q0, q1 in self.rows():
                w.writerow([t, b0, b1, repr(q0), repr(q1)])

    @classmethod
    def from_csv(cls, path: str | os.PathLike) -> "PHProfile":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["t", "beta0", "beta1", "p0", "p1"]:
                raise ValueError(f"{path}:1: expected header 't,beta0,beta1,p0,p1', got {header}")
            rows = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 5:
                    raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
                rows.append(row)
        try:
            return cls.from_rows(rows)
        except (ValueError, ConfigError) as exc:
            raise ValueError(f"{path}: {exc}") from exc


def php_from_curves(
    filtration: Filtration, beta0, beta1, eps: float = SMOOTHING
) -> PHProfile:
    b0 = np.asarray(beta0, dtype=np.int64)
    b1 = np.asarray(beta1, dtype=np.int64)
    return PHProfile(filtration.thresholds, b0, b1, _normalize(b0, eps), _normalize(b1, eps))


def php(
    img,
    filtration: Filtration | None = None,
    *,
    literal_complement: bool = False,
    eps: float = SMOOTHING,
) -> PHProfile:
    """Persistent homology profile of a grayscale patch.

    Each Betti curve gets ``eps`` added to every bin and is then scaled to
    unit sum, so both distributions are strictly positive.
    """
    filtration = filtration or default_filtration()
    b0, b1 = betti_curves(img, filtration, literal_complement=literal_complement)
    return php_from_curves(filtration, b0, b1, eps)


def patch_php(
    rgb,
    filtration: Filtration | None = None,
    stains: StainMatrix | None = None,
    *,
    c_max: float = DEFAULT_C_MAX,
    literal_complement: bool = False,
) -> PHProfile:
    """Profile of an RGB tile: deconvolve, take the hematoxylin channel, filter."""
    return php(hematoxylin_channel(rgb, stains, c_max), filtration, literal_complement=literal_complement)
