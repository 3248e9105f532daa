"""Synthetic H&E-like tiles for desk-scale experiments.

Tumor-like tiles carry dense clusters of large, irregular, overlapping nuclei
with heterogeneous chromatin; normal-like tiles carry a sparse scatter of
small round nuclei on a bright stromal background.  Stain concentrations are
rendered to RGB with the Beer-Lambert model using the default stain basis, so
deconvolution recovers the hematoxylin layer.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

from .forest import write_features
from .imaging import StainMatrix, TileEntry, TileManifest, write_image

__all__ = ["intensity_histogram", "render_tile", "synth_corpus"]


def _box3(a: NDArray[np.float64]) -> NDArray[np.float64]:
    p = np.pad(a, 1, mode="edge")
    return sum(p[i : i + a.shape[0], j : j + a.shape[1]] for i in range(3) for j in range(3)) / 9.0


def _stamp(hema: NDArray[np.float64], cy: float, cx: float, radius, density) -> None:
    """Paint one nucleus; ``radius`` maps angle -> radius, ``density`` is a map or scalar.

    Overlapping nuclei keep the denser value.
    """
    h, w = hema.shape
    rmax = 1.5 * radius(np.linspace(0, 2 * np.pi, 64)).max() + 2
    y0, y1 = max(0, int(cy - rmax)), min(h, int(cy + rmax) + 1)
    x0, x1 = max(0, int(cx - rmax)), min(w, int(cx + rmax) + 1)
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy, dx = yy - cy, xx - cx
    dist = np.hypot(dy, dx)
    edge = radius(np.arctan2(dy, dx))
    soft = np.clip(edge - dist + 0.5, 0.0, 1.0)
    val = soft * (density[y0:y1, x0:x1] if isinstance(density, np.ndarray) else density)
    np.maximum(hema[y0:y1, x0:x1], val, out=hema[y0:y1, x0:x1])


def _normal_hema(rng: np.random.Generator, size: int) -> NDArray[np.float64]:
    hema = np.zeros((size, size))
    scale = (size / 256.0) ** 2
    n = max(1, int(rng.integers(12, 22) * scale))
    centers: list[tuple[float, float, float]] = []
    attempts = 0
    while len(centers) < n and attempts < 2000:
        attempts += 1
        r = rng.uniform(5.0, 7.5)
        cy, cx = rng.uniform(r + 2, size - r - 2, size=2)
        if all(math.hypot(cy - y, cx - x) > 3.0 * max(r, q) for y, x, q in centers):
            centers.append((cy, cx, r))
    for cy, cx, r in centers:
        ecc = rng.uniform(0.9, 1.1)
        tilt = rng.uniform(0, np.pi)
        rad = lambda th, r=r, ecc=ecc, tilt=tilt: r * (1 + (ecc - 1) * np.cos(2 * (th - tilt)))
        _stamp(hema, cy, cx, rad, rng.uniform(1.0, 1.2))
    return hema


def _tumor_hema(rng: np.random.Generator, size: int) -> NDArray[np.float64]:
    hema = np.zeros((size, size))
    # chromatin: coarse speckle spanning light to very dense
    chromatin = _box3(rng.uniform(0.35, 1.9, size=(size, size)))
    scale = (size / 256.0) ** 2
    n_clusters = max(1, int(rng.integers(4, 7) * scale))
    for _ in range(n_clusters):
        ccy, ccx = rng.uniform(0, size, size=2)
        spread = rng.uniform(18, 35)
        for _ in range(int(rng.integers(10, 18))):
            cy, cx = ccy + rng.normal(0, spread), ccx + rng.normal(0, spread)
            r = rng.uniform(8.0, 15.0)
            k = rng.integers(2, 5)
            amp = rng.uniform(0.15, 0.35, size=k)
            phase = rng.uniform(0, 2 * np.pi, size=k)
            freq = np.arange(2, 2 + k)
            rad = lambda th, r=r, amp=amp, phase=phase, freq=freq: r * (
                1 + np.sum(amp[:, None] * np.cos(freq[:, None] * np.ravel(th)[None, :] + phase[:, None]), axis=0).reshape(np.shape(th))
            )
            _stamp(hema, cy, cx, rad, chromatin * rng.uniform(0.8, 1.1))
    return hema


def render_tile(label: str, rng: np.random.Generator, size: int = 256, stains: StainMatrix | None = None) -> NDArray[np.uint8]:
    """One synthetic RGB tile of class ``label`` ('tumor' or 'normal')."""
    if label == "tumor":
        hema = _tumor_hema(rng, size)
    elif label == "normal":
        hema = _normal_hema(rng, size)
    else:
        raise ValueError(f"unknown label {label!r}")
    hema = hema + np.abs(rng.normal(0.0, 0.02, size=hema.shape))
    eosin = 0.25 + 0.1 * _box3(rng.uniform(0, 1, size=hema.shape)) - 0.15 * np.minimum(hema, 1.0)
    eosin = np.clip(eosin, 0.0, None)
    m = (stains or StainMatrix.ruifrok()).matrix
    od = hema[..., None] * m[0] + eosin[..., None] * m[1]
    rgb = 255.0 * np.power(10.0, -od)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def intensity_histogram(rgb, bins: int = 16) -> NDArray[np.float64]:
    """Normalized histogram of per-pixel mean RGB intensity over ``[0, 256)``."""
    mean = np.asarray(rgb, dtype=np.float64).mean(axis=2)
    counts, _ = np.histogram(mean, bins=bins, range=(0.0, 256.0))
    return counts / counts.sum()


def synth_corpus(
    out_dir: str | os.PathLike,
    n_per_class: int,
    seed: int = 0,
    size: int = 256,
    hist_bins: int = 16,
) -> TileManifest:
    """Write ``tiles/*.png``, ``manifest.csv`` and ``features.csv`` into ``out_dir``.

    Tiles are laid out on a square grid so the offsets form a mosaic.  The
    feature table holds :func:`intensity_histogram` vectors as a stand-in
    for externally computed features.
    """
    if n_per_class < 1:
        raise ValueError(f"n per class must be >= 1, got {n_per_class}")
    out = Path(out_dir)
    (out / "tiles").mkdir(parents=True, exist_ok=True)
    total = 2 * n_per_class
    cols = math.ceil(math.sqrt(total))
    entries, feats = [], []
    for ci, label in enumerate(("tumor", "normal")):
        for i in range(n_per_class):
            rng = np.random.default_rng([seed, ci, i])
            rgb = render_tile(label, rng, size)
            tid = f"{label}_{i:04d}"
            rel = f"tiles/{tid}.png"
            write_image(out / rel, rgb)
            k = len(entries)
            entries.append(TileEntry(tid, rel, (k % cols) * size, (k // cols) * size, label))
            feats.append(intensity_histogram(rgb, hist_bins))
    manifest = TileManifest(entries, out)
    manifest.write(out / "manifest.csv")
    write_features(out / "features.csv", [e.tile_id for e in entries], np.array(feats), [e.label for e in entries])
    return manifest
