"""Raster handling: stain deconvolution, hematoxylin extraction and tiling.

Grayscale images are ``uint8`` arrays of shape ``(height, width)`` and RGB
patches are ``uint8`` arrays of shape ``(height, width, 3)``.  Concentrations
follow the Beer-Lambert model of Ruifrok & Johnston: optical density is a
linear mix of per-stain absorbance vectors.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from numpy.typing import NDArray
from PIL import Image

from .errors import ConfigError, DataError, ManifestError

__all__ = [
    "ConfigError",
    "ManifestError",
    "StainMatrix",
    "TileEntry",
    "TileManifest",
    "as_gray",
    "as_rgb",
    "concentration_to_gray",
    "hematoxylin_channel",
    "read_image",
    "stain_deconvolve",
    "tile",
    "tile_offsets",
    "write_image",
]

LABELS = ("tumor", "normal")

DEFAULT_C_MAX = 2.0

# Ruifrok-Johnston H&E absorbance vectors (R, G, B).
_RJ_HEMATOXYLIN = (0.650, 0.704, 0.286)
_RJ_EOSIN = (0.072, 0.990, 0.105)


def _unit(v) -> NDArray[np.float64]:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if not np.isfinite(n) or n == 0:
        raise ConfigError(f"stain vector {v.tolist()} has zero or invalid norm")
    # leave already-unit rows untouched so JSON round trips are exact
    return v if abs(n - 1.0) <= 4 * np.finfo(np.float64).eps else v / n


@dataclass(frozen=True)
class StainMatrix:
    """Three unit absorbance rows: hematoxylin, eosin and residual."""

    hematoxylin: tuple[float, float, float]
    eosin: tuple[float, float, float]
    residual: tuple[float, float, float]

    @classmethod
    def from_vectors(cls, h, e, r=None) -> "StainMatrix":
        h, e = _unit(h), _unit(e)
        if r is None:
            r = np.cross(h, e)
        r = _unit(r)
        m = cls(tuple(map(float, h)), tuple(map(float, e)), tuple(map(float, r)))
        m.inverse()  # validate invertibility eagerly
        return m

    @classmethod
    def ruifrok(cls) -> "StainMatrix":
        return cls.from_vectors(_RJ_HEMATOXYLIN, _RJ_EOSIN)

    @classmethod
    def from_json(cls, path: str | os.PathLike) -> "StainMatrix":
        with open(path) as fh:
            data = json.load(fh)
        unknown = set(data) - {"h", "e", "r"}
        if unknown or "h" not in data or "e" not in data:
            raise ConfigError(
                f"{path}: stain matrix JSON needs keys 'h', 'e' (and optional 'r'); "
                f"unknown keys: {sorted(unknown)}"
            )
        return cls.from_vectors(data["h"], data["e"], data.get("r"))

    def to_json(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(
                {"h": list(self.hematoxylin), "e": list(self.eosin), "r": list(self.residual)},
                fh,
            )

    @property
    def matrix(self) -> NDArray[np.float64]:
        return np.array([self.hematoxylin, self.eosin, self.residual], dtype=np.float64)

    def inverse(self) -> NDArray[np.float64]:
        m = self.matrix
        cond = np.linalg.cond(m)
        if not np.isfinite(cond) or cond > 1e12:
            raise ConfigError(f"stain matrix is singular (condition number {cond:.3g})")
        return np.linalg.inv(m)


def as_rgb(patch) -> NDArray[np.uint8]:
    a = np.asarray(patch)
    if a.ndim != 3 or a.shape[2] != 3 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a non-empty (H, W, 3) RGB patch, got shape {a.shape}")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255):
            raise ValueError("RGB values must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def as_gray(img) -> NDArray[np.uint8]:
    a = np.asarray(img)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a non-empty (H, W) grayscale image, got shape {a.shape}")
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255):
            raise ValueError("intensities must lie in [0, 255]")
        a = a.astype(np.uint8)
    return a


def optical_density(patch) -> NDArray[np.float64]:
    """Per-pixel optical density ``-log10(max(I, 1) / 255)``, shape (H, W, 3)."""
    rgb = as_rgb(patch)
    return -np.log10(np.maximum(rgb, 1).astype(np.float64) / 255.0)


def stain_deconvolve(
    patch, stains: StainMatrix | None = None, *, clamp: bool = True
) -> tuple[NDArray[np.float64], NDArray[np.float64], NDArray[np.float64]]:
    """Split an RGB patch into hematoxylin, eosin and residual concentrations.

    Concentrations solve ``OD = C @ M`` for each pixel, where the rows of
    ``M`` are the stain absorbance vectors.  Negative values are clamped to
    zero unless ``clamp`` is False.
    """
    stains = stains or StainMatrix.ruifrok()
    od = optical_density(patch)
    conc = od @ stains.inverse()
    if clamp:
        np.maximum(conc, 0.0, out=conc)
    return conc[..., 0], conc[..., 1], conc[..., 2]


def hematoxylin_channel(
    patch, stains: StainMatrix | None = None, c_max: float = DEFAULT_C_MAX
) -> NDArray[np.uint8]:
    """Hematoxylin concentration as an inverted 8-bit image.

    ``[0, c_max]`` maps linearly onto ``[255, 0]`` so that dense nuclei are
    dark and enter a sublevel-set filtration first.
    """
    hema, _, _ = stain_deconvolve(patch, stains)
    return concentration_to_gray(hema, c_max)


def concentration_to_gray(conc, c_max: float = DEFAULT_C_MAX) -> NDArray[np.uint8]:
    """Map concentrations in ``[0, c_max]`` to intensities ``255 .. 0`` (rounded half-up)."""
    if not c_max > 0:
        raise ConfigError(f"c_max must be positive, got {c_max}")
    scaled = 255.0 * (1.0 - np.clip(np.asarray(conc, dtype=np.float64) / c_max, 0.0, 1.0))
    return np.floor(scaled + 0.5).astype(np.uint8)


def read_image(path: str | os.PathLike, mode: str | None = None) -> NDArray[np.uint8]:
    """Load PNG/PGM/PPM (anything Pillow reads) as uint8; ``mode`` 'L' or 'RGB'."""
    with Image.open(path) as im:
        if mode is None:
            mode = "L" if im.mode in ("L", "1", "I", "I;16") else "RGB"
        return np.asarray(im.convert(mode), dtype=np.uint8).copy()


def write_image(path: str | os.PathLike, array) -> None:
    a = np.asarray(array, dtype=np.uint8)
    Image.fromarray(a, mode="L" if a.ndim == 2 else "RGB").save(path)


# --------------------------------------------------------------------------
# Tiling and manifests
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TileEntry:
    tile_id: str
    path: str
    x: int
    y: int
    label: str | None = None


@dataclass
class TileManifest:
    """Ordered tile records; ``root`` resolves relative tile paths."""

    entries: list[TileEntry] = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        seen = set()
        for e in self.entries:
            if e.tile_id in seen:
                raise ManifestError(f"duplicate tile id {e.tile_id!r}")
            if e.x < 0 or e.y < 0:
                raise ManifestError(f"tile {e.tile_id!r} has a negative offset")
            if e.label is not None and e.label not in LABELS:
                raise ManifestError(f"tile {e.tile_id!r} has unknown label {e.label!r}")
            seen.add(e.tile_id)
        self._index = {e.tile_id: e for e in self.entries}

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[TileEntry]:
        return iter(self.entries)

    def __getitem__(self, tile_id: str) -> TileEntry:
        return self._index[tile_id]

    def __contains__(self, tile_id: object) -> bool:
        return tile_id in self._index

    def ids(self, label: str | None = None) -> list[str]:
        return [e.tile_id for e in self.entries if label is None or e.label == label]

    def resolve(self, entry: TileEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def read_rgb(self, entry: TileEntry) -> NDArray[np.uint8]:
        path = self.resolve(entry)
        try:
            return read_image(path, "RGB")
        except (OSError, ValueError) as exc:
            raise DataError(f"tile {entry.tile_id!r}: cannot read {path}: {exc}") from exc

    def subset(self, ids: Iterable[str]) -> "TileManifest":
        return TileManifest([self._index[i] for i in ids], self.root)

    def write(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            has_label = any(e.label is not None for e in self.entries)
            w.writerow(["tile_id", "path", "x", "y"] + (["label"] if has_label else []))
            for e in self.entries:
                row = [e.tile_id, e.path, e.x, e.y]
                if has_label:
                    row.append(e.label or "")
                w.writerow(row)

    @classmethod
    def read(cls, path: str | os.PathLike) -> "TileManifest":
        path = Path(path)
        entries = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or header[:4] != ["tile_id", "path", "x", "y"] or len(header) > 5 or (
                len(header) == 5 and header[4] != "label"
            ):
                raise ManifestError(f"{path}:1: expected header 'tile_id,path,x,y[,label]', got {header}")
            seen = set()
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) not in (4, len(header)):
                    raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                tid, p, xs, ys = row[:4]
                try:
                    x, y = int(xs), int(ys)
                except ValueError:
                    raise ManifestError(f"{path}:{lineno}: offsets must be integers, got {xs!r},{ys!r}") from None
                if x < 0 or y < 0:
                    raise ManifestError(f"{path}:{lineno}: negative offset")
                if not tid:
                    raise ManifestError(f"{path}:{lineno}: empty tile id")
                if tid in seen:
                    raise ManifestError(f"{path}:{lineno}: duplicate tile id {tid!r}")
                seen.add(tid)
                label = row[4] if len(row) > 4 and row[4] else None
                if label is not None and label not in LABELS:
                    raise ManifestError(f"{path}:{lineno}: label must be 'tumor' or 'normal', got {label!r}")
                entries.append(TileEntry(tid, p, x, y, label))
        return cls(entries, path.parent)


def tile_offsets(width: int, height: int, tile_size: int, stride: int) -> list[tuple[int, int]]:
    """Raster-order (x, y) offsets of full tiles; partial edge tiles are dropped."""
    if tile_size < 1 or stride < 1:
        raise ValueError("tile_size and stride must be >= 1")
    if width < tile_size or height < tile_size:
        return []
    xs = range(0, width - tile_size + 1, stride)
    ys = range(0, height - tile_size + 1, stride)
    return [(x, y) for y in ys for x in xs]


def tile(
    image,
    tile_size: int = 256,
    stride: int | None = None,
    out_dir: str | os.PathLike | None = None,
    prefix: str = "tile",
) -> TileManifest:
    """Cut ``image`` into ``tile_size`` squares every ``stride`` pixels.

    With ``out_dir`` the tiles are written as PNG files next to the returned
    manifest paths; otherwise ``path`` is left empty.
    """
    a = np.asarray(image)
    stride = tile_size if stride is None else stride
    h, w = a.shape[:2]
    entries = []
    for x, y in tile_offsets(w, h, tile_size, stride):
        tid = f"{prefix}_{x}_{y}"
        path = ""
        if out_dir is not None:
            path = f"{tid}.png"
            write_image(Path(out_dir) / path, a[y : y + tile_size, x : x + tile_size])
        entries.append(TileEntry(tid, path, x, y))
    return TileManifest(entries, Path(out_dir) if out_dir is not None else Path())
