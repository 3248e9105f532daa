"""Tumor/non-tumor classification of histology tiles from persistent homology profiles."""

from .divergence import kl, php_distance, sym_kl
from .errors import ConfigError, DataError, ManifestError
from .exemplars import ExemplarSet, ScoreTable, build_exemplar_set, iqr_bin_select
from .forest import ForestConfig, RegressionForest, train
from .homology import Filtration, PHProfile, betti0, betti1, betti_curves, default_filtration, patch_php, php
from .imaging import StainMatrix, TileManifest, hematoxylin_channel, stain_deconvolve, tile
from .segmenter import AccurateModel, FastConfig, classify_fast, ensemble_predict, segment

__version__ = "0.1.0"

__all__ = [
    "AccurateModel",
    "ConfigError",
    "DataError",
    "ExemplarSet",
    "FastConfig",
    "Filtration",
    "ForestConfig",
    "ManifestError",
    "PHProfile",
    "RegressionForest",
    "ScoreTable",
    "StainMatrix",
    "TileManifest",
    "betti0",
    "betti1",
    "betti_curves",
    "build_exemplar_set",
    "classify_fast",
    "default_filtration",
    "ensemble_predict",
    "hematoxylin_channel",
    "iqr_bin_select",
    "kl",
    "patch_php",
    "php",
    "php_distance",
    "segment",
    "stain_deconvolve",
    "sym_kl",
    "tile",
    "train",
]
