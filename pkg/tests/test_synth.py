import numpy as np

from phpseg.homology import patch_php
from phpseg.imaging import TileManifest
from phpseg.synth import intensity_histogram, render_tile, synth_corpus


def test_counts_and_manifest(tmp_path):
    m = synth_corpus(tmp_path, 50, seed=1, size=32)
    assert len(m) == 100
    assert len(list((tmp_path / "tiles").glob("*.png"))) == 100
    back = TileManifest.read(tmp_path / "manifest.csv")
    assert back.ids("tumor") == [f"tumor_{i:04d}" for i in range(50)]
    assert len(back.ids("normal")) == 50


def test_byte_identical_per_seed(tmp_path):
    synth_corpus(tmp_path / "a", 3, seed=5, size=48)
    synth_corpus(tmp_path / "b", 3, seed=5, size=48)
    synth_corpus(tmp_path / "c", 3, seed=6, size=48)
    for p in (tmp_path / "a/tiles").iterdir():
        assert p.read_bytes() == (tmp_path / "b/tiles" / p.name).read_bytes()
    assert (tmp_path / "a/tiles/tumor_0000.png").read_bytes() != (tmp_path / "c/tiles/tumor_0000.png").read_bytes()
    assert (tmp_path / "a/features.csv").read_text() == (tmp_path / "b/features.csv").read_text()


def test_histogram_normalized():
    h = intensity_histogram(render_tile("normal", np.random.default_rng(0), 64))
    assert h.shape == (16,) and abs(h.sum() - 1) < 1e-12


def test_high_threshold_beta0_mass_separates(bench_corpus):
    m, _ = bench_corpus
    mass = {}
    for label in ("tumor", "normal"):
        v = []
        for tid in m.ids(label):
            p = patch_php(m.read_rgb(m[tid]))
            v.append(p.p0[np.asarray(p.thresholds) >= 128].sum())
        mass[label] = np.array(v)
    gap = abs(mass["tumor"].mean() - mass["normal"].mean())
    assert gap >= 2 * max(mass["tumor"].std(ddof=1), mass["normal"].std(ddof=1))
