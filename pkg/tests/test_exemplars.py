import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from phpseg.errors import ConfigError, DataError, ManifestError
from phpseg.exemplars import (
    ExemplarSet,
    ScoreTable,
    build_exemplar_set,
    flatten_activation,
    iqr_bin_select,
    kmeans_exemplars,
    patch_score,
    random_exemplars,
    read_activation,
    write_activation,
)
from phpseg.homology import Filtration
from phpseg.imaging import TileEntry, TileManifest, write_image


def table(scores, label="tumor"):
    return ScoreTable([f"p{i}" for i in range(len(scores))], [label] * len(scores), list(map(float, scores)))


def iqr_reference(scores, q):
    """Brute-force selection with stdlib type-7 quartiles."""
    q1, _, q3 = statistics.quantiles(scores, n=4, method="inclusive")
    width = (q3 - q1) / q
    chosen = []
    for j in range(q):
        center = q1 + (j + 0.5) * width
        best = min((i for i in range(len(scores)) if i not in chosen), key=lambda i: (abs(scores[i] - center), i))
        chosen.append(best)
    return chosen


class TestActivation:
    def test_single_channel_is_square(self):
        a = np.array([[[1.0], [-2.0]], [[3.0], [0.5]]])
        f = np.array([[1.0, 4.0], [9.0, 0.25]])
        assert np.allclose(flatten_activation(a), (f - f.min()) / (f.max() - f.min()))

    def test_constant_map(self):
        assert np.all(flatten_activation(np.ones((4, 4, 4))) == 0)

    def test_random_sum_of_squares(self):
        a = np.random.default_rng(0).normal(size=(2, 2, 3))
        f = np.array([[sum(a[w, h, z] ** 2 for z in range(3)) for h in range(2)] for w in range(2)])
        assert np.allclose(flatten_activation(a), (f - f.min()) / (f.max() - f.min()), atol=1e-12)

    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)), elements=st.floats(-1e3, 1e3)))
    def test_range(self, a):
        f = flatten_activation(a)
        assert f.min() >= 0 and f.max() <= 1

    def test_file_round_trip(self, tmp_path):
        a = np.random.default_rng(1).normal(size=(3, 2, 5)).astype(np.float32)
        write_activation(tmp_path / "a.actv", a)
        raw = (tmp_path / "a.actv").read_bytes()
        assert raw[:4] == b"ACTV" and raw[4:16] == bytes([3, 0, 0, 0, 2, 0, 0, 0, 5, 0, 0, 0])
        # z varies fastest
        assert np.frombuffer(raw[16:24], "<f4").tolist() == a[0, 0, :2].tolist()
        assert np.array_equal(read_activation(tmp_path / "a.actv"), a.astype(np.float64))

    def test_bad_file(self, tmp_path):
        (tmp_path / "x.actv").write_bytes(b"ACTV" + bytes(12))
        with pytest.raises(DataError):
            read_activation(tmp_path / "x.actv")


class TestPatchScore:
    def test_constant(self):
        assert patch_score(np.full((3, 3), 0.7)) == 0.7

    def test_lower_median(self):
        assert patch_score(np.array([[4.0, 1.0], [3.0, 2.0]])) == 2.0

    def test_shuffled(self):
        v = np.random.default_rng(5).permutation(9).reshape(3, 3)
        assert patch_score(v) == 4.0


class TestIqrSelect:
    def test_q1(self):
        assert iqr_bin_select(table(range(1, 101)), "tumor", 1) == ["p49"]

    def test_q2(self):
        t = table(range(1, 101))
        assert [t.scores[t.ids.index(i)] for i in iqr_bin_select(t, "tumor", 2)] == [38.0, 63.0]

    def test_all_equal(self):
        assert iqr_bin_select(table([3.0] * 6), "tumor", 4) == ["p0", "p1", "p2", "p3"]

    def test_too_few(self):
        with pytest.raises(ValueError, match="normal"):
            iqr_bin_select(table([1.0, 2.0], "normal"), "normal", 3)

    def test_only_requested_class(self):
        t = ScoreTable(["a", "b", "c"], ["tumor", "normal", "tumor"], [1.0, 2.0, 3.0])
        assert set(iqr_bin_select(t, "tumor", 2)) == {"a", "c"}

    @settings(max_examples=100)
    @given(st.lists(st.integers(0, 30), min_size=2, max_size=40).map(lambda v: [float(x) for x in v]), st.data())
    def test_matches_reference(self, scores, data):
        q = data.draw(st.integers(1, len(scores)))
        got = iqr_bin_select(table(scores), "tumor", q)
        assert len(set(got)) == q
        assert got == [f"p{i}" for i in iqr_reference(scores, q)]

    def test_score_table_io(self, tmp_path):
        t = ScoreTable(["a", "b"], ["tumor", "normal"], [0.1, 1 / 3])
        t.write(tmp_path / "s.csv")
        assert ScoreTable.read(tmp_path / "s.csv") == t
        (tmp_path / "bad.csv").write_text("patch_id,label,score\na,tumor,1\na,normal,2\n")
        with pytest.raises(ManifestError, match="bad.csv:3"):
            ScoreTable.read(tmp_path / "bad.csv")


class TestOtherSelectors:
    def _patches(self):
        rng = np.random.default_rng(0)
        dark = [np.full((4, 4, 3), 100 + rng.integers(-3, 4), np.uint8) for _ in range(5)]
        light = [np.full((4, 4, 3), 120 + rng.integers(-3, 4), np.uint8) for _ in range(5)]
        return [f"d{i}" for i in range(5)] + [f"l{i}" for i in range(5)], dark + light

    def test_kmeans_two_clusters(self):
        ids, patches = self._patches()
        got = kmeans_exemplars(ids, patches, 2, seed=0)
        assert {g[0] for g in got} == {"d", "l"}

    def test_kmeans_identity(self):
        ids, patches = self._patches()
        ids, patches = ids[:3], [np.full((2, 2, 3), v, np.uint8) for v in (0, 100, 200)]
        assert sorted(kmeans_exemplars(ids, patches, 3)) == sorted(ids)

    def test_kmeans_deterministic(self):
        ids, patches = self._patches()
        assert kmeans_exemplars(ids, patches, 3, seed=4) == kmeans_exemplars(ids, patches, 3, seed=4)

    def test_kmeans_empty(self):
        with pytest.raises(ValueError):
            kmeans_exemplars([], [], 1)

    def test_random(self):
        ids = [f"i{k}" for k in range(10)]
        assert sorted(random_exemplars(ids, 10, seed=3)) == sorted(ids)
        assert random_exemplars(ids, 4, seed=8) == random_exemplars(ids, 4, seed=8)
        seen = set()
        for s in range(10):
            seen.update(random_exemplars(ids, 5, seed=s))
        assert seen == set(ids)
        with pytest.raises(ValueError):
            random_exemplars(ids, 11)


@pytest.fixture
def toy_manifest(tmp_path):
    rng = np.random.default_rng(0)
    entries = []
    for i in range(256):
        label = "tumor" if i < 128 else "normal"
        write_image(tmp_path / f"t{i}.png", rng.integers(0, 256, (16, 16, 3), dtype=np.uint8))
        entries.append(TileEntry(f"t{i}", f"t{i}.png", 16 * (i % 16), 16 * (i // 16), label))
    return TileManifest(entries, tmp_path)


class TestExemplarSet:
    def test_build_128_each(self, toy_manifest, tmp_path):
        ex = build_exemplar_set(toy_manifest, toy_manifest.ids("tumor"), toy_manifest.ids("normal"), workers=2)
        assert ex.sizes == (128, 128)

    def test_round_trip(self, toy_manifest, tmp_path):
        f = Filtration((64, 128, 192))
        ex = build_exemplar_set(toy_manifest, ["t0", "t1"], ["t200"], f, method="random", seed=3, out_dir=tmp_path / "ex")
        assert ExemplarSet.load(tmp_path / "ex") == ex
        assert len(list((tmp_path / "ex" / "profiles").glob("*.csv"))) == 3

    def test_empty_class(self, toy_manifest):
        with pytest.raises(ConfigError):
            build_exemplar_set(toy_manifest, [], ["t200"])

    def test_unreadable_named(self, tmp_path):
        m = TileManifest([TileEntry("lost", "lost.png", 0, 0, "tumor"), TileEntry("n", "lost2.png", 1, 0, "normal")], tmp_path)
        with pytest.raises(DataError, match="lost"):
            build_exemplar_set(m, ["lost"], ["n"])

    def test_workers_do_not_change_result(self, toy_manifest):
        ids_t, ids_n = toy_manifest.ids("tumor")[:10], toy_manifest.ids("normal")[:10]
        assert build_exemplar_set(toy_manifest, ids_t, ids_n, workers=1) == build_exemplar_set(
            toy_manifest, ids_t, ids_n, workers=3
        )
