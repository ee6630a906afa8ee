import json

import numpy as np
import pytest

from hdrenhance import hdr_io
from hdrenhance.dataset import (
    DatasetManifest,
    ManifestError,
    PairConfig,
    PairParams,
    epoch_schedule,
    generate_dataset,
    load_pairs,
    make_pair,
    pair_rng,
    render_pair,
    replay_manifest,
)
from hdrenhance.tonemap import tonemap_reinhard
from hdrenhance.camera import augment

from scenes import hdr_scene

CFG = PairConfig(out_size=32)


@pytest.fixture(scope="module")
def scene():
    return hdr_scene("coffee", seed=1)


@pytest.fixture
def corpus(tmp_path, scene):
    paths = []
    for i, name in enumerate(["astronaut", "rocket"]):
        p = tmp_path / "corpus" / f"{i}_{name}.hdr"
        p.parent.mkdir(exist_ok=True)
        hdr_io.save_hdr(p, hdr_scene(name, seed=i)[::4, ::4])
        paths.append(p)
    return paths


class TestMakePair:
    @pytest.mark.parametrize("c", [0.01, 3.0, 800.0])
    def test_constant_gray_target(self, c):
        pair = make_pair(np.full((40, 50, 3), c, np.float32), pair_rng(0), CFG)
        np.testing.assert_allclose(pair.y, 0.18 / 1.18, rtol=1e-5)

    def test_deterministic(self, scene):
        a = make_pair(scene, pair_rng(9, 1), CFG)
        b = make_pair(scene, pair_rng(9, 1), CFG)
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
        assert a.params == b.params

    def test_shapes_and_ranges(self, scene):
        pair = make_pair(scene, pair_rng(2), CFG)
        assert pair.x.shape == pair.y.shape == (32, 32, 3)
        for img in (pair.x, pair.y):
            assert img.dtype == np.float32 and img.min() >= 0 and img.max() <= 1

    def test_target_is_reinhard_of_patch(self, scene):
        pair = make_pair(scene, pair_rng(4), CFG)
        patch = augment(scene, pair.params.augment)
        np.testing.assert_array_equal(pair.y, tonemap_reinhard(patch))

    def test_exposure_monotone(self, scene):
        params = make_pair(scene, pair_rng(6), CFG).params
        lo = render_pair(scene, PairParams(params.augment, params.camera, -4.0), CFG)[0]
        hi = render_pair(scene, PairParams(params.augment, params.camera, 4.0), CFG)[0]
        assert hi.mean() > lo.mean()

    def test_target_independent_of_camera(self, scene):
        params = make_pair(scene, pair_rng(6), CFG).params
        other = PairParams(params.augment, type(params.camera)(1.3, 0.5), 2.5)
        x1, y1 = render_pair(scene, params, CFG)
        x2, y2 = render_pair(scene, other, CFG)
        assert y1.tobytes() == y2.tobytes() and not np.array_equal(x1, x2)

    def test_tiny_source_rejected(self):
        with pytest.raises(ValueError, match="5x5"):
            make_pair(np.ones((4, 10, 3), np.float32), pair_rng(0), CFG)


class TestEpochSchedule:
    def test_full_corpus_size(self):
        s = epoch_schedule(978, 8, np.random.default_rng(0))
        flat = np.concatenate(s.batches)
        assert len(s) == 122 and len(flat) == 976 and len(set(flat)) == 976

    def test_single_batch(self):
        s = epoch_schedule(8, 8, np.random.default_rng(1))
        assert sorted(s.batches[0]) == list(range(8))

    def test_uniform_first_batch(self):
        rng = np.random.default_rng(2)
        hits = np.zeros(16)
        for _ in range(10_000):
            hits[epoch_schedule(16, 8, rng).batches[0]] += 1
        np.testing.assert_allclose(hits / 10_000, 0.5, atol=0.02)

    def test_consecutive_epochs_differ(self):
        same = sum(epoch_schedule(20, 8, pair_rng(0, e)).batches
                   == epoch_schedule(20, 8, pair_rng(0, e + 1)).batches for e in range(500))
        assert same == 0

    def test_too_small(self):
        with pytest.raises(ValueError):
            epoch_schedule(7, 8, np.random.default_rng(0))


class TestGenerateDataset:
    def test_counts_and_layout(self, tmp_path, corpus):
        m = generate_dataset(corpus, 3, tmp_path / "out", master_seed=7, cfg=CFG)
        assert len(m.pairs) == 6 and len(m.sources) == 2
        for rec in m.pairs:
            assert (tmp_path / "out" / rec["x"]).exists() and (tmp_path / "out" / rec["y"]).exists()
        header = json.loads((tmp_path / "out" / "manifest.jsonl").read_text().splitlines()[0])
        assert header["format"] == "hdrenhance-manifest" and header["version"] == 1

    def test_jobs_do_not_change_output(self, tmp_path, corpus):
        generate_dataset(corpus, 2, tmp_path / "a", 7, CFG, jobs=1)
        generate_dataset(corpus, 2, tmp_path / "b", 7, CFG, jobs=3)
        for f in sorted((tmp_path / "a").rglob("*.*")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_replay_byte_identical(self, tmp_path, corpus):
        generate_dataset(corpus, 2, tmp_path / "a", 3, CFG, write_ppm=True)
        replay_manifest(tmp_path / "a" / "manifest.jsonl", tmp_path / "b", write_ppm=True)
        for f in sorted((tmp_path / "a").rglob("*.*")):
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()

    def test_replay_detects_changed_source(self, tmp_path, corpus):
        generate_dataset(corpus, 1, tmp_path / "a", 3, CFG)
        blob = bytearray(corpus[0].read_bytes())
        blob[-1] ^= 0xFF
        corpus[0].write_bytes(bytes(blob))
        with pytest.raises(ManifestError, match="hash mismatch"):
            replay_manifest(tmp_path / "a" / "manifest.jsonl", tmp_path / "b")

    def test_unreadable_file_skipped(self, tmp_path, corpus, caplog):
        bad = tmp_path / "corpus" / "broken.hdr"
        bad.write_bytes(b"not an image")
        m = generate_dataset(corpus + [bad], 1, tmp_path / "out", 0, CFG)
        assert len(m.pairs) == 2 and m.skipped[0]["path"] == str(bad)
        assert "skipping" in caplog.text
        again = DatasetManifest.read(tmp_path / "out" / "manifest.jsonl")
        assert again.skipped == m.skipped

    def test_load_pairs(self, tmp_path, corpus):
        generate_dataset(corpus, 2, tmp_path / "out", 0, CFG)
        x, y = load_pairs(tmp_path / "out" / "manifest.jsonl")
        assert x.shape == y.shape == (4, 32, 32, 3)

    def test_manifest_version_checked(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps({"type": "header", "format": "hdrenhance-manifest", "version": 99}) + "\n")
        with pytest.raises(ManifestError, match="version"):
            DatasetManifest.read(p)
