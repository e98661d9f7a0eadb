import hashlib

import numpy as np
import pytest

from deblur_mim.data import (DataError, Dataset, Item, SynthSpec, assert_disjoint, content_hash,
                             load_dataset, load_image, random_resized_crop, resize_bilinear,
                             save_image, spot_contrast, split, synth_speckle, to_uint8, write_dataset)


def _labeled(n=50, seed=0):
    return synth_speckle(SynthSpec(count=n, image_side=16, spot_radius=2.0, seed=seed))


class TestImages:
    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, size=(9, 7)) / 255.0
        save_image(img, tmp_path / "a.png")
        assert np.array_equal(load_image(tmp_path / "a.png"), img)

    def test_pgm_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 16).reshape(4, 4)
        save_image(img, tmp_path / "a.pgm")
        assert np.array_equal(load_image(tmp_path / "a.pgm"), to_uint8(img) / 255.0)

    def test_hash_is_content_based(self):
        a = np.full((4, 4), 0.25)
        assert content_hash(a) == content_hash(a.copy())
        assert content_hash(a) != content_hash(a + 0.1)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")


class TestAugment:
    def test_resize_identity(self):
        img = np.random.default_rng(1).uniform(size=(8, 8))
        assert np.array_equal(resize_bilinear(img, 8), img)

    def test_resize_constant(self):
        np.testing.assert_allclose(resize_bilinear(np.full((5, 5), 0.3), 12), 0.3, atol=1e-15)

    def test_crop_deterministic_frozen(self):
        img = np.arange(32 * 32, dtype=float).reshape(32, 32) / 1024
        out = random_resized_crop(img, np.random.default_rng(42), (0.6, 1.0), 32)
        again = random_resized_crop(img, np.random.default_rng(42), (0.6, 1.0), 32)
        assert out.shape == (32, 32) and np.array_equal(out, again)
        digest = hashlib.sha256(np.round(out, 12).tobytes()).hexdigest()[:16]
        assert digest == CROP_DIGEST

    def test_crop_of_ramp_stays_affine(self):
        # bilinear interpolation reproduces affine functions exactly; the outermost
        # pixels sample clamped coordinates, so only the interior is affine
        img = np.add.outer(np.arange(32) * 0.01, np.arange(32) * 0.003)
        out = random_resized_crop(img, np.random.default_rng(9), (0.6, 1.0), 32)[1:-1, 1:-1]
        assert np.abs(np.diff(out, 2, axis=0)).max() < 1e-12
        assert np.abs(np.diff(out, 2, axis=1)).max() < 1e-12


CROP_DIGEST = "4c77c7de88586125"


class TestSplit:
    def test_sizes_and_disjoint(self):
        ds = _labeled(50)
        tr, va, te = split(ds, (3, 1, 1), seed=0)
        assert (len(tr), len(va), len(te)) == (30, 10, 10)
        names = [set(it.name for it in d) for d in (tr, va, te)]
        assert not (names[0] & names[1]) and not (names[0] & names[2]) and not (names[1] & names[2])
        assert_disjoint(tr, te)

    def test_stratified(self):
        tr, va, te = split(_labeled(60), (3, 1, 1), seed=3)
        for d in (va, te):
            assert d.labels().sum() == len(d) // 2

    def test_remainder_to_train(self):
        tr, va, te = split(_labeled(53), (3, 1, 1))
        assert (len(va), len(te)) == (10, 10) and len(tr) == 33

    def test_seeded(self):
        a = split(_labeled(40), seed=7)
        b = split(_labeled(40), seed=7)
        assert [it.name for it in a[2]] == [it.name for it in b[2]]

    def test_disjoint_guard_fires(self):
        ds = _labeled(10)
        with pytest.raises(DataError):
            assert_disjoint(ds, ds.subset([3]))


class TestSynth:
    def test_deterministic(self):
        a, b = _labeled(6, seed=4), _labeled(6, seed=4)
        assert [content_hash(x.image) for x in a] == [content_hash(x.image) for x in b]

    def test_seeds_give_disjoint_corpora(self):
        assert not (_labeled(20, seed=1).hashes() & _labeled(20, seed=2).hashes())

    def test_balanced_and_ranged(self):
        ds = _labeled(11)
        assert ds.labels().tolist() == [i % 2 for i in range(11)]
        imgs = ds.images()
        assert imgs.min() >= 0 and imgs.max() <= 1

    def test_spots_are_brighter(self):
        ds = synth_speckle(SynthSpec(count=20, image_side=32, seed=5))
        for it in ds:
            if it.label == 1:
                assert min(spot_contrast(it, 2.0)) > 0

    def test_unlabeled(self):
        ds = synth_speckle(SynthSpec(count=4, labeled=False))
        assert not ds.labeled

    def test_invalid(self):
        with pytest.raises(DataError):
            SynthSpec(spot_radius=20.0)


class TestDirectories:
    def test_write_and_load(self, tmp_path):
        ds = _labeled(6)
        write_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert len(back) == 6 and back.labeled
        assert sorted(back.labels().tolist()) == sorted(ds.labels().tolist())
        ref = {content_hash(x.image) for x in ds}
        assert {content_hash(x.image) for x in back} == ref

    def test_missing_dir(self, tmp_path):
        with pytest.raises((DataError, FileNotFoundError)):
            load_dataset(tmp_path / "none")
