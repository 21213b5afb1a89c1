import hashlib
import os

import numpy as np
import pytest
from PIL import Image

from cebsnet.data import (
    DatasetError, augment, gen_synthetic, load_dataset, load_split, make_pair, read_sample, split_counts,
)


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            h.update(os.path.relpath(path, root).encode())
            with open(path, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


class TestGenerator:
    def test_byte_identical_reruns(self, tmp_path):
        gen_synthetic(tmp_path / "a", seed=3, count=6, size=64, test_frac=0.5)
        gen_synthetic(tmp_path / "b", seed=3, count=6, size=64, test_frac=0.5)
        assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")

    def test_seed_changes_content(self):
        assert not np.array_equal(make_pair(0, 0, 64)[0], make_pair(1, 0, 64)[0])

    def test_change_coverage(self):
        for i in range(16):
            _, _, gt = make_pair(7, i, 64)
            assert 0.03 <= gt.mean() <= 0.30
            assert set(np.unique(gt)) <= {0, 1}

    def test_null_pair(self):
        a, b, gt = make_pair(5, 0, 64, difficulty=0.0, n_objects=0)
        assert not gt.any()
        assert np.array_equal(a, b)

    def test_nuisance_only_pair(self):
        a, b, gt = make_pair(5, 0, 64, difficulty=1.0, n_objects=0)
        assert not gt.any() and not np.array_equal(a, b)

    @pytest.mark.parametrize("size", [50, 16, 0])
    def test_bad_size(self, tmp_path, size):
        with pytest.raises(DatasetError, match="divisible by 32"):
            gen_synthetic(tmp_path, 0, 2, size)

    def test_bad_count(self, tmp_path):
        with pytest.raises(DatasetError, match="count"):
            gen_synthetic(tmp_path, 0, 0, 64)

    def test_split_counts(self):
        assert split_counts(16, 0.0, 0.25) == {"train": 12, "val": 0, "test": 4}
        with pytest.raises(DatasetError):
            split_counts(4, 0.75, 0.75)


class TestLoader:
    def test_round_trip(self, tmp_path):
        m = gen_synthetic(tmp_path, seed=2, count=3, size=32)
        loaded = load_dataset(tmp_path)
        assert loaded.splits == m.splits
        s = read_sample(loaded, "00001")
        a, b, gt = make_pair(2, 1, 32)
        assert s.image_a.shape == (3, 32, 32) and s.image_a.dtype == np.float32
        assert np.array_equal(np.round(s.image_a * 255).astype(np.uint8), a)
        assert np.array_equal(np.round(s.image_b * 255).astype(np.uint8), b)
        assert np.array_equal(s.gt, gt)

    def test_load_split_stacks(self, tiny_dataset):
        a, b, gt, ids = load_split(tiny_dataset, "train")
        assert a.shape == (6, 3, 64, 64) and gt.shape == (6, 64, 64) and len(ids) == 6

    def test_missing_gt_names_sample(self, tmp_path):
        m = gen_synthetic(tmp_path, seed=0, count=2, size=32)
        os.remove(tmp_path / "train" / "00001_GT.png")
        with pytest.raises(FileNotFoundError, match="00001"):
            read_sample(m, "00001")

    def test_gt_threshold(self, tmp_path):
        m = gen_synthetic(tmp_path, seed=0, count=1, size=32)
        gt = np.zeros((32, 32), np.uint8)
        gt[:4] = 200
        gt[4:8] = 100
        Image.fromarray(gt).save(tmp_path / "train" / "00000_GT.png")
        out = read_sample(m, "00000").gt
        assert out[:4].all() and not out[4:].any()

    def test_non_square(self, tmp_path):
        m = gen_synthetic(tmp_path, seed=0, count=1, size=32)
        Image.fromarray(np.zeros((32, 64, 3), np.uint8)).save(tmp_path / "train" / "00000_A.png")
        with pytest.raises(DatasetError, match="not square"):
            read_sample(m, "00000")

    def test_missing_root(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(tmp_path / "nope")

    def test_no_split_lists(self, tmp_path):
        with pytest.raises(DatasetError, match="split lists"):
            load_dataset(tmp_path)

    def test_empty_split(self, tiny_dataset):
        with pytest.raises(DatasetError, match="no samples in split 'val'"):
            load_split(tiny_dataset, "val")

    def test_unknown_id(self, tiny_dataset):
        with pytest.raises(DatasetError, match="unknown sample"):
            read_sample(tiny_dataset, "99999")


def test_augment_is_shared(rng):
    gt = (rng.random((8, 8)) < 0.5).astype(np.uint8)
    a = np.stack([gt.astype(float), rng.random((8, 8)), rng.random((8, 8))])
    for _ in range(10):
        a2, b2, g2 = augment(a, a.copy(), gt, rng)
        assert np.array_equal(a2, b2)
        # channel 0 carries the mask, so it must land exactly where the mask does
        assert np.array_equal(a2[0], g2)
        assert sorted(a2[1].ravel()) == sorted(a[1].ravel())
