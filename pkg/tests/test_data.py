import struct

import numpy as np
import pytest

from spartan.data import (Dataset, IdxFormatError, SyntheticSpec, batches,
                          load_idx_split, load_mnist, normalize, parse_idx_images,
                          parse_idx_labels, pixel_stats, synthetic,
                          write_idx_images, write_idx_labels)
from spartan.tensor import Rng


def image_fixture():
    # magic, N=1, H=2, W=2, then the four pixels
    return struct.pack(">4I", 0x00000803, 1, 2, 2) + bytes([0, 128, 255, 64])


class TestParseImages:
    def test_hand_built_file(self):
        images, dims = parse_idx_images(image_fixture())
        assert dims == (1, 2, 2)
        assert images[0].tolist() == [[0, 128], [255, 64]]

    def test_bad_magic(self):
        bad = struct.pack(">4I", 0x00000801, 1, 2, 2) + bytes(4)
        with pytest.raises(IdxFormatError, match="bad magic"):
            parse_idx_images(bad)

    def test_truncated_payload(self):
        with pytest.raises(IdxFormatError, match="truncated"):
            parse_idx_images(image_fixture()[:-1])

    def test_trailing_bytes(self):
        with pytest.raises(IdxFormatError, match="trailing"):
            parse_idx_images(image_fixture() + b"\x00")

    def test_dimension_overflow(self):
        huge = struct.pack(">4I", 0x00000803, 2**31, 2**10, 2**10)
        with pytest.raises(IdxFormatError, match="overflow"):
            parse_idx_images(huge)


class TestParseLabels:
    def test_fixture(self):
        data = struct.pack(">2I", 0x00000801, 2) + bytes([7, 2])
        assert parse_idx_labels(data).tolist() == [7, 2]

    def test_out_of_range_label(self):
        data = struct.pack(">2I", 0x00000801, 1) + bytes([12])
        with pytest.raises(IdxFormatError, match="exceeds"):
            parse_idx_labels(data)

    def test_bad_magic(self):
        data = struct.pack(">2I", 0x00000803, 1) + bytes([3])
        with pytest.raises(IdxFormatError, match="bad magic"):
            parse_idx_labels(data)

    def test_count_mismatch_at_assembly(self, tmp_path):
        (tmp_path / "train-images-idx3-ubyte").write_bytes(image_fixture())
        (tmp_path / "train-labels-idx1-ubyte").write_bytes(
            struct.pack(">2I", 0x00000801, 2) + bytes([1, 2])
        )
        with pytest.raises(IdxFormatError, match="1 images but 2 labels"):
            load_idx_split(tmp_path, "train")


class TestNormalize:
    def test_extremes(self):
        assert normalize(np.array([255], dtype=np.uint8))[0] == 1.0
        assert normalize(np.array([0], dtype=np.uint8))[0] == 0.0

    def test_midpoint(self):
        assert normalize(np.array([128], dtype=np.uint8))[0] == pytest.approx(0.50196078)


class TestRoundTrip:
    def test_parse_serialize_parse(self):
        rng = Rng(0)
        images = rng.integers(0, 256, (5, 4, 3)).astype(np.uint8)
        labels = rng.integers(0, 10, 5).astype(np.uint8)
        i1, _ = parse_idx_images(write_idx_images(images))
        l1 = parse_idx_labels(write_idx_labels(labels))
        i2, _ = parse_idx_images(write_idx_images(i1))
        l2 = parse_idx_labels(write_idx_labels(l1))
        assert (i1 == i2).all() and (l1 == l2).all()
        assert (i1 == images).all()

    def test_gzip_files_load(self, tmp_path):
        import gzip

        images = np.zeros((3, 2, 2), dtype=np.uint8)
        labels = np.array([1, 2, 3], dtype=np.uint8)
        (tmp_path / "t10k-images-idx3-ubyte.gz").write_bytes(
            gzip.compress(write_idx_images(images)))
        (tmp_path / "t10k-labels-idx1-ubyte.gz").write_bytes(
            gzip.compress(write_idx_labels(labels)))
        ds = load_idx_split(tmp_path, "test")
        assert len(ds) == 3 and ds.images.shape == (3, 1, 2, 2)

    def test_mnist_profile_rejects_wrong_totals(self, tmp_path):
        images = np.zeros((3, 28, 28), dtype=np.uint8)
        labels = np.array([1, 2, 3], dtype=np.uint8)
        for split in ("train-images-idx3-ubyte", "t10k-images-idx3-ubyte"):
            (tmp_path / split).write_bytes(write_idx_images(images))
        for split in ("train-labels-idx1-ubyte", "t10k-labels-idx1-ubyte"):
            (tmp_path / split).write_bytes(write_idx_labels(labels))
        with pytest.raises(ValueError, match="not MNIST-shaped"):
            load_mnist(tmp_path)


class TestPixelStats:
    def test_constant_pixels_flagged_by_span(self):
        images = np.zeros((4, 1, 2, 2), dtype=np.float32)
        images[:, 0, 0, 0] = [0.1, 0.5, 0.9, 0.3]  # only one live pixel
        ds = Dataset(images, np.zeros(4, dtype=np.int64))
        stats = pixel_stats(ds)
        span = stats.x_max - stats.x_min
        assert span[0] > 0
        assert (span[1:] == 0).all()

    def test_full_range_synthetic(self):
        ds = synthetic(SyntheticSpec(classes=2, per_class=16, size=8, noise=0.0))
        stats = pixel_stats(ds)
        assert stats.x_min.min() == 0.0 and stats.x_max.max() == 1.0

    def test_single_image_split(self):
        ds = Dataset(np.full((1, 1, 2, 2), 0.25, np.float32), np.zeros(1, np.int64))
        stats = pixel_stats(ds)
        assert (stats.x_min == stats.x_max).all()

    def test_empty_split_rejected(self):
        ds = synthetic(SyntheticSpec(classes=2, per_class=4, size=8))
        ds.images = ds.images[:0]
        ds.labels = ds.labels[:0]
        with pytest.raises(ValueError, match="empty"):
            pixel_stats(ds)


class TestBatches:
    def setup_method(self):
        images = np.linspace(0, 1, 10, dtype=np.float32).reshape(10, 1, 1, 1)
        self.ds = Dataset(images, np.arange(10) % 10)

    def test_sizes(self):
        sizes = [len(y) for _, y in batches(self.ds, 4, seed=0)]
        assert sizes == [4, 4, 2]

    def test_no_shuffle_keeps_order(self):
        _, y = next(batches(self.ds, 10, shuffle=False))
        assert y.tolist() == list(range(10))

    def test_same_seed_same_permutation(self):
        a = np.concatenate([y for _, y in batches(self.ds, 3, seed=9)])
        b = np.concatenate([y for _, y in batches(self.ds, 3, seed=9)])
        assert (a == b).all()

    def test_partition_covers_everything_once(self):
        seen = np.concatenate([y for _, y in batches(self.ds, 3, seed=1)])
        assert sorted(seen.tolist()) == list(range(10))


class TestSynthetic:
    def test_linearly_separable_probe(self):
        # zero noise: a least-squares readout on pixels classifies perfectly
        ds = synthetic(SyntheticSpec(classes=2, per_class=10, size=8, noise=0.0))
        x = ds.images.reshape(len(ds), -1)
        y = 2.0 * ds.labels - 1.0
        w, *_ = np.linalg.lstsq(np.c_[x, np.ones(len(x))], y, rcond=None)
        pred = (np.c_[x, np.ones(len(x))] @ w > 0).astype(int)
        assert (pred == ds.labels).all()

    def test_same_seed_identical(self):
        a = synthetic(SyntheticSpec(classes=3, per_class=5, size=10, noise=0.3, seed=4))
        b = synthetic(SyntheticSpec(classes=3, per_class=5, size=10, noise=0.3, seed=4))
        assert (a.images == b.images).all() and (a.labels == b.labels).all()

    def test_noise_widens_histogram_but_keeps_labels(self):
        clean = synthetic(SyntheticSpec(classes=2, per_class=20, size=8, noise=0.0, seed=2))
        noisy = synthetic(SyntheticSpec(classes=2, per_class=20, size=8, noise=0.5, seed=2))
        assert (clean.labels == noisy.labels).all()
        assert len(np.unique(noisy.images)) > len(np.unique(clean.images))

    def test_dark_pattern(self):
        ds = synthetic(SyntheticSpec(classes=2, per_class=4, size=8, pattern="dark"))
        assert ds.images.mean() > 0.5  # bright ground, dark bars

    def test_values_in_unit_interval(self):
        ds = synthetic(SyntheticSpec(classes=4, per_class=8, size=12, noise=0.9, seed=3))
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
