import random

import numpy as np
import pytest

from vog.data import (OOD_LABEL, BlobConfig, DataFormatError, LabeledDataset, blobs_to_csv, corrupt, gaussian_ood,
                      load_idx, make_blobs, read_blobs_csv, validate, write_blobs_csv, write_idx)
from vog.digits import make_digits


def idx_bytes(magic, dims, payload):
    """Independent IDX writer: big-endian header bytes assembled by hand."""
    out = bytearray()
    for v in [magic, *dims]:
        out += bytes([(v >> 24) & 255, (v >> 16) & 255, (v >> 8) & 255, v & 255])
    out += bytes(payload)
    return bytes(out)


@pytest.fixture
def idx_fixture(tmp_path):
    pixels = []
    for k in range(4):
        for r in range(28):
            for c in range(28):
                pixels.append((k * 60 + r * 3 + c) % 256)
    pixels[0], pixels[1] = 255, 0
    img = tmp_path / "images.idx"
    lab = tmp_path / "labels.idx"
    img.write_bytes(idx_bytes(0x803, [4, 28, 28], pixels))
    lab.write_bytes(idx_bytes(0x801, [4], [7, 0, 3, 9]))
    return img, lab, pixels


class TestBlobs:
    def test_split_sizes(self):
        train, test = make_blobs(BlobConfig(n_points=1000, train_fraction=0.9))
        assert (len(train), len(test)) == (900, 100)
        assert train.image_shape == (1, 1, 2) and train.split == "train" and test.split == "test"

    def test_deterministic(self):
        a = make_blobs(BlobConfig(seed=4))
        b = make_blobs(BlobConfig(seed=4))
        np.testing.assert_array_equal(a[0].images, b[0].images)
        np.testing.assert_array_equal(a[1].labels, b[1].labels)

    def test_tiny_std_hits_centers(self):
        train, _ = make_blobs(BlobConfig(n_points=50, cluster_std=1e-12))
        pts = train.images.reshape(-1, 2)
        centers = np.array([[-2.0, -2.0], [2.0, 2.0]])[train.labels]
        np.testing.assert_allclose(pts, centers, atol=1e-10)

    def test_class_balance(self):
        for n in (999, 1000):
            train, test = make_blobs(BlobConfig(n_points=n))
            counts = np.bincount(np.concatenate([train.labels, test.labels]))
            assert abs(counts[0] - n / 2) <= 1 and abs(counts[1] - n / 2) <= 1

    @pytest.mark.parametrize("kw", [dict(n_points=1), dict(train_fraction=1.0), dict(cluster_std=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            BlobConfig(**kw)

    def test_csv_round_trip(self, tmp_path):
        train, test = make_blobs(BlobConfig(n_points=20, seed=1))
        write_blobs_csv(tmp_path / "b.csv", [train, test])
        assert blobs_to_csv([train, test]).splitlines()[0] == "example_id,x0,x1,label,split"
        for ds in (train, test):
            back = read_blobs_csv(tmp_path / "b.csv", ds.split)
            np.testing.assert_array_equal(back.images, ds.images)
            np.testing.assert_array_equal(back.labels, ds.labels)

    def test_csv_missing_split(self, tmp_path):
        train, _ = make_blobs(BlobConfig(n_points=20))
        write_blobs_csv(tmp_path / "b.csv", [train])
        with pytest.raises(DataFormatError):
            read_blobs_csv(tmp_path / "b.csv", "test")


class TestIdx:
    def test_load_fixture(self, idx_fixture):
        img, lab, pixels = idx_fixture
        ds = load_idx(img, lab)
        assert len(ds) == 4 and ds.image_shape == (1, 28, 28)
        assert ds.labels.tolist() == [7, 0, 3, 9]
        assert ds.images[0, 0, 0, 0] == 1.0 and ds.images[0, 0, 0, 1] == 0.0
        assert ds.images[2, 0, 5, 6] == pixels[2 * 784 + 5 * 28 + 6] / 255.0
        assert ds.images.dtype == np.float64

    def test_round_trip_byte_identical(self, idx_fixture, tmp_path):
        img, lab, _ = idx_fixture
        write_idx(load_idx(img, lab), tmp_path / "i2", tmp_path / "l2")
        assert (tmp_path / "i2").read_bytes() == img.read_bytes()
        assert (tmp_path / "l2").read_bytes() == lab.read_bytes()

    def test_count_mismatch(self, idx_fixture, tmp_path):
        img, _, _ = idx_fixture
        (tmp_path / "l3").write_bytes(idx_bytes(0x801, [3], [1, 2, 3]))
        with pytest.raises(DataFormatError, match="count mismatch"):
            load_idx(img, tmp_path / "l3")

    def test_bad_magic(self, idx_fixture, tmp_path):
        _, lab, _ = idx_fixture
        (tmp_path / "bad").write_bytes(idx_bytes(0x802, [1, 1, 1], [0]))
        with pytest.raises(DataFormatError, match="magic"):
            load_idx(tmp_path / "bad", lab)

    def test_truncated(self, idx_fixture, tmp_path):
        img, lab, _ = idx_fixture
        (tmp_path / "short").write_bytes(img.read_bytes()[:-1])
        with pytest.raises(DataFormatError, match="pixel data"):
            load_idx(tmp_path / "short", lab)
        (tmp_path / "hdr").write_bytes(img.read_bytes()[:6])
        with pytest.raises(DataFormatError, match="header"):
            load_idx(tmp_path / "hdr", lab)


class TestGaussianOod:
    def test_size_range_and_label(self):
        ds = gaussian_ood(10000, (1, 28, 28), seed=0)
        assert len(ds) == 10000
        assert ds.images.min() >= 0.0 and ds.images.max() <= 1.0
        assert np.all(ds.labels == OOD_LABEL)
        assert "std=1.0" in ds.provenance

    def test_clipped_moments_against_independent_sampler(self):
        ds = gaussian_ood(1000, (1, 10, 100), seed=3)  # 10**6 pixels
        rnd = random.Random(99)
        draws = [min(1.0, max(0.0, rnd.gauss(0.5, 1.0))) for _ in range(200000)]
        oracle_mean = sum(draws) / len(draws)
        oracle_sq = sum(d * d for d in draws) / len(draws)
        assert 0.49 <= ds.images.mean() <= 0.51
        assert abs(ds.images.mean() - oracle_mean) < 0.005
        assert abs((ds.images ** 2).mean() - oracle_sq) < 0.005

    def test_deterministic(self):
        np.testing.assert_array_equal(gaussian_ood(3, (1, 2, 2), 5).images, gaussian_ood(3, (1, 2, 2), 5).images)

    def test_invalid(self):
        with pytest.raises(ValueError):
            gaussian_ood(0, (1, 2, 2), 0)


class TestCorrupt:
    @pytest.fixture
    def ds(self):
        rng = np.random.default_rng(0)
        return LabeledDataset(rng.uniform(size=(5, 1, 6, 6)), np.arange(5) % 3, 3)

    def test_rotate_four_times(self, ds):
        out = ds
        for _ in range(4):
            out = corrupt(out, "rotate90")
        np.testing.assert_array_equal(out.images, ds.images)

    def test_identities(self, ds):
        np.testing.assert_array_equal(corrupt(ds, "noise", sigma=0.0).images, ds.images)
        np.testing.assert_array_equal(corrupt(ds, "blur", k=1).images, ds.images)

    def test_translate(self, ds):
        out = corrupt(ds, "translate", shift=(1, 2)).images
        np.testing.assert_array_equal(out[:, :, 1:, 2:], ds.images[:, :, :-1, :-2])
        assert np.all(out[:, :, 0, :] == 0) and np.all(out[:, :, :, :2] == 0)

    def test_blur_matches_direct_mean(self, ds):
        out = corrupt(ds, "blur", k=3).images
        pad = np.pad(ds.images, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        assert out[2, 0, 3, 4] == pytest.approx(pad[2, 0, 3:6, 4:7].mean(), rel=1e-12)

    def test_noise_clipped_and_deterministic(self, ds):
        a = corrupt(ds, "noise", seed=1, sigma=2.0)
        assert a.images.min() >= 0 and a.images.max() <= 1
        np.testing.assert_array_equal(a.images, corrupt(ds, "noise", seed=1, sigma=2.0).images)
        assert a.labels.tolist() == ds.labels.tolist()

    @pytest.mark.parametrize("k", [0, 7, 2.5])
    def test_bad_kernel(self, ds, k):
        with pytest.raises(ValueError):
            corrupt(ds, "blur", k=k)

    def test_unknown_kind(self, ds):
        with pytest.raises(ValueError):
            corrupt(ds, "sepia")


class TestValidate:
    def test_label_range(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(np.zeros((2, 1, 1, 1)), [0, 3], 3)

    def test_count_mismatch(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(np.zeros((2, 1, 1, 1)), [0], 3)

    def test_non_finite(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(np.full((1, 1, 1, 1), np.nan), [0], 1)

    def test_rank(self):
        with pytest.raises(DataFormatError):
            LabeledDataset(np.zeros((2, 3)), [0, 0], 1)

    def test_generators_pass(self):
        for ds in [*make_blobs(BlobConfig(n_points=10)), gaussian_ood(2, (1, 3, 3), 0), make_digits(20, 0)]:
            validate(ds)
            assert ds.example_ids.tolist() == list(range(len(ds)))


class TestDigits:
    def test_shape_and_balance(self):
        ds, amb = make_digits(200, seed=1, return_ambiguity=True)
        assert ds.image_shape == (1, 28, 28) and ds.class_count == 10
        assert np.bincount(ds.labels).tolist() == [20] * 10
        assert ds.images.min() >= 0 and ds.images.max() <= 1
        assert amb.shape == (200,) and amb.min() >= 0 and amb.max() <= 0.5

    def test_deterministic_and_split_seeded(self):
        a = make_digits(30, seed=2)
        np.testing.assert_array_equal(a.images, make_digits(30, seed=2).images)
        assert not np.array_equal(a.images, make_digits(30, seed=2, split="test").images)
