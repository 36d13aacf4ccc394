import numpy as np
import pytest

from protodiff import Rng
from protodiff.errors import CorruptionError, DataValidationError, FormatError
from protodiff.features import (Dataset, FeatureRecord, LABEL_ANOMALOUS, LABEL_NORMAL,
                                aggregate_layers, load_feature_file, write_feature_file)
from protodiff.synth import SynthSpec, generate_synthetic_dataset


def _small_spec(**kw):
    base = dict(num_categories=2, centroids_per_category=2, grid=(4, 4), channels=6,
                layers=2, train_per_category=3, test_normal_per_category=2,
                test_anomalous_per_category=2, anomaly_rect_range=(1, 2),
                image_scale=2, seed=5)
    base.update(kw)
    return SynthSpec(**base)


class TestDpftRoundTrip:
    def test_empty_file(self, tmp_path):
        p = tmp_path / "empty.dpft"
        write_feature_file(Dataset(split="test", records=[]), p)
        ds = load_feature_file(p)
        assert ds.records == []

    def test_round_trip_byte_identical(self, tmp_path):
        _, test = generate_synthetic_dataset(_small_spec())
        p1 = tmp_path / "a.dpft"
        p2 = tmp_path / "b.dpft"
        write_feature_file(test, p1)
        write_feature_file(load_feature_file(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loaded_equals_generator_output(self, tmp_path):
        train, _ = generate_synthetic_dataset(_small_spec())
        p = tmp_path / "train.dpft"
        write_feature_file(train, p)
        loaded = load_feature_file(p, split="train")
        assert len(loaded) == len(train)
        for a, b in zip(loaded.records, train.records):
            assert a.grid == b.grid and a.label == b.label and a.category_id == b.category_id
            for la, lb in zip(a.layers, b.layers):
                np.testing.assert_array_equal(la, lb)
            np.testing.assert_array_equal(a.mask, b.mask)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dpft"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_feature_file(p)

    def test_truncation_reports_offset(self, tmp_path):
        _, test = generate_synthetic_dataset(_small_spec())
        p = tmp_path / "t.dpft"
        write_feature_file(test, p)
        blob = p.read_bytes()
        p.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptionError, match="byte"):
            load_feature_file(p)

    def test_crc_mismatch(self, tmp_path):
        _, test = generate_synthetic_dataset(_small_spec())
        p = tmp_path / "c.dpft"
        write_feature_file(test, p)
        blob = bytearray(p.read_bytes())
        blob[40] ^= 0xFF  # flip a feature byte inside the first record
        p.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError, match="CRC"):
            load_feature_file(p)

    def test_anomalous_record_rejected_in_train_split(self, tmp_path):
        _, test = generate_synthetic_dataset(_small_spec())
        p = tmp_path / "x.dpft"
        write_feature_file(test, p)
        with pytest.raises(DataValidationError, match="train"):
            load_feature_file(p, split="train")


class TestAggregateLayers:
    def _record(self, layers):
        n, c = layers[0].shape
        return FeatureRecord(category_id=0, label=LABEL_NORMAL, grid=(1, n), channels=c,
                             layers=layers, image_dims=(1, n), mask=np.zeros((1, n), np.uint8))

    def test_single_layer_unchanged(self):
        rng = Rng(1)
        a = rng.normals((6, 3)).astype(np.float32)
        rec = self._record([a, rng.normals((6, 3)).astype(np.float32)])
        np.testing.assert_allclose(aggregate_layers(rec, {0}).data, a)

    def test_mean_of_identical_layers(self):
        a = Rng(2).normals((6, 3)).astype(np.float32)
        rec = self._record([a, a.copy()])
        np.testing.assert_allclose(aggregate_layers(rec).data, a)

    def test_two_layer_mean(self):
        rng = Rng(3)
        a = rng.normals((5, 4)).astype(np.float32)
        b = rng.normals((5, 4)).astype(np.float32)
        out = aggregate_layers(self._record([a, b]))
        np.testing.assert_allclose(out.data, (a.astype(np.float64) + b) / 2.0, rtol=1e-12)

    def test_empty_selection_rejected(self):
        rec = self._record([np.zeros((4, 2), np.float32)])
        with pytest.raises(ValueError, match="empty"):
            aggregate_layers(rec, set())

    def test_commutes_with_token_permutation(self):
        rng = Rng(4)
        a = rng.normals((6, 3)).astype(np.float32)
        b = rng.normals((6, 3)).astype(np.float32)
        perm = Rng(5).permutation(6)
        direct = aggregate_layers(self._record([a, b])).data[perm]
        permuted = aggregate_layers(self._record([a[perm], b[perm]])).data
        np.testing.assert_array_equal(direct, permuted)


class TestSynthGenerator:
    def test_degenerate_spec_anomalous_equals_normal(self):
        spec = _small_spec(token_noise=0.0, anomaly_offset=0.0, seed=9)
        _, test = generate_synthetic_dataset(spec)
        normals = [r for r in test.records if r.label == LABEL_NORMAL]
        anomalies = [r for r in test.records if r.label == LABEL_ANOMALOUS]
        for a in anomalies:
            ref = next(n for n in normals if n.category_id == a.category_id)
            for la, lb in zip(a.layers, ref.layers):
                np.testing.assert_array_equal(la, lb)
            assert a.mask.any(), "mask must still be emitted"

    def test_same_seed_bit_identical(self):
        a_train, a_test = generate_synthetic_dataset(_small_spec())
        b_train, b_test = generate_synthetic_dataset(_small_spec())
        for da, db in ((a_train, b_train), (a_test, b_test)):
            for ra, rb in zip(da.records, db.records):
                for la, lb in zip(ra.layers, rb.layers):
                    assert la.tobytes() == lb.tobytes()
                assert ra.mask.tobytes() == rb.mask.tobytes()

    def test_cell_mean_converges_to_centroid(self):
        # law-of-large-numbers check: >= 10k samples of cell (0, 0)
        spec = _small_spec(num_categories=1, train_per_category=3500, layers=3,
                           test_normal_per_category=1, test_anomalous_per_category=1,
                           token_noise=0.25, anomaly_offset=1.5, seed=13)
        train, _ = generate_synthetic_dataset(spec)
        samples = np.stack([layer[0] for r in train.records for layer in r.layers])
        n = samples.shape[0]
        assert n >= 10000
        from protodiff.synth import _centroid_map
        from protodiff.rng import Rng as _Rng
        root = _Rng(spec.seed).spawn(0)
        centroids = spec.centroid_scale * root.normals(
            (spec.num_categories, spec.centroids_per_category, spec.channels))
        expected = _centroid_map(spec, centroids, 0)[0]
        dev = np.abs(samples.mean(axis=0) - expected)
        assert np.all(dev <= 3.0 * spec.token_noise / np.sqrt(n))

    def test_mask_area_bounds(self):
        spec = _small_spec()
        _, test = generate_synthetic_dataset(spec)
        hi = spec.anomaly_rect_range[1]
        for r in test.records:
            if r.label == LABEL_ANOMALOUS:
                area = int(r.mask.sum())
                assert area >= 1
                assert area <= hi * hi * spec.image_scale * spec.image_scale

    def test_train_split_is_all_normal(self):
        train, _ = generate_synthetic_dataset(_small_spec())
        assert all(r.label == LABEL_NORMAL for r in train.records)
