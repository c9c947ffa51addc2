import os
import tempfile
import unittest
from unittest import mock

import numpy as np

from inclusions import dataset as dataset_module
from inclusions.dataset import (
    Dataset, generate_dataset, write_dataset, read_dataset, split, kfold, ingest_nd_records, derive_seeds,
)
from inclusions.phantom import sample_scenario
from inclusions.shared import IngestError, PlacementError, RADIUS_CLASSES

COARSE = dict(mesh_max_edge=0.05)


def synthetic(labels, m: int = 1) -> Dataset:
    labels = np.asarray(labels)
    classes = [{"label": int(c), "count": int(np.sum(labels == c))} for c in np.unique(labels)]
    manifest = {"format_version": 1, "task": "radii", "measurement_count": m, "classes": classes}
    features = np.arange(len(labels) * m * m, dtype=float).reshape(len(labels), m * m)
    return Dataset(manifest, features, labels)


class TestGenerateDataset(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.ds = generate_dataset("presence", 2, base_seed=5, **COARSE)

    def test_counts_and_feature_length(self):
        self.assertEqual(len(self.ds), 4)
        self.assertEqual(self.ds.features.shape, (4, 256))
        np.testing.assert_array_equal(self.ds.labels, [1, 1, 2, 2])
        self.assertEqual([c["count"] for c in self.ds.manifest["classes"]], [2, 2])

    def test_manifest_fields(self):
        m = self.ds.manifest
        for key in ("format_version", "task", "electrode_count", "measurement_count", "pattern",
                    "noise_scale", "base_seed", "classes", "tank_radius", "mesh_max_edge", "flux_method"):
            self.assertIn(key, m)
        self.assertEqual(m["pattern"], "trig")
        self.assertEqual(m["base_seed"], 5)

    def test_provenance_reproduces_scenarios(self):
        for i, prov in enumerate(self.ds.provenance):
            self.assertEqual(prov["seed"], 5 + i)
            scenario_seed, _ = derive_seeds(prov["seed"])
            expected = sample_scenario("presence", int(self.ds.labels[i]), scenario_seed)
            self.assertEqual(prov["scenario"], expected.to_dict())

    def test_anisotropy_dataset_balances_radii_within_each_class(self):
        ds = generate_dataset("iso_vs_aniso_inclusion", 4, electrode_count=8, measurement_count=2, **COARSE)
        for label in (1, 2):
            rows = [p for p, y in zip(ds.provenance, ds.labels) if y == label]
            self.assertEqual([p["class_index"] for p in rows], [0, 1, 2, 3])
            radii = sorted(p["scenario"]["inclusions"][0]["radius"] for p in rows)
            self.assertEqual(radii, sorted(RADIUS_CLASSES.values()))

    def test_one_per_class_opposite(self):
        ds = generate_dataset("radii", 1, electrode_count=8, measurement_count=3, pattern="opposite", **COARSE)
        self.assertEqual(len(ds), 4)
        self.assertEqual(ds.features.shape[1], 9)

    def test_noise_free_row_sixteen_is_zero(self):
        ds = generate_dataset("presence", 1, noise_scale=0.0, **COARSE)
        self.assertTrue(np.all(ds.features[:, 240:256] == 0.0))

    def test_worker_count_does_not_change_bytes(self):
        serial = generate_dataset("count_small", 1, base_seed=9, workers=1, **COARSE)
        parallel = generate_dataset("count_small", 1, base_seed=9, workers=3, **COARSE)
        np.testing.assert_array_equal(serial.features, parallel.features)
        self.assertEqual(serial.provenance, parallel.provenance)

    def test_failed_sample_is_regenerated(self):
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] == 1:
                raise PlacementError("no room")
            return sample_scenario(*args, **kwargs)

        with mock.patch.object(dataset_module, "sample_scenario", side_effect=flaky):
            ds = generate_dataset("presence", 1, base_seed=100, workers=1, **COARSE)
        self.assertEqual(len(ds), 2)
        event = ds.provenance[0]["regenerations"][0]
        self.assertEqual(event["failed_seed"], 100)
        self.assertEqual(event["next_seed"], 102)
        self.assertEqual(ds.provenance[0]["seed"], 102)

    def test_rejects_bad_counts(self):
        with self.assertRaises(ValueError):
            generate_dataset("presence", {1: 1}, **COARSE)
        with self.assertRaises(ValueError):
            generate_dataset("presence", 0, **COARSE)
        with self.assertRaises(ValueError):
            generate_dataset("presence", 1, electrode_count=4, measurement_count=5, **COARSE)

    def test_round_trip_is_bit_identical(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_dataset(self.ds, tmp)
            with open(os.path.join(tmp, "samples.csv"), "rb") as fh:
                self.assertNotIn(b"\r\n", fh.read())
            loaded = read_dataset(tmp)
        np.testing.assert_array_equal(loaded.features, self.ds.features)
        np.testing.assert_array_equal(loaded.labels, self.ds.labels)
        self.assertEqual(loaded.manifest, self.ds.manifest)
        self.assertEqual(loaded.provenance, self.ds.provenance)

    def test_with_measurements_takes_leading_block(self):
        sub = self.ds.with_measurements(4)
        self.assertEqual(sub.features.shape, (4, 16))
        full = self.ds.features[0].reshape(16, 16)
        np.testing.assert_array_equal(sub.features[0].reshape(4, 4), full[:4, :4])
        self.assertEqual(sub.measurement_count, 4)


class TestSplit(unittest.TestCase):
    def test_ann_policy_sizes(self):
        ds = synthetic(np.repeat([1, 2, 3, 4], 6000))
        parts = split(ds, "ann_80_10_10", seed=0)
        self.assertEqual((len(parts.train), len(parts.validation), len(parts.test)), (19200, 2400, 2400))
        for part in parts:
            counts = np.bincount(ds.labels[part])[1:]
            self.assertTrue(np.all(counts == counts[0]))

    def test_svm_policy_and_folds(self):
        ds = synthetic(np.repeat([1, 2], 500))
        parts = split(ds, "svm_90_10", seed=1)
        self.assertEqual((len(parts.train), len(parts.validation), len(parts.test)), (900, 0, 100))
        folds = kfold(parts.train, 5, seed=1)
        self.assertEqual([len(hold) for _, hold in folds], [180] * 5)

    def test_partition_is_disjoint_and_exhaustive(self):
        ds = synthetic(np.repeat([1, 2, 3], 40))
        parts = split(ds, "ann_80_10_10", seed=3)
        joined = np.concatenate(parts)
        self.assertEqual(len(joined), len(ds))
        self.assertEqual(set(joined.tolist()), set(range(len(ds))))

    def test_deterministic(self):
        ds = synthetic(np.repeat([1, 2], 50))
        a, b = split(ds, "ann_80_10_10", seed=4), split(ds, "ann_80_10_10", seed=4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_small_class_rejected(self):
        ds = synthetic(np.array([1] * 20 + [2] * 9))
        with self.assertRaisesRegex(ValueError, "Class 2"):
            split(ds, "svm_90_10")

    def test_unknown_policy(self):
        with self.assertRaises(ValueError):
            split(synthetic(np.repeat([1, 2], 10)), "ann_70_30")


class TestKFold(unittest.TestCase):
    def test_ten_items(self):
        folds = kfold(np.arange(10), 5)
        self.assertEqual([len(h) for _, h in folds], [2] * 5)

    def test_eleven_items(self):
        folds = kfold(np.arange(11), 5)
        self.assertEqual(sorted((len(h) for _, h in folds), reverse=True), [3, 2, 2, 2, 2])

    def test_holdouts_cover_training_once(self):
        train = np.arange(100, 137)
        folds = kfold(train, 5, seed=2)
        holdouts = np.concatenate([h for _, h in folds])
        self.assertEqual(sorted(holdouts.tolist()), train.tolist())
        for fit, hold in folds:
            self.assertFalse(set(fit.tolist()) & set(hold.tolist()))

    def test_k_larger_than_training(self):
        with self.assertRaises(ValueError):
            kfold(np.arange(3), 5)


class TestIngest(unittest.TestCase):
    def write(self, text: str) -> str:
        fd, path = tempfile.mkstemp(suffix=".csv")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        self.addCleanup(os.remove, path)
        return path

    def test_identity_record(self):
        ds = ingest_nd_records(self.write("1, 2, 1, 0, 0, 1\n"))
        np.testing.assert_array_equal(ds.features[0], [1.0, 0.0, 0.0, 1.0])
        self.assertEqual(ds.manifest["noise_scale"], 0.0)

    def test_malformed_and_singular_records_are_reported(self):
        text = "\n".join([
            "1, 2, 2, 0, 0, 4",
            "2, 2, 1, 1, 1, 1",
            "3, 2, 1, 0, 0",
            "4, 2, 5, 1, 1, 5",
            "2, 2, 1, 0, 0, 3",
        ]) + "\n"
        ds = ingest_nd_records(self.write(text))
        self.assertEqual(len(ds), 3)
        self.assertEqual([d["line_number"] for d in ds.diagnostics], [2, 3])
        self.assertEqual(ds.diagnostics[0]["error_type"], "SingularMatrixError")
        np.testing.assert_allclose(ds.features[0], [0.5, 0.0, 0.0, 0.25])

    def test_four_records_one_malformed(self):
        text = "1, 1, 2\n2, 1, 4\n3, 1, nan\n4, 1, 8\n"
        ds = ingest_nd_records(self.write(text))
        self.assertEqual(len(ds), 3)
        self.assertEqual(len(ds.diagnostics), 1)
        np.testing.assert_allclose(ds.features[:, 0], [0.5, 0.25, 0.125])

    def test_labels_outside_task_classes_are_rejected(self):
        ds = ingest_nd_records(self.write("9, 2, 1, 0, 0, 1\n0, 2, 1, 0, 0, 1\n3, 2, 1, 0, 0, 1\n"), task="radii")
        np.testing.assert_array_equal(ds.labels, [3])
        self.assertEqual([d["line_number"] for d in ds.diagnostics], [1, 2])
        self.assertTrue(all(d["error_type"] == "IngestError" for d in ds.diagnostics))

    def test_presence_task_rejects_radii_label(self):
        with self.assertRaises(IngestError):
            ingest_nd_records(self.write("4, 1, 2\n"), task="presence")

    def test_unknown_task(self):
        with self.assertRaises(ValueError):
            ingest_nd_records(self.write("1, 1, 2\n"), task="nonsense")

    def test_no_valid_records(self):
        with self.assertRaises(IngestError):
            ingest_nd_records(self.write("x, y\n"))


if __name__ == '__main__':
    unittest.main()
