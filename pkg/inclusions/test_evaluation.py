import json
import os
import tempfile
import unittest

import numpy as np
import pandas as pd

from inclusions.evaluation import (
    ConfusionMatrix, ExperimentReport, confusion, emit_report, load_report, render_heatmap, render_curve,
)


def sample_report(**overrides) -> ExperimentReport:
    fields = dict(
        task="presence",
        model_kind="svm",
        seed=3,
        scale=0.2,
        class_names={1: "no inclusion", 2: "one inclusion"},
        dataset={"total": 8},
        split_sizes={"train": 6, "validation": 0, "test": 2},
        test=confusion([1, 1, 2, 2], [1, 2, 2, 2], 2),
        validation=confusion([1, 2], [1, 2], 2),
        training={"fold_accuracies": [1.0, 0.5]},
        notes=["example"],
        wall_time=1.25,
        run_id="abc",
    )
    fields.update(overrides)
    return ExperimentReport(**fields)


class TestConfusion(unittest.TestCase):
    def test_perfect_predictions(self):
        cm = confusion([1, 2, 3, 3], [1, 2, 3, 3], 3)
        np.testing.assert_array_equal(cm.counts, np.diag([1, 1, 2]))
        self.assertEqual(cm.accuracy, 1.0)

    def test_hand_counted(self):
        cm = confusion([1, 1, 2, 2], [1, 2, 2, 2], 2)
        np.testing.assert_array_equal(cm.counts, [[1, 1], [0, 2]])
        self.assertEqual(cm.accuracy, 0.75)

    def test_row_sums_are_actual_counts(self):
        rng = np.random.default_rng(0)
        actual = rng.integers(1, 5, size=200)
        predicted = rng.integers(1, 5, size=200)
        cm = confusion(actual, predicted, 4)
        np.testing.assert_array_equal(cm.counts.sum(axis=1), np.bincount(actual, minlength=5)[1:])
        np.testing.assert_array_equal(cm.counts.sum(axis=0), np.bincount(predicted, minlength=5)[1:])
        self.assertEqual(cm.total, 200)
        self.assertEqual(cm.accuracy, np.trace(cm.counts) / 200)

    def test_unseen_class_gets_empty_row(self):
        cm = confusion([1, 1], [1, 1], 3)
        self.assertEqual(cm.counts.shape, (3, 3))
        self.assertEqual(cm.counts[2].sum(), 0)

    def test_errors(self):
        with self.assertRaises(ValueError):
            confusion([], [], 2)
        with self.assertRaises(ValueError):
            confusion([1, 2], [1], 2)
        with self.assertRaises(ValueError):
            confusion([1, 3], [1, 2], 2)
        with self.assertRaises(ValueError):
            confusion([1, 2], [0, 2], 2)

    def test_dict_round_trip(self):
        cm = confusion([1, 2, 2], [2, 2, 1], 2)
        restored = ConfusionMatrix.from_dict(json.loads(json.dumps(cm.to_dict())))
        np.testing.assert_array_equal(restored.counts, cm.counts)
        self.assertEqual(restored.accuracy, cm.accuracy)


class TestEmitReport(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_writes_every_artifact(self):
        written = emit_report(sample_report(), self.tmp.name)
        for key in ("report", "test_csv", "test_svg", "validation_csv", "validation_svg", "timing"):
            self.assertTrue(os.path.exists(written[key]), key)

    def test_json_round_trip_keeps_accuracies(self):
        report = sample_report()
        emit_report(report, self.tmp.name)
        loaded = load_report(self.tmp.name)
        self.assertEqual(loaded.test_accuracy, report.test_accuracy)
        self.assertEqual(loaded.validation_accuracy, report.validation_accuracy)
        self.assertEqual(loaded.class_names, report.class_names)

    def test_report_json_excludes_wall_time(self):
        emit_report(sample_report(wall_time=1.0, run_id="a"), self.tmp.name)
        with open(os.path.join(self.tmp.name, "report.json"), "rb") as fh:
            first = fh.read()
        emit_report(sample_report(wall_time=9.0, run_id="b"), self.tmp.name)
        with open(os.path.join(self.tmp.name, "report.json"), "rb") as fh:
            self.assertEqual(fh.read(), first)
        with open(os.path.join(self.tmp.name, "timing.json"), "r", encoding="utf-8") as fh:
            self.assertEqual(json.load(fh)["wall_time_seconds"], 9.0)

    def test_csv_column_sums_are_predicted_counts(self):
        emit_report(sample_report(), self.tmp.name)
        frame = pd.read_csv(os.path.join(self.tmp.name, "confusion_test.csv"), index_col=0)
        self.assertEqual(frame.sum(axis=0).tolist(), [1, 3])
        self.assertEqual(frame.sum(axis=1).tolist(), [2, 2])

    def test_svg_carries_labels_and_accuracy(self):
        report = sample_report(test=confusion([1, 2], [1, 2], 2))
        emit_report(report, self.tmp.name, formats=("svg",))
        with open(os.path.join(self.tmp.name, "confusion_test.svg"), "r", encoding="utf-8") as fh:
            svg = fh.read()
        self.assertIn("<svg", svg)
        self.assertIn("Accuracy 100.0%", svg)
        self.assertIn("no inclusion", svg)
        self.assertFalse(os.path.exists(os.path.join(self.tmp.name, "report.json")))

    def test_missing_validation_is_skipped(self):
        written = emit_report(sample_report(validation=None), self.tmp.name)
        self.assertNotIn("validation_csv", written)
        self.assertIsNone(load_report(self.tmp.name).validation)

    def test_unknown_format(self):
        with self.assertRaises(ValueError):
            emit_report(sample_report(), self.tmp.name, formats=("png",))


class TestFigures(unittest.TestCase):
    def test_heatmap_and_curve(self):
        grid = pd.DataFrame([[0.3, np.nan], [0.5, 0.9]], index=[2, 4], columns=[2, 4])
        table = pd.DataFrame({"M": [1, 2, 4], "accuracy": [0.5, 0.6, 0.8]})
        with tempfile.TemporaryDirectory() as tmp:
            heatmap = render_heatmap(grid, os.path.join(tmp, "heatmap.svg"), "grid")
            curve = render_curve(table, "M", "accuracy", os.path.join(tmp, "curve.svg"), "curve", chance=0.25)
            self.assertTrue(heatmap.exists())
            self.assertTrue(curve.exists())


if __name__ == '__main__':
    unittest.main()
