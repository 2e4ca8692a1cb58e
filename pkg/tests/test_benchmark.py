import os
import sys
import unittest

import numpy as np
import pandas as pd

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.benchmark import BenchmarkResult, linear_probe_accuracy, threshold_tradeoff_holds
from src.classifier import LogitRecord
from src.evaluation import EvaluationReport, OpenSetEvaluator
from src.features import LabeledDataset
from src.schema import UNKNOWN_INDEX, LabelSchema, Regime
from src.thresholding import sweep


def report(backend, setting, acc_known, acc_unknown, auroc=0.5):
    return EvaluationReport(backend=backend, regime=Regime.C1, per_class={}, acc_known=acc_known,
                            acc_unknown=acc_unknown, acc=0.5 * acc_known + 0.5 * acc_unknown, auroc=auroc,
                            roc=pd.DataFrame(), histograms=pd.DataFrame(), n_examples=10, setting=setting)


class TestLinearProbe(unittest.TestCase):

    def test_separable_classes(self):
        rng = np.random.default_rng(0)

        def dataset(n):
            labels = np.repeat([0, 1, 2, UNKNOWN_INDEX], n)
            features = 0.2 * rng.normal(size=(labels.size, 10, 6))
            for i, label in enumerate(labels):
                features[i, :, label % 6] += 3.0
            return LabeledDataset(ids=[str(i) for i in range(labels.size)], features=features, labels=labels)

        self.assertEqual(linear_probe_accuracy(dataset(20), dataset(5)), 1.0)


class TestThresholdTradeoff(unittest.TestCase):

    def test_sweep_reports_trade_off(self):
        """Higher epsilon never raises ACC_K nor lowers ACC_U"""
        rng = np.random.default_rng(4)
        labels = rng.choice([0, 1, 2, UNKNOWN_INDEX], size=120)
        records = [LogitRecord.from_logits(str(i), rng.normal(scale=2.0, size=3), label)
                   for i, label in enumerate(labels)]
        evaluator = OpenSetEvaluator(LabelSchema(known_classes=("a", "b", "c")), histogram_bins=5)
        reports = [evaluator.evaluate("threshold", batch, list(labels), setting=f"eps{eps:g}")
                   for eps, batch in sweep(records, [0.9, 0.5, 0.7]).items()]
        self.assertTrue(threshold_tradeoff_holds(reports))

    def test_violation(self):
        reports = [report("threshold", "eps0.5", 60.0, 40.0), report("threshold", "eps0.7", 70.0, 50.0)]
        self.assertFalse(threshold_tradeoff_holds(reports))

    def test_no_threshold_reports(self):
        self.assertFalse(threshold_tradeoff_holds([report("c2ae", "", 60.0, 40.0)]))


class TestBenchmarkResult(unittest.TestCase):

    def test_checks_and_lookup(self):
        result = BenchmarkResult(probe_accuracy=0.99,
                                 reports=[report("threshold", "eps0.5", 60.0, 40.0), report("c2ae", "", 55.0, 70.0, 0.9)],
                                 checks={"a": True, "b": True})
        self.assertTrue(result.passed)
        self.assertEqual(result.report("c2ae").auroc, 0.9)
        self.assertEqual(list(result.comparison()["backend"]), ["threshold", "c2ae"])
        result.checks["b"] = False
        self.assertFalse(result.passed)


if __name__ == '__main__':
    unittest.main()
