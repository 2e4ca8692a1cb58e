"""
End-to-end synthetic benchmark: generate, featurize, train both networks,
fit Openmax and evaluate every back-end on the held-out clips.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
import pandas as pd
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import accuracy_score

from src.config import PipelineConfig
from src.evaluation import EvaluationReport, compare_reports, print_comparison_report
from src.features import LabeledDataset
from src.pipeline import Pipeline
from src.schema import Split

# Acceptance bars for the synthetic run
MIN_PROBE_ACCURACY = 0.95
MIN_CLOSED_SET_ACCURACY = 0.95
MIN_C2AE_AUROC = 0.8


def _pooled(dataset: LabeledDataset) -> np.ndarray:
    """Per-clip mean and std over time, one row per clip"""
    return np.concatenate([dataset.features.mean(axis=1), dataset.features.std(axis=1)], axis=1)


def linear_probe_accuracy(train_set: LabeledDataset, test_set: LabeledDataset, seed: int = 0) -> float:
    """Known-class test accuracy of a logistic regression on time-pooled features"""
    train_set, test_set = train_set.known_only(), test_set.known_only()
    probe = LogisticRegression(max_iter=2000, random_state=seed)
    probe.fit(_pooled(train_set), train_set.labels)
    return float(accuracy_score(test_set.labels, probe.predict(_pooled(test_set))))


def threshold_tradeoff_holds(reports: List[EvaluationReport]) -> bool:
    """ACC_K nonincreasing and ACC_U nondecreasing as epsilon grows"""
    table = compare_reports([report for report in reports if report.backend == "threshold"])
    if table.empty:
        return False
    table["epsilon"] = table["setting"].str.removeprefix("eps").astype(float)
    table = table.sort_values("epsilon")
    return bool(table["ACC_K"].is_monotonic_decreasing and table["ACC_U"].is_monotonic_increasing)


@dataclass
class BenchmarkResult:
    probe_accuracy: float
    reports: List[EvaluationReport]
    checks: Dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def report(self, backend: str) -> EvaluationReport:
        return next(report for report in self.reports if report.backend == backend)

    def comparison(self) -> pd.DataFrame:
        return compare_reports(self.reports)


class BenchmarkRunner:
    """Run the full pipeline on generated data and check the acceptance bars"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.pipeline = Pipeline(config)
        self.logger = logging.getLogger(__name__)

    def prepare_data(self, generate: bool = True) -> float:
        """Generate and featurize; confirm the known classes are linearly separable"""
        if generate:
            self.pipeline.generate()
        self.pipeline.featurize()
        accuracy = linear_probe_accuracy(self.pipeline.load_split(Split.TRAIN), self.pipeline.load_split(Split.TEST),
                                         self.config.run.seed)
        self.logger.info(f"Linear probe accuracy on known test clips: {accuracy:.3f}")
        return accuracy

    def run(self, generate: bool = True) -> BenchmarkResult:
        probe = self.prepare_data(generate)
        if probe <= MIN_PROBE_ACCURACY:
            self.logger.warning(f"Synthetic classes are barely separable (probe {probe:.3f}); "
                                f"classifier bars will likely fail")

        self.pipeline.train_classifier()
        self.pipeline.train_autoencoder()
        self.pipeline.fit_openmax()
        reports = self.pipeline.evaluate("all")

        result = BenchmarkResult(probe_accuracy=probe, reports=reports)
        c2ae = result.report("c2ae")
        thresholding = result.report("threshold")
        result.checks = {
            "linear probe": probe > MIN_PROBE_ACCURACY,
            "closed-set accuracy": (c2ae.closed_set_accuracy or 0.0) > MIN_CLOSED_SET_ACCURACY,
            "C2AE AUROC": c2ae.auroc > MIN_C2AE_AUROC,
            "C2AE AUROC >= thresholding AUROC": c2ae.auroc >= thresholding.auroc,
            "threshold trade-off": threshold_tradeoff_holds(reports),
        }
        self.print_summary(result)
        return result

    def print_summary(self, result: BenchmarkResult) -> None:
        print_comparison_report(result.comparison())
        print(f"\n{'=' * 60}")
        print("BENCHMARK CHECKS")
        print(f"{'=' * 60}")
        print(f"  Linear probe accuracy: {result.probe_accuracy:.3f}")
        for name, ok in result.checks.items():
            print(f"  {'PASS' if ok else 'FAIL'}  {name}")
