import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.metrics import auc, roc_curve

from src.artifacts import write_table
from src.errors import EmptyDataset, InvalidInput, InvalidParameter, UndefinedMetric
from src.schema import UNKNOWN_INDEX, LabelSchema, OpenSetDecision, Regime, SceneLabel

logger = logging.getLogger(__name__)

LabelLike = Union[int, SceneLabel]


@dataclass
class DcaseScore:
    """Percentages; acc = 0.5 * acc_known + 0.5 * acc_unknown"""
    acc_known: float
    acc_unknown: float
    acc: float


@dataclass
class RocResult:
    auroc: float
    points: pd.DataFrame  # fpr, tpr, threshold


@dataclass
class EvaluationReport:
    """Open-set metrics for one back-end setting"""
    backend: str
    regime: Regime
    per_class: Dict[str, float]
    acc_known: float
    acc_unknown: float
    acc: float
    auroc: float
    roc: pd.DataFrame
    histograms: pd.DataFrame
    n_examples: int
    setting: str = ""
    closed_set_accuracy: Optional[float] = None
    extra: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if abs(self.acc - (0.5 * self.acc_known + 0.5 * self.acc_unknown)) > 1e-9:
            raise InvalidParameter("ACC must equal 0.5 * ACC_K + 0.5 * ACC_U")

    @property
    def name(self) -> str:
        return f"{self.backend}-{self.setting}" if self.setting else self.backend

    def summary_row(self) -> Dict[str, object]:
        return {
            "backend": self.backend,
            "setting": self.setting,
            "regime": self.regime.value,
            "ACC_K": self.acc_known,
            "ACC_U": self.acc_unknown,
            "ACC": self.acc,
            "AUROC": self.auroc,
            "closed_set": self.closed_set_accuracy,
        }


def _label_index(label: LabelLike) -> int:
    return label.index if isinstance(label, SceneLabel) else int(label)


def class_accuracies(pairs: Sequence[Tuple[OpenSetDecision, LabelLike]],
                     classes: Optional[Sequence[int]] = None) -> Dict[int, float]:
    """correct(c) / count(c) per true class, UNKNOWN being one more class.

    Classes listed in `classes` but absent from the ground truth map to NaN.
    """
    if not pairs:
        raise EmptyDataset("no decisions to score")
    correct: Dict[int, int] = {}
    count: Dict[int, int] = {}
    for decision, label in pairs:
        truth = _label_index(label)
        count[truth] = count.get(truth, 0) + 1
        correct[truth] = correct.get(truth, 0) + int(decision.predicted_label == truth)

    accuracies = {c: correct[c] / count[c] for c in sorted(count)}
    for c in classes or []:
        if c not in accuracies:
            logger.warning(f"class {c} has no examples in the ground truth; accuracy undefined")
            accuracies[c] = float("nan")
    return accuracies


def dcase_score(per_class: Dict[int, float], known_classes: Sequence[int],
                unknown_class: int = UNKNOWN_INDEX) -> DcaseScore:
    """ACC_K = mean known-class accuracy, ACC_U = unknown accuracy, ACC = their average (percent)"""
    unknown = per_class.get(unknown_class, float("nan"))
    if np.isnan(unknown):
        raise InvalidInput("the unknown class has no accuracy; DCASE score needs unknown examples")
    known = [per_class[c] for c in known_classes if c in per_class and not np.isnan(per_class[c])]
    if not known:
        raise InvalidInput("no known class has a defined accuracy")
    dropped = len(known_classes) - len(known)
    if dropped:
        logger.warning(f"{dropped} known classes excluded from ACC_K (undefined accuracy)")

    acc_known = 100.0 * float(np.mean(known))
    acc_unknown = 100.0 * float(unknown)
    return DcaseScore(acc_known=acc_known, acc_unknown=acc_unknown, acc=0.5 * acc_known + 0.5 * acc_unknown)


def auroc(scores: Sequence[float], is_unknown: Sequence[bool]) -> RocResult:
    """Unknown-vs-known ROC over every distinct score threshold; ties form one step"""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(is_unknown, dtype=bool)
    if scores.shape != labels.shape or scores.size == 0:
        raise InvalidInput("scores and labels must be non-empty and equally long")
    if labels.all() or not labels.any():
        raise UndefinedMetric("AUROC needs both known and unknown examples")

    fpr, tpr, thresholds = roc_curve(labels.astype(int), scores, pos_label=1, drop_intermediate=False)
    points = pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thresholds})
    return RocResult(auroc=float(auc(fpr, tpr)), points=points)


def score_histograms(scores: Sequence[float], is_unknown: Sequence[bool], bins: int = 20) -> pd.DataFrame:
    """Equal-width bins over the joint score range; counts per group"""
    if bins < 2:
        raise InvalidParameter(f"need at least 2 bins, got {bins}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(is_unknown, dtype=bool)
    if scores.size == 0:
        raise EmptyDataset("no scores to histogram")
    edges = np.histogram_bin_edges(scores, bins=bins)
    known_counts, _ = np.histogram(scores[~labels], bins=edges)
    unknown_counts, _ = np.histogram(scores[labels], bins=edges)
    return pd.DataFrame({"bin_start": edges[:-1], "bin_end": edges[1:],
                         "known": known_counts, "unknown": unknown_counts})


class OpenSetEvaluator:
    """Turns back-end decisions into EvaluationReports"""

    def __init__(self, schema: LabelSchema, histogram_bins: int = 20):
        self.schema = schema
        self.histogram_bins = histogram_bins
        self.logger = logging.getLogger(__name__)

    def evaluate(self, backend: str, decisions: Sequence[OpenSetDecision], true_labels: Sequence[int],
                 regime: Regime = Regime.C1, setting: str = "",
                 closed_set_accuracy: Optional[float] = None) -> EvaluationReport:
        if len(decisions) != len(true_labels):
            raise InvalidInput(f"{len(decisions)} decisions for {len(true_labels)} labels")
        self.logger.info(f"Evaluating {backend} {setting} on {len(decisions)} examples")

        known = list(range(self.schema.n_known))
        per_class = class_accuracies(list(zip(decisions, true_labels)), classes=known + [UNKNOWN_INDEX])
        score = dcase_score(per_class, known)

        scores = [decision.unknownness_score for decision in decisions]
        is_unknown = [label == UNKNOWN_INDEX for label in true_labels]
        try:
            roc = auroc(scores, is_unknown)
        except UndefinedMetric as e:
            self.logger.warning(f"{backend}: {e}")
            roc = RocResult(auroc=float("nan"), points=pd.DataFrame(columns=["fpr", "tpr", "threshold"]))

        return EvaluationReport(
            backend=backend,
            regime=Regime(regime),
            per_class={self.schema.name_of(c): acc for c, acc in per_class.items()},
            acc_known=score.acc_known,
            acc_unknown=score.acc_unknown,
            acc=score.acc,
            auroc=roc.auroc,
            roc=roc.points,
            histograms=score_histograms(scores, is_unknown, self.histogram_bins),
            n_examples=len(decisions),
            setting=setting,
            closed_set_accuracy=closed_set_accuracy,
        )


def write_report(report: EvaluationReport, directory, fingerprint: str) -> Dict[str, Path]:
    """report_<name>.txt (key: value) plus roc_<name>.tsv and histogram_<name>.tsv"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = {
        "fingerprint": fingerprint,
        "backend": report.backend,
        "setting": report.setting,
        "regime": report.regime.value,
        "examples": report.n_examples,
        "ACC_K": f"{report.acc_known:.6f}",
        "ACC_U": f"{report.acc_unknown:.6f}",
        "ACC": f"{report.acc:.6f}",
        "AUROC": f"{report.auroc:.6f}",
    }
    if report.closed_set_accuracy is not None:
        lines["closed_set_accuracy"] = f"{report.closed_set_accuracy:.6f}"
    for name, acc in report.per_class.items():
        lines[f"accuracy.{name}"] = f"{acc:.6f}"

    paths = {
        "report": directory / f"report_{report.name}.txt",
        "roc": directory / f"roc_{report.name}.tsv",
        "histogram": directory / f"histogram_{report.name}.tsv",
    }
    paths["report"].write_text("".join(f"{key}: {value}\n" for key, value in lines.items()), encoding="utf-8")
    write_table(paths["roc"], report.roc, fingerprint, header={"backend": report.name})
    write_table(paths["histogram"], report.histograms, fingerprint, header={"backend": report.name})
    return paths


def write_decisions(path, ids: Sequence[str], true_labels: Sequence[int],
                    decisions: Sequence[OpenSetDecision], fingerprint: str) -> Path:
    table = pd.DataFrame({
        "id": list(ids),
        "true_label": list(true_labels),
        "decision": [decision.predicted_label for decision in decisions],
        "unknownness_score": [decision.unknownness_score for decision in decisions],
    })
    return write_table(path, table, fingerprint)


def compare_reports(reports: Sequence[EvaluationReport]) -> pd.DataFrame:
    """One row per back-end setting"""
    return pd.DataFrame([report.summary_row() for report in reports])


def print_evaluation_report(report: EvaluationReport) -> None:
    print(f"\n{'=' * 60}")
    print(f"EVALUATION REPORT: {report.name} ({report.regime.value})")
    print(f"{'=' * 60}")
    print(f"  ACC_K: {report.acc_known:.1f}%")
    print(f"  ACC_U: {report.acc_unknown:.1f}%")
    print(f"  ACC:   {report.acc:.1f}%")
    print(f"  AUROC: {report.auroc:.3f}")
    if report.closed_set_accuracy is not None:
        print(f"  Closed-set accuracy: {100 * report.closed_set_accuracy:.1f}%")
    print("\nPer-class accuracy:")
    for name, acc in report.per_class.items():
        print(f"  {name}: {acc:.3f}")


def print_comparison_report(table: pd.DataFrame) -> None:
    print(f"\n{'=' * 80}")
    print("BACK-END COMPARISON")
    print(f"{'=' * 80}")
    print(table.round(3).to_string(index=False))
