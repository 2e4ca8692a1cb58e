"""
Closed-set scene classifier shared by the three open-set back-ends.

Five Conv2D+ReLU+BatchNorm blocks, global average pooling, dense + softmax.
Output width is K under C1 (knowns only) and K+1 under C2, where unit K is the
aggregated unknown class.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from src.artifacts import check_fingerprint, read_table, write_table
from src.errors import EmptyDataset, InvalidParameter, RegimeViolation
from src.features import FeatureMatrix, LabeledDataset
from src.layers import LayerKind, LayerSpec, softmax
from src.schema import UNKNOWN_INDEX, Regime
from src.tensor_nn import ClassificationObjective, NetworkModel, TrainingConfig, TrainingResult, train

logger = logging.getLogger(__name__)

# (filters, stride) of the convolution blocks, kernel 3 throughout
CONV_BLOCKS = [(16, 1), (32, 2), (32, 1), (64, 2), (64, 1)]


class ClassifierConfig(BaseModel):
    n_known: int = Field(..., ge=1, description="K, number of known classes")
    regime: Regime = Regime.C1
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    seed: int = 0

    @property
    def output_width(self) -> int:
        return self.n_known + (1 if self.regime == Regime.C2 else 0)

    @property
    def unknown_unit(self) -> Optional[int]:
        """Output index of the aggregated unknown class (C2 only)"""
        return self.n_known if self.regime == Regime.C2 else None


@dataclass(frozen=True)
class LogitRecord:
    """Classifier output for one example; true_label uses UNKNOWN_INDEX for unknowns"""
    example_id: str
    logits: np.ndarray
    probabilities: np.ndarray
    predicted: int
    true_label: int = UNKNOWN_INDEX

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if logits.shape != probabilities.shape or logits.ndim != 1:
            raise InvalidParameter(f"logits {logits.shape} and probabilities {probabilities.shape} must match")
        if not np.allclose(probabilities, softmax(logits), rtol=0.0, atol=1e-6):
            raise InvalidParameter(f"{self.example_id}: probabilities are not softmax(logits)")
        if self.predicted != int(np.argmax(logits)):
            raise InvalidParameter(f"{self.example_id}: predicted class is not the argmax")
        object.__setattr__(self, "logits", logits)
        object.__setattr__(self, "probabilities", probabilities)

    @classmethod
    def from_logits(cls, example_id: str, logits: np.ndarray, true_label: int = UNKNOWN_INDEX) -> "LogitRecord":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(example_id=example_id, logits=logits, probabilities=softmax(logits),
                   predicted=int(np.argmax(logits)), true_label=int(true_label))

    @property
    def width(self) -> int:
        return self.logits.size

    @property
    def max_probability(self) -> float:
        return float(self.probabilities.max())


def classifier_layer_specs(output_width: int) -> List[LayerSpec]:
    specs = []
    for filters, stride in CONV_BLOCKS:
        specs += [LayerSpec.conv2d(filters, kernel=3, stride=stride),
                  LayerSpec.of(LayerKind.RELU),
                  LayerSpec.of(LayerKind.BATCH_NORM)]
    specs += [LayerSpec.of(LayerKind.AVERAGE_POOL_GLOBAL),
              LayerSpec.dense(output_width),
              LayerSpec.of(LayerKind.SOFTMAX)]
    return specs


def build_classifier(config: ClassifierConfig, input_shape: Tuple[int, int]) -> NetworkModel:
    """input_shape is (frames, mels); the network sees one input channel"""
    model = NetworkModel.build(classifier_layer_specs(config.output_width), (1,) + tuple(input_shape),
                               seed=config.seed)
    logger.info(f"Classifier ({config.regime.value}, width {config.output_width}): "
                f"{model.parameter_count} parameters")
    return model


def regime_targets(labels: np.ndarray, n_known: int, regime: Regime) -> np.ndarray:
    """Map dataset labels to output units; unknowns go to unit K under C2"""
    labels = np.asarray(labels, dtype=int)
    unknown = labels == UNKNOWN_INDEX
    if Regime(regime) == Regime.C1 and np.any(unknown):
        raise RegimeViolation(f"{int(unknown.sum())} unknown-labeled examples cannot train a C1 classifier")
    if np.any((labels < UNKNOWN_INDEX) | (labels >= n_known)):
        raise RegimeViolation(f"labels must be known indices 0..{n_known - 1} or {UNKNOWN_INDEX}")
    return np.where(unknown, n_known, labels)


@dataclass
class ClassifierTraining:
    model: NetworkModel
    records: List[LogitRecord]
    result: TrainingResult


def train_classifier(config: ClassifierConfig, train_set: LabeledDataset,
                     validation_set: LabeledDataset) -> ClassifierTraining:
    """Train with categorical cross-entropy; emit LogitRecords for the training set"""
    targets = regime_targets(train_set.labels, config.n_known, config.regime)
    val_targets = regime_targets(validation_set.labels, config.n_known, config.regime)
    if len(train_set) == 0:
        raise EmptyDataset("classifier training split is empty")

    model = build_classifier(config, train_set.matrix_shape)
    objective = ClassificationObjective(train_set.inputs(), targets, validation_set.inputs(), val_targets,
                                        eval_batch_size=config.training.eval_batch_size)
    result = train(model, objective, config.training, seed=config.seed,
                   label=f"classifier-{config.regime.value}")
    records = predict_batch(model, train_set, config.training.eval_batch_size)
    logger.info(f"Classifier training-set closed-set accuracy: {closed_set_accuracy(records):.3f}")
    return ClassifierTraining(model=model, records=records, result=result)


def predict(model: NetworkModel, matrix: FeatureMatrix, example_id: str = "",
            true_label: int = UNKNOWN_INDEX) -> LogitRecord:
    logits = model.predict(matrix.values[None, None, :, :], skip_softmax=True)[0]
    return LogitRecord.from_logits(example_id, logits, true_label)


def predict_batch(model: NetworkModel, dataset: LabeledDataset, batch_size: int = 128) -> List[LogitRecord]:
    logits = model.predict(dataset.inputs(), batch_size=batch_size, skip_softmax=True)
    return [LogitRecord.from_logits(example_id, row, label)
            for example_id, row, label in zip(dataset.ids, logits, dataset.labels)]


def closed_set_accuracy(records: Sequence[LogitRecord]) -> float:
    """Accuracy over examples of known classes only"""
    known = [record for record in records if record.true_label != UNKNOWN_INDEX]
    if not known:
        raise EmptyDataset("no known-class records to score")
    return float(np.mean([record.predicted == record.true_label for record in known]))


def write_logit_records(path, records: Sequence[LogitRecord], fingerprint: str, regime: Regime) -> Path:
    """id, true label, predicted, logits..., probabilities..."""
    if not records:
        raise EmptyDataset("no logit records to write")
    width = records[0].width
    table = pd.DataFrame({
        "id": [record.example_id for record in records],
        "true_label": [record.true_label for record in records],
        "predicted": [record.predicted for record in records],
    })
    logits = pd.DataFrame(np.stack([record.logits for record in records]),
                          columns=[f"logit_{i}" for i in range(width)])
    probabilities = pd.DataFrame(np.stack([record.probabilities for record in records]),
                                 columns=[f"prob_{i}" for i in range(width)])
    table = pd.concat([table, logits, probabilities], axis=1)
    return write_table(path, table, fingerprint, header={"regime": Regime(regime).value, "width": width})


def read_logit_records(path, expected_fingerprint: Optional[str] = None) -> Tuple[List[LogitRecord], Regime]:
    table, header = read_table(path)
    if expected_fingerprint is not None:
        check_fingerprint(header["fingerprint"], expected_fingerprint, f"logit records {path}")
    width = int(header["width"])
    logit_columns = [f"logit_{i}" for i in range(width)]
    prob_columns = [f"prob_{i}" for i in range(width)]
    records = [
        LogitRecord(example_id=str(row["id"]), logits=row[logit_columns].to_numpy(dtype=np.float64),
                    probabilities=row[prob_columns].to_numpy(dtype=np.float64),
                    predicted=int(row["predicted"]), true_label=int(row["true_label"]))
        for _, row in table.iterrows()
    ]
    return records, Regime(header["regime"])
