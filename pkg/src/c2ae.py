"""
Class-conditioned autoencoder back-end.

The autoencoder is trained to reconstruct a spectrogram when conditioned on its
true class and to output silence (all zeros in standardized space) when
conditioned on a wrong one. At inference it is conditioned on the classifier's
prediction; a reconstruction MAE at or above the threshold means UNKNOWN.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator

from src.artifacts import write_table
from src.classifier import LogitRecord
from src.errors import InvalidConfig, InvalidInput, InvalidParameter, PipelineMismatch, ShapeError
from src.features import FeatureMatrix, LabeledDataset
from src.layers import FiLM, LayerKind, LayerSpec
from src.schema import UNKNOWN_INDEX, OpenSetDecision, Regime
from src.tensor_nn import NetworkModel, Objective, TrainingConfig, TrainingResult, mean_squared_error, train

logger = logging.getLogger(__name__)

ENCODER_FILTERS = (16, 8, 4)
REDUCTION = 27  # three stride-3 convolutions


class C2aeConfig(BaseModel):
    threshold: float = Field(0.3, gt=0.0, description="MAE below which a reconstruction is accepted")
    correct_weight: float = Field(0.8, ge=0.0)
    incorrect_weight: float = Field(0.2, ge=0.0)
    latent_width: int = Field(128, ge=1)
    hidden_width: int = Field(512, ge=1)
    epochs: Optional[int] = Field(None, ge=1, description="Overrides training.epochs for the autoencoder")

    @model_validator(mode="after")
    def _weights_sum_to_one(self):
        if abs(self.correct_weight + self.incorrect_weight - 1.0) > 1e-9:
            raise ValueError("correct_weight + incorrect_weight must equal 1")
        return self


def conditioning_vector(index: int, n_known: int) -> np.ndarray:
    """+1 at the conditioning class, -1 elsewhere"""
    if not 0 <= index < n_known:
        raise InvalidParameter(f"conditioning class {index} outside 0..{n_known - 1}")
    y = -np.ones(n_known)
    y[index] = 1.0
    return y


def conditioning_matrix(indices: Sequence[int], n_known: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=int)
    if np.any((indices < 0) | (indices >= n_known)):
        raise InvalidParameter(f"conditioning classes must lie in 0..{n_known - 1}")
    y = -np.ones((indices.size, n_known))
    y[np.arange(indices.size), indices] = 1.0
    return y


@dataclass(frozen=True)
class FilmParams:
    """Dense maps label -> alpha and label -> beta, each latent-width wide"""
    alpha_weight: np.ndarray
    alpha_bias: np.ndarray
    beta_weight: np.ndarray
    beta_bias: np.ndarray

    def __post_init__(self):
        width = self.alpha_bias.shape[0]
        if not (self.alpha_weight.shape[1] == self.beta_weight.shape[1] == self.beta_bias.shape[0] == width):
            raise ShapeError("FiLM alpha and beta maps must share the latent width")

    @property
    def width(self) -> int:
        return self.alpha_bias.shape[0]

    @classmethod
    def identity(cls, n_known: int, width: int) -> "FilmParams":
        return cls(alpha_weight=np.zeros((n_known, width)), alpha_bias=np.ones(width),
                   beta_weight=np.zeros((n_known, width)), beta_bias=np.zeros(width))

    @classmethod
    def from_layer(cls, layer: FiLM) -> "FilmParams":
        return cls(**{name: value.copy() for name, value in layer.params.items()})

    def alpha(self, y: np.ndarray) -> np.ndarray:
        return y @ self.alpha_weight + self.alpha_bias

    def beta(self, y: np.ndarray) -> np.ndarray:
        return y @ self.beta_weight + self.beta_bias


def film(z: np.ndarray, y: np.ndarray, params: FilmParams) -> np.ndarray:
    """o = H_alpha(y) * z + H_beta(y)"""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != params.width:
        raise ShapeError(f"latent width {z.shape[-1]} does not match FiLM width {params.width}")
    return params.alpha(y) * z + params.beta(y)


def encoded_shape(input_shape: Tuple[int, int]) -> Tuple[int, int]:
    """Spatial dims after the three stride-3 'same' convolutions"""
    frames, mels = input_shape
    if frames < REDUCTION or mels < REDUCTION:
        raise ShapeError(f"input {frames}x{mels} is too small for three stride-3 reductions (need >= {REDUCTION})")
    return -(-frames // REDUCTION), -(-mels // REDUCTION)


def autoencoder_layer_specs(input_shape: Tuple[int, int], latent_width: int = 128,
                            hidden_width: int = 512) -> List[LayerSpec]:
    height, width = encoded_shape(input_shape)
    bottleneck = ENCODER_FILTERS[-1]
    specs = []
    for filters in ENCODER_FILTERS:
        specs += [LayerSpec.conv2d(filters, kernel=3, stride=3), LayerSpec.of(LayerKind.RELU)]
    specs += [
        LayerSpec.of(LayerKind.FLATTEN),
        LayerSpec.dense(hidden_width),
        LayerSpec.dense(latent_width),
        LayerSpec.film(latent_width),
        LayerSpec.dense(latent_width),
        LayerSpec.dense(hidden_width),
        LayerSpec.dense(bottleneck * height * width),
        LayerSpec.of(LayerKind.RESHAPE, (bottleneck, height, width)),
    ]
    for filters in reversed(ENCODER_FILTERS):
        specs += [LayerSpec.conv2d_transpose(filters, kernel=3, stride=3), LayerSpec.of(LayerKind.RELU)]
    specs += [LayerSpec.conv2d(1, kernel=1, stride=1), LayerSpec.of(LayerKind.CROP, input_shape)]
    return specs


def build_autoencoder(input_shape: Tuple[int, int], n_known: int, config: Optional[C2aeConfig] = None,
                      seed: int = 0) -> NetworkModel:
    config = config or C2aeConfig()
    specs = autoencoder_layer_specs(tuple(input_shape), config.latent_width, config.hidden_width)
    model = NetworkModel.build(specs, (1,) + tuple(input_shape), conditioning_dim=n_known, seed=seed)
    logger.info(f"Autoencoder for {input_shape[0]}x{input_shape[1]} inputs, K={n_known}: "
                f"{model.parameter_count} parameters")
    return model


def sample_wrong_labels(true_labels: np.ndarray, n_known: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn label different from the true one, per example"""
    if n_known < 2:
        raise InvalidConfig("wrong-label sampling needs at least two known classes")
    true_labels = np.asarray(true_labels, dtype=int)
    draw = rng.integers(0, n_known - 1, size=true_labels.size)
    return draw + (draw >= true_labels)


class ReconstructionObjective(Objective):
    """correct_weight * MSE(recon | true label, x) + incorrect_weight * MSE(recon | wrong label, 0)"""

    def __init__(self, x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
                 n_known: int, config: C2aeConfig, seed: int, eval_batch_size: int = 128):
        self.x_train, self.y_train = x_train, np.asarray(y_train, dtype=int)
        self.x_val, self.y_val = x_val, np.asarray(y_val, dtype=int)
        self.n_known = n_known
        self.config = config
        self.seed = seed
        self.eval_batch_size = eval_batch_size

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_validation(self) -> int:
        return len(self.y_val)

    def batch_loss(self, model: NetworkModel, x: np.ndarray, labels: np.ndarray, wrong: np.ndarray,
                   training: bool) -> Tuple[float, Optional[np.ndarray]]:
        """Both reconstructions in one stacked forward pass"""
        n = len(x)
        conditioning = np.concatenate([conditioning_matrix(labels, self.n_known),
                                       conditioning_matrix(wrong, self.n_known)])
        recon = model.forward(np.concatenate([x, x]), conditioning, training=training)
        loss_true, grad_true = mean_squared_error(recon[:n], x)
        loss_wrong, grad_wrong = mean_squared_error(recon[n:], np.zeros_like(x))
        loss = self.config.correct_weight * loss_true + self.config.incorrect_weight * loss_wrong
        grad = np.concatenate([self.config.correct_weight * grad_true, self.config.incorrect_weight * grad_wrong])
        return loss, grad

    def train_batch(self, model, indices, rng):
        labels = self.y_train[indices]
        wrong = sample_wrong_labels(labels, self.n_known, rng)
        loss, grad = self.batch_loss(model, self.x_train[indices], labels, wrong, training=True)
        model.backward(grad)
        return loss

    def validation_loss(self, model, epoch):
        # same wrong labels every epoch so losses stay comparable
        wrong_all = sample_wrong_labels(self.y_val, self.n_known, np.random.default_rng(self.seed))
        total = 0.0
        for start in range(0, self.n_validation, self.eval_batch_size):
            stop = start + self.eval_batch_size
            loss, _ = self.batch_loss(model, self.x_val[start:stop], self.y_val[start:stop],
                                      wrong_all[start:stop], training=False)
            total += loss * len(self.y_val[start:stop])
        model.clear_cache()
        return total / self.n_validation


@dataclass
class C2aeTraining:
    model: NetworkModel
    result: TrainingResult


def _require_known(labels: np.ndarray, n_known: int) -> None:
    if np.any((labels == UNKNOWN_INDEX) | (labels < 0) | (labels >= n_known)):
        raise InvalidInput("autoencoder training takes known-class examples only")


def train_c2ae(train_set: LabeledDataset, validation_set: LabeledDataset, n_known: int,
               config: C2aeConfig, training: TrainingConfig, seed: int) -> C2aeTraining:
    if n_known < 2:
        raise InvalidConfig(f"the conditioned autoencoder needs K >= 2 known classes, got {n_known}")
    _require_known(train_set.labels, n_known)
    _require_known(validation_set.labels, n_known)
    if config.epochs is not None:
        training = training.model_copy(update={"epochs": config.epochs})

    model = build_autoencoder(train_set.matrix_shape, n_known, config, seed=seed)
    objective = ReconstructionObjective(train_set.inputs(), train_set.labels, validation_set.inputs(),
                                        validation_set.labels, n_known, config, seed,
                                        eval_batch_size=training.eval_batch_size)
    result = train(model, objective, training, seed=seed, label="autoencoder")
    return C2aeTraining(model=model, result=result)


def reconstruction_errors(model: NetworkModel, inputs: np.ndarray, condition_on: Sequence[int],
                          n_known: int, batch_size: int = 128) -> np.ndarray:
    """Per-example MAE between input and its reconstruction under the given classes"""
    inputs = np.asarray(inputs, dtype=np.float64)
    recon = model.predict(inputs, conditioning_matrix(condition_on, n_known), batch_size=batch_size)
    return np.abs(recon - inputs).reshape(len(inputs), -1).mean(axis=1)


@dataclass
class C2aeDetector:
    """Trained autoencoder plus the decision settings it was fitted under"""
    model: NetworkModel
    n_known: int
    threshold: float = 0.3
    stats_fingerprint: Optional[str] = None
    regime: Regime = Regime.C1

    def __post_init__(self):
        if self.threshold <= 0:
            raise InvalidConfig(f"reconstruction threshold must be positive, got {self.threshold}")

    def conditioning_class(self, record: LogitRecord) -> int:
        """Predicted class; under C2 an unknown-unit prediction falls back to the best known unit"""
        if record.predicted < self.n_known:
            return record.predicted
        return int(np.argmax(record.logits[:self.n_known]))


@dataclass(frozen=True)
class C2aeResult:
    decision: OpenSetDecision
    error: float
    conditioned_on: int


def c2ae_decide_batch(records: Sequence[LogitRecord], dataset: LabeledDataset, detector: C2aeDetector,
                      batch_size: int = 128) -> List[C2aeResult]:
    """Decisions for records aligned with dataset rows"""
    if len(records) != len(dataset):
        raise InvalidInput(f"{len(records)} records for {len(dataset)} feature matrices")
    if dataset.stats_fingerprint is None or detector.stats_fingerprint is None:
        raise PipelineMismatch("reconstruction errors need standardized features and an autoencoder "
                               "trained under known standardization stats")
    if dataset.stats_fingerprint != detector.stats_fingerprint:
        raise PipelineMismatch(f"features standardized with {dataset.stats_fingerprint}, "
                               f"autoencoder expects {detector.stats_fingerprint}")
    condition_on = [detector.conditioning_class(record) for record in records]
    errors = reconstruction_errors(detector.model, dataset.inputs(), condition_on, detector.n_known, batch_size)

    results = []
    for record, error, cls in zip(records, errors, condition_on):
        error = float(error)
        if detector.regime == Regime.C2 and record.predicted == detector.n_known:
            # rejected by the classifier itself; rank at least as unknown as any threshold rejection
            decision = OpenSetDecision.unknown(max(error, detector.threshold))
        elif error < detector.threshold:
            decision = OpenSetDecision.known(record.predicted, error)
        else:
            decision = OpenSetDecision.unknown(error)
        results.append(C2aeResult(decision=decision, error=error, conditioned_on=cls))
    return results


def c2ae_decide(record: LogitRecord, matrix: FeatureMatrix, detector: C2aeDetector) -> OpenSetDecision:
    """known(predicted) if MAE < threshold, else UNKNOWN; score = MAE"""
    single = LabeledDataset(ids=[record.example_id], features=matrix.values[None],
                            labels=[record.true_label], stats_fingerprint=matrix.standardized_with)
    return c2ae_decide_batch([record], single, detector)[0].decision


def write_reconstruction_errors(path, records: Sequence[LogitRecord], results: Sequence[C2aeResult],
                                fingerprint: str) -> Path:
    table = pd.DataFrame({
        "id": [record.example_id for record in records],
        "true_label": [record.true_label for record in records],
        "predicted": [record.predicted for record in records],
        "conditioned_on": [result.conditioned_on for result in results],
        "err": [result.error for result in results],
    })
    return write_table(path, table, fingerprint)
