"""
Network container, losses, Adam and the epoch/batch training loop shared by the
scene classifier and the conditioned autoencoder.
"""

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from src.artifacts import check_fingerprint, read_container, write_container
from src.errors import EmptyDataset, MissingConditioning, NonFiniteGradient, ShapeError
from src.layers import FiLM, Layer, LayerKind, LayerSpec, Shape, make_layer, softmax

logger = logging.getLogger(__name__)


class TrainingConfig(BaseModel):
    """Optimizer and loop settings (Adam, 100 epochs, batches of 32)"""
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_epsilon: float = Field(1e-8, gt=0.0)
    eval_batch_size: int = Field(128, ge=1)


class NetworkModel:
    """Ordered stack of built layers"""

    def __init__(self, specs: Sequence[LayerSpec], layers: Sequence[Layer], input_shape: Shape,
                 conditioning_dim: int = 0):
        self.specs = list(specs)
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.conditioning_dim = conditioning_dim
        self._ran = 0

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], input_shape: Shape, conditioning_dim: int = 0,
              seed: int = 0) -> "NetworkModel":
        """Chain the specs, checking dimensions layer by layer"""
        rng = np.random.default_rng(seed)
        shape = tuple(input_shape)
        layers = []
        for position, spec in enumerate(specs):
            layer = make_layer(spec)
            try:
                shape = layer.build(shape, rng, conditioning_dim)
            except ShapeError as e:
                raise ShapeError(f"layer {position} ({spec.kind.value}): {e}") from e
            layers.append(layer)
        return cls(specs, layers, input_shape, conditioning_dim)

    @property
    def output_shape(self) -> Shape:
        return self.layers[-1].output_shape if self.layers else self.input_shape

    @property
    def needs_conditioning(self) -> bool:
        return any(isinstance(layer, FiLM) for layer in self.layers)

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)

    def find_layer(self, kind: LayerKind) -> Optional[Layer]:
        return next((layer for layer in self.layers if layer.kind == kind), None)

    def forward(self, x: np.ndarray, conditioning: Optional[np.ndarray] = None, training: bool = False,
                skip_softmax: bool = False) -> np.ndarray:
        """Run the batch through the stack; skip_softmax stops before a trailing softmax"""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"expected input (N, {self.input_shape}), got {x.shape}")
        if self.needs_conditioning and conditioning is None:
            raise MissingConditioning("model contains a FiLM layer; pass a conditioning vector")
        if conditioning is not None and not self.needs_conditioning:
            raise ShapeError("conditioning given to a model without a FiLM layer")

        stop = len(self.layers)
        if skip_softmax and self.layers and self.layers[-1].kind == LayerKind.SOFTMAX:
            stop -= 1
        for layer in self.layers[:stop]:
            x = layer.forward(x, training=training, conditioning=conditioning)
        self._ran = stop
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        """Backpropagate through the layers of the last forward; returns d loss / d input"""
        for layer in reversed(self.layers[:self._ran] if self._ran else self.layers):
            grad = layer.backward(grad)
        return grad

    def predict(self, x: np.ndarray, conditioning: Optional[np.ndarray] = None, batch_size: int = 128,
                skip_softmax: bool = False) -> np.ndarray:
        """Inference-mode forward in chunks"""
        outputs = []
        for start in range(0, len(x), batch_size):
            chunk_cond = None if conditioning is None else conditioning[start:start + batch_size]
            outputs.append(self.forward(x[start:start + batch_size], chunk_cond, skip_softmax=skip_softmax))
        self.clear_cache()
        if not outputs:
            return np.zeros((0,) + self.output_shape)
        return np.concatenate(outputs, axis=0)

    def clear_cache(self) -> None:
        for layer in self.layers:
            layer.clear_cache()
        self._ran = 0

    def parameters(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": value for i, layer in enumerate(self.layers) for name, value in layer.params.items()}

    def gradients(self) -> Dict[str, np.ndarray]:
        return {f"{i}.{name}": value for i, layer in enumerate(self.layers) for name, value in layer.grads.items()}

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        """Copies of every parameter and buffer"""
        state = {}
        for i, layer in enumerate(self.layers):
            for name, value in {**layer.params, **layer.buffers}.items():
                state[f"{i}.{name}"] = value.copy()
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for i, layer in enumerate(self.layers):
            for store in (layer.params, layer.buffers):
                for name in store:
                    key = f"{i}.{name}"
                    if key not in state:
                        raise ShapeError(f"state is missing {key}")
                    value = np.asarray(state[key], dtype=np.float64)
                    if value.shape != store[name].shape:
                        raise ShapeError(f"{key}: expected {store[name].shape}, got {value.shape}")
                    store[name] = value.copy()

    def summary(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"layer": i, "kind": layer.kind.value, "output": layer.output_shape, "parameters": layer.parameter_count}
            for i, layer in enumerate(self.layers)
        ])


# Losses: each returns (mean loss, gradient w.r.t. the first argument)

def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits); targets are class indices or one-hot rows"""
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.shape[0]
    if np.ndim(targets) == 1:
        one_hot = np.zeros_like(logits)
        one_hot[np.arange(n), np.asarray(targets, dtype=int)] = 1.0
    else:
        one_hot = np.asarray(targets, dtype=np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(one_hot * log_probs).sum() / n)
    return loss, (np.exp(log_probs) - one_hot) / n


def mean_squared_error(prediction: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = prediction - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def mean_absolute_error(prediction: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    diff = prediction - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


@dataclass
class OptimizerState:
    """Adam moments per parameter name"""
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_parameters(cls, params: Mapping[str, np.ndarray], config: Optional[TrainingConfig] = None) -> "OptimizerState":
        config = config or TrainingConfig()
        return cls(
            learning_rate=config.learning_rate, beta1=config.beta1, beta2=config.beta2, epsilon=config.adam_epsilon,
            first_moment={name: np.zeros_like(value) for name, value in params.items()},
            second_moment={name: np.zeros_like(value) for name, value in params.items()},
        )


def adam_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    """One bias-corrected Adam update, in place on params and state"""
    for name, grad in grads.items():
        if grad.shape != params[name].shape:
            raise ShapeError(f"gradient {name} has shape {grad.shape}, parameter {params[name].shape}")
        if not np.all(np.isfinite(grad)):
            raise NonFiniteGradient(f"non-finite gradient in {name} at step {state.step + 1}")

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        m = state.first_moment.setdefault(name, np.zeros_like(grad))
        v = state.second_moment.setdefault(name, np.zeros_like(grad))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad ** 2
        params[name] -= state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        if not np.all(np.isfinite(params[name])):
            raise NonFiniteGradient(f"parameter {name} became non-finite at step {state.step}")


class BestCheckpoint:
    """Keeps the weights of the epoch with the lowest validation loss (first one on ties)"""

    def __init__(self):
        self.best_loss = np.inf
        self.best_epoch: Optional[int] = None
        self.state: Optional[Dict[str, np.ndarray]] = None

    def update(self, epoch: int, loss: float, model: NetworkModel) -> bool:
        if np.isfinite(loss) and loss < self.best_loss:
            self.best_loss = loss
            self.best_epoch = epoch
            self.state = model.state_dict()
            return True
        return False

    def restore(self, model: NetworkModel) -> None:
        if self.state is not None:
            model.load_state_dict(self.state)


class Objective(ABC):
    """Training signal for train(): batch loss with backward, and validation loss"""

    @property
    @abstractmethod
    def n_train(self) -> int:
        pass

    @property
    @abstractmethod
    def n_validation(self) -> int:
        pass

    @abstractmethod
    def train_batch(self, model: NetworkModel, indices: np.ndarray, rng: np.random.Generator) -> float:
        """Forward in training mode, backward into model gradients, return the batch loss"""
        pass

    @abstractmethod
    def validation_loss(self, model: NetworkModel, epoch: int) -> float:
        pass


class ClassificationObjective(Objective):
    """Categorical cross-entropy on the logits of a softmax-terminated model"""

    def __init__(self, x_train: np.ndarray, y_train: np.ndarray, x_val: np.ndarray, y_val: np.ndarray,
                 eval_batch_size: int = 128):
        self.x_train, self.y_train = x_train, np.asarray(y_train, dtype=int)
        self.x_val, self.y_val = x_val, np.asarray(y_val, dtype=int)
        self.eval_batch_size = eval_batch_size

    @property
    def n_train(self) -> int:
        return len(self.y_train)

    @property
    def n_validation(self) -> int:
        return len(self.y_val)

    def train_batch(self, model, indices, rng):
        logits = model.forward(self.x_train[indices], training=True, skip_softmax=True)
        loss, grad = softmax_cross_entropy(logits, self.y_train[indices])
        model.backward(grad)
        return loss

    def validation_loss(self, model, epoch):
        logits = model.predict(self.x_val, batch_size=self.eval_batch_size, skip_softmax=True)
        return softmax_cross_entropy(logits, self.y_val)[0]


@dataclass
class TrainingResult:
    model: NetworkModel
    history: pd.DataFrame  # epoch, train_loss, val_loss
    best_epoch: int
    best_val_loss: float


def train(model: NetworkModel, objective: Objective, config: TrainingConfig, seed: int,
          label: str = "model") -> TrainingResult:
    """Mini-batch Adam with per-epoch shuffling; returns the best-validation weights"""
    if objective.n_train == 0:
        raise EmptyDataset(f"{label}: training split is empty")
    if objective.n_validation == 0:
        raise EmptyDataset(f"{label}: validation split is empty")

    rng = np.random.default_rng(seed)
    state = OptimizerState.for_parameters(model.parameters(), config)
    best = BestCheckpoint()
    rows: List[Dict[str, Any]] = []

    logger.info(f"Training {label}: {model.parameter_count} parameters, {objective.n_train} train / "
                f"{objective.n_validation} validation examples, {config.epochs} epochs")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(objective.n_train)
        total = 0.0
        for start in range(0, objective.n_train, config.batch_size):
            batch = order[start:start + config.batch_size]
            model.zero_grad()
            total += objective.train_batch(model, batch, rng) * len(batch)
            adam_step(state, model.parameters(), model.gradients())
        train_loss = total / objective.n_train
        val_loss = objective.validation_loss(model, epoch)
        improved = best.update(epoch, val_loss, model)
        rows.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        logger.info(f"{label} epoch {epoch}/{config.epochs}: train {train_loss:.4f} val {val_loss:.4f}"
                    f"{' *' if improved else ''}")

    if best.best_epoch is None:
        raise NonFiniteGradient(f"{label}: validation loss never became finite")
    best.restore(model)
    model.clear_cache()
    logger.info(f"{label}: best validation loss {best.best_loss:.4f} at epoch {best.best_epoch}")
    return TrainingResult(model=model, history=pd.DataFrame(rows), best_epoch=best.best_epoch,
                          best_val_loss=best.best_loss)


def write_training_log(path, history: pd.DataFrame, fingerprint: str) -> Path:
    """One header-less line per epoch: epoch, train loss, val loss, fingerprint"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    history.assign(fingerprint=fingerprint).to_csv(path, sep="\t", index=False, header=False,
                                                   lineterminator="\n", float_format="%.10g")
    return path


def save_checkpoint(path, model: NetworkModel, fingerprint: str, meta: Optional[Mapping[str, Any]] = None) -> Path:
    info = {
        "kind": "checkpoint",
        "specs": [spec.model_dump(mode="json") for spec in model.specs],
        "input_shape": list(model.input_shape),
        "conditioning_dim": model.conditioning_dim,
        "parameter_count": model.parameter_count,
        **(meta or {}),
    }
    return write_container(path, model.state_dict(), fingerprint, meta=info)


def load_checkpoint(path, expected_fingerprint: Optional[str] = None) -> Tuple[NetworkModel, Dict[str, Any]]:
    container = read_container(path)
    if expected_fingerprint is not None:
        check_fingerprint(container.fingerprint, expected_fingerprint, f"checkpoint {path}")
    meta = container.meta
    specs = [LayerSpec.model_validate(spec) for spec in meta["specs"]]
    model = NetworkModel.build(specs, tuple(meta["input_shape"]), meta.get("conditioning_dim", 0))
    model.load_state_dict(container.arrays)
    return model, meta
