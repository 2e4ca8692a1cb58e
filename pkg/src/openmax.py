"""
Openmax: EVT recalibration of classifier logits with an extra unknown slot.

Fitting keeps the correctly classified training examples of each class, takes
their mean logit vector (MAV) and fits a Weibull to the largest eucos
divergences from it. At inference the top-alpha classes lose logit mass in
proportion to their Weibull CDF; the lost mass becomes the unknown logit.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import optimize
from scipy.stats import weibull_min

from src.artifacts import check_fingerprint, read_table, write_table
from src.classifier import LogitRecord
from src.errors import (DegenerateTail, DegenerateVector, EmptyDataset, InvalidConfig, InvalidInput,
                        InvalidParameter, NotFitted, UnfittableClass)
from src.layers import softmax
from src.schema import UNKNOWN_INDEX, OpenSetDecision, Regime

logger = logging.getLogger(__name__)

# Fallback fit for tails without spread: a near-step CDF at the observed value
DEGENERATE_SHAPE = 100.0
MIN_SCALE = 1e-6
MIN_TAIL = 3


class OpenmaxConfig(BaseModel):
    tail_size: int = Field(20, ge=1)
    alpha: Optional[int] = Field(None, ge=1, description="Top classes revised; default min(10, width)")
    euclid_weight: float = Field(5e-3, ge=0.0)
    cosine_weight: float = Field(1.0, ge=0.0)
    uncertainty_eps: Optional[float] = Field(None, gt=0.0, lt=1.0)

    def divergence_config(self) -> "DivergenceConfig":
        return DivergenceConfig(euclid_weight=self.euclid_weight, cosine_weight=self.cosine_weight)

    def resolve_alpha(self, width: int) -> int:
        alpha = min(10, width) if self.alpha is None else self.alpha
        if alpha > width:
            raise InvalidConfig(f"alpha {alpha} exceeds the {width} classifier outputs")
        return alpha


@dataclass(frozen=True)
class DivergenceConfig:
    euclid_weight: float = 5e-3
    cosine_weight: float = 1.0

    def __post_init__(self):
        if self.euclid_weight < 0 or self.cosine_weight < 0:
            raise InvalidConfig("divergence weights must be non-negative")
        if self.euclid_weight == 0 and self.cosine_weight == 0:
            raise InvalidConfig("euclid_weight and cosine_weight cannot both be zero")


def divergence(v: np.ndarray, mu: np.ndarray, cfg: DivergenceConfig = DivergenceConfig()) -> float:
    """w_e * ||v - mu|| + w_c * (1 - cos(v, mu))"""
    v = np.asarray(v, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if v.shape != mu.shape:
        raise InvalidParameter(f"vector lengths differ: {v.shape} vs {mu.shape}")
    total = cfg.euclid_weight * float(np.linalg.norm(v - mu)) if cfg.euclid_weight else 0.0
    if cfg.cosine_weight:
        norms = np.linalg.norm(v) * np.linalg.norm(mu)
        if norms == 0:
            raise DegenerateVector("cosine divergence is undefined for a zero vector")
        cosine = np.clip(float(v @ mu) / norms, -1.0, 1.0)
        total += cfg.cosine_weight * (1.0 - cosine)
    return max(total, 0.0)


@dataclass(frozen=True)
class WeibullTail:
    """Three-parameter Weibull (shape k, scale lambda, location shift)"""
    shape: float
    scale: float
    shift: float = 0.0
    tail_size: int = 0

    def __post_init__(self):
        if not (self.shape > 0 and self.scale > 0 and self.shift >= 0):
            raise InvalidParameter(f"invalid Weibull parameters {self}")

    def cdf(self, x):
        return weibull_min.cdf(x, self.shape, loc=self.shift, scale=self.scale)

    def log_likelihood(self, values: np.ndarray) -> float:
        return float(np.sum(weibull_min.logpdf(values, self.shape, loc=self.shift, scale=self.scale)))


def _profile_equation(u: np.ndarray):
    """d/dk of the profile log-likelihood for values normalized into (0, 1]"""
    log_u = np.log(u)
    mean_log = log_u.mean()

    def g(k: float) -> float:
        powered = u ** k
        return float((powered * log_u).sum() / powered.sum() - mean_log - 1.0 / k)

    return g


def fit_weibull_tail(divergences: Sequence[float], tail_size: int, shift: Optional[float] = None) -> WeibullTail:
    """MLE Weibull on the tail_size largest values.

    The location defaults to the tail minimum, so the CDF is zero for anything
    below the selected tail and (shape, scale) describe the excess over it.
    Values equal to the location carry no likelihood information and are
    dropped before the 2-parameter fit. On a full sample the minimum sits
    above the generating origin by roughly scale * n**(-1/shape), which pulls
    both estimates down; pass shift=0.0 to fit a distribution anchored at zero.
    """
    values = np.asarray(divergences, dtype=np.float64).ravel()
    if tail_size < 1:
        raise InvalidParameter(f"tail size must be positive, got {tail_size}")
    if values.size == 0:
        raise EmptyDataset("no divergences to fit")

    n = min(tail_size, values.size)
    tail = np.sort(values)[-n:]
    location = float(tail[0]) if shift is None else float(shift)
    fallback = WeibullTail(shape=DEGENERATE_SHAPE, scale=max(float(tail[-1]), MIN_SCALE), shift=0.0, tail_size=n)
    if n < MIN_TAIL:
        raise DegenerateTail(f"tail of {n} values is too short to fit", fallback=fallback)

    shifted = tail - location
    shifted = shifted[shifted > 0]
    if shifted.size < 2 or np.ptp(shifted) == 0:
        raise DegenerateTail(f"tail values have no spread (min {tail[0]:.6g}, max {tail[-1]:.6g})",
                             fallback=fallback)

    top = shifted.max()
    u = shifted / top
    g = _profile_equation(u)
    low, high = 1e-3, 1.0
    while g(high) <= 0:
        high *= 2.0
        if high > 1e6:
            raise DegenerateTail("Weibull shape diverges", fallback=fallback)
    k = optimize.brentq(g, low, high, xtol=1e-12, rtol=1e-12, maxiter=200)
    scale = top * float(np.mean(u ** k)) ** (1.0 / k)
    return WeibullTail(shape=float(k), scale=float(scale), shift=location, tail_size=n)


@dataclass(frozen=True)
class ClassEVTModel:
    class_index: int
    mean_activation: np.ndarray
    weibull: WeibullTail
    n_correct: int = 0
    degenerate: bool = False

    @property
    def tail_size(self) -> int:
        return self.weibull.tail_size


@dataclass(frozen=True)
class OpenmaxModel:
    classes: List[ClassEVTModel]
    alpha: int
    divergence: DivergenceConfig = DivergenceConfig()
    regime: Regime = Regime.C1

    def __post_init__(self):
        if self.classes and not 1 <= self.alpha <= len(self.classes):
            raise InvalidConfig(f"alpha {self.alpha} must lie in [1, {len(self.classes)}]")

    @property
    def width(self) -> int:
        return len(self.classes)

    @property
    def unknown_unit(self) -> Optional[int]:
        return self.width - 1 if self.regime == Regime.C2 else None


@dataclass(frozen=True)
class OpenmaxResult:
    decision: OpenSetDecision
    probabilities: np.ndarray  # slot 0 = unknown, then one slot per classifier output
    closed_set_class: int      # best known class after recalibration


def _output_unit(record: LogitRecord, regime: Regime) -> Optional[int]:
    """Output unit the record's true label trains, None for unknowns under C1"""
    if record.true_label != UNKNOWN_INDEX:
        return record.true_label
    return record.width - 1 if regime == Regime.C2 else None


def fit_openmax(records: Sequence[LogitRecord], config: OpenmaxConfig,
                regime: Regime = Regime.C1) -> OpenmaxModel:
    """Per-class MAV and Weibull tail from correctly classified training records"""
    if not records:
        raise EmptyDataset("no training logit records")
    widths = {record.width for record in records}
    if len(widths) != 1:
        raise InvalidInput(f"records have mixed widths {sorted(widths)}")
    width = widths.pop()
    regime = Regime(regime)
    cfg = config.divergence_config()
    alpha = config.resolve_alpha(width)

    classes = []
    for c in range(width):
        hits = [record.logits for record in records if _output_unit(record, regime) == c and record.predicted == c]
        if not hits:
            raise UnfittableClass(f"class {c} has no correctly classified training examples")
        correct = np.stack(hits)
        mean_activation = correct.mean(axis=0)
        distances = np.array([divergence(v, mean_activation, cfg) for v in correct])
        if correct.shape[0] < config.tail_size:
            logger.warning(f"class {c}: tail size {config.tail_size} clamped to {correct.shape[0]} correct examples")
        try:
            weibull = fit_weibull_tail(distances, config.tail_size)
            degenerate = False
        except DegenerateTail as e:
            logger.warning(f"class {c}: {e}; using fallback Weibull {e.fallback}")
            weibull, degenerate = e.fallback, True
        classes.append(ClassEVTModel(class_index=c, mean_activation=mean_activation, weibull=weibull,
                                     n_correct=int(correct.shape[0]), degenerate=degenerate))
        logger.debug(f"class {c}: {correct.shape[0]} correct, weibull {weibull}")

    logger.info(f"Fitted Openmax over {width} classes (alpha={alpha}, regime {regime.value})")
    return OpenmaxModel(classes=classes, alpha=alpha, divergence=cfg, regime=regime)


def openmax_decide(record: LogitRecord, model: OpenmaxModel,
                   uncertainty_eps: Optional[float] = None) -> OpenmaxResult:
    if not model.classes:
        raise NotFitted("Openmax model has no fitted classes")
    if record.width != model.width:
        raise InvalidInput(f"record width {record.width} does not match model width {model.width}")

    v = record.logits
    weights = np.ones(model.width)
    ranked = np.argsort(-v, kind="stable")
    for rank, c in enumerate(ranked[:model.alpha], start=1):
        evt = model.classes[c]
        cdf = float(evt.weibull.cdf(divergence(v, evt.mean_activation, model.divergence)))
        weights[c] = 1.0 - ((model.alpha - rank + 1) / model.alpha) * cdf

    revised = v * weights
    unknown_logit = float(np.sum(v * (1.0 - weights)))
    probabilities = softmax(np.concatenate([[unknown_logit], revised]))

    known_slots = probabilities[1:].copy()
    if model.unknown_unit is not None:
        known_slots[model.unknown_unit] = -np.inf
    closed_set_class = int(np.argmax(known_slots))

    best = int(np.argmax(probabilities))
    score = float(probabilities[0])
    is_unknown = best == 0 or (model.unknown_unit is not None and best - 1 == model.unknown_unit)
    if uncertainty_eps is not None and probabilities.max() < uncertainty_eps:
        is_unknown = True
    decision = OpenSetDecision.unknown(score) if is_unknown else OpenSetDecision.known(best - 1, score)
    return OpenmaxResult(decision=decision, probabilities=probabilities, closed_set_class=closed_set_class)


def decide_batch(records: Sequence[LogitRecord], model: OpenmaxModel,
                 uncertainty_eps: Optional[float] = None) -> List[OpenmaxResult]:
    return [openmax_decide(record, model, uncertainty_eps) for record in records]


def save_openmax(path, model: OpenmaxModel, fingerprint: str) -> Path:
    """One row per class: index, Weibull parameters, tail size, MAV"""
    table = pd.DataFrame([
        {"class": evt.class_index, "shape": evt.weibull.shape, "scale": evt.weibull.scale,
         "shift": evt.weibull.shift, "tail_size": evt.tail_size, "n_correct": evt.n_correct,
         "degenerate": int(evt.degenerate),
         **{f"mu_{i}": value for i, value in enumerate(evt.mean_activation)}}
        for evt in model.classes
    ])
    header = {"alpha": model.alpha, "euclid_weight": repr(model.divergence.euclid_weight),
              "cosine_weight": repr(model.divergence.cosine_weight), "regime": model.regime.value,
              "width": model.width}
    return write_table(path, table, fingerprint, header=header)


def load_openmax(path, expected_fingerprint: Optional[str] = None) -> OpenmaxModel:
    table, header = read_table(path)
    if expected_fingerprint is not None:
        check_fingerprint(header["fingerprint"], expected_fingerprint, f"Openmax model {path}")
    width = int(header["width"])
    mu_columns = [f"mu_{i}" for i in range(width)]
    classes = [
        ClassEVTModel(
            class_index=int(row["class"]),
            mean_activation=row[mu_columns].to_numpy(dtype=np.float64),
            weibull=WeibullTail(shape=float(row["shape"]), scale=float(row["scale"]),
                                shift=float(row["shift"]), tail_size=int(row["tail_size"])),
            n_correct=int(row["n_correct"]),
            degenerate=bool(row["degenerate"]),
        )
        for _, row in table.iterrows()
    ]
    return OpenmaxModel(
        classes=classes, alpha=int(header["alpha"]),
        divergence=DivergenceConfig(euclid_weight=float(header["euclid_weight"]),
                                    cosine_weight=float(header["cosine_weight"])),
        regime=Regime(header["regime"]),
    )
