"""
Softmax thresholding: an example is UNKNOWN when its top class probability falls below epsilon.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

from src.classifier import LogitRecord
from src.errors import InvalidInput, InvalidThreshold
from src.schema import OpenSetDecision, Regime

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ThresholdPolicy:
    epsilon: float
    regime: Regime = Regime.C1
    width: Optional[int] = None  # classifier output width, checked when known

    def __post_init__(self):
        object.__setattr__(self, "regime", Regime(self.regime))
        if self.width is not None:
            self.check(self.width)
        elif not 0.0 < self.epsilon < 1.0:
            raise InvalidThreshold(f"epsilon {self.epsilon} must lie in (0, 1)")

    def check(self, width: int) -> None:
        """epsilon must lie in (1/width, 1); anything at or below 1/width never rejects"""
        if not 1.0 / width < self.epsilon < 1.0:
            raise InvalidThreshold(f"epsilon {self.epsilon} outside (1/{width}, 1)")


def threshold_decide(record: LogitRecord, policy: ThresholdPolicy) -> OpenSetDecision:
    """UNKNOWN if max probability < epsilon (strict); under C2 also when the unknown unit wins.

    The score is 1 - max probability. Unknown-unit rejections score at least
    1 - epsilon, so no known decision outranks an UNKNOWN one.
    """
    if policy.width is not None and record.width != policy.width:
        raise InvalidInput(f"record width {record.width} does not match policy width {policy.width}")
    policy.check(record.width)

    top = record.max_probability
    score = 1.0 - top
    if top < policy.epsilon:
        return OpenSetDecision.unknown(score)
    if policy.regime == Regime.C2 and record.predicted == record.width - 1:
        return OpenSetDecision.unknown(max(score, 1.0 - policy.epsilon))
    return OpenSetDecision.known(record.predicted, score)


def decide_batch(records: Sequence[LogitRecord], policy: ThresholdPolicy) -> List[OpenSetDecision]:
    return [threshold_decide(record, policy) for record in records]


def sweep(records: Sequence[LogitRecord], epsilons: Sequence[float],
          regime: Regime = Regime.C1) -> Dict[float, List[OpenSetDecision]]:
    """Decisions for every epsilon, in the order given"""
    results = {}
    for epsilon in epsilons:
        decisions = decide_batch(records, ThresholdPolicy(epsilon=epsilon, regime=regime))
        n_unknown = sum(decision.is_unknown for decision in decisions)
        logger.info(f"epsilon={epsilon}: {n_unknown}/{len(decisions)} rejected as unknown")
        results[float(epsilon)] = decisions
    return results
