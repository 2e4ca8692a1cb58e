import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.errors import InvalidInput

# Dataset-level index of the unknown class. Known classes are 0..K-1.
UNKNOWN_INDEX = -1


class Regime(str, Enum):
    """Closed-set classifier training regimes"""
    C1 = "C1"  # knowns only
    C2 = "C2"  # knowns + one aggregated unknown class


class Split(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class LabelKind(str, Enum):
    KNOWN = "known"
    UNKNOWN = "unknown"


class SceneLabel(BaseModel):
    """Scene label with its known/unknown designation"""
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., description="Scene label as written in the manifest")
    kind: LabelKind
    index: int = Field(UNKNOWN_INDEX, description="Known-class index, -1 for unknown")

    @model_validator(mode="after")
    def _index_matches_kind(self):
        if self.kind == LabelKind.KNOWN and self.index < 0:
            raise ValueError(f"known label {self.name!r} needs a non-negative index")
        if self.kind == LabelKind.UNKNOWN and self.index != UNKNOWN_INDEX:
            raise ValueError(f"unknown label {self.name!r} must use index {UNKNOWN_INDEX}")
        return self

    @property
    def is_known(self) -> bool:
        return self.kind == LabelKind.KNOWN


class LabelSchema(BaseModel):
    """Maps scene names onto known indices; every other name is the unknown class"""
    model_config = ConfigDict(frozen=True)

    known_classes: Tuple[str, ...]
    unknown_name: str = "unknown"

    @field_validator("known_classes")
    @classmethod
    def _unique_known(cls, value):
        if len(value) == 0:
            raise ValueError("at least one known class is required")
        if len(set(value)) != len(value):
            raise ValueError("known class names must be unique")
        return value

    @property
    def n_known(self) -> int:
        return len(self.known_classes)

    def label_for(self, name: str) -> SceneLabel:
        """Resolve a manifest label string"""
        if name in self.known_classes:
            return SceneLabel(name=name, kind=LabelKind.KNOWN, index=self.known_classes.index(name))
        return SceneLabel(name=self.unknown_name, kind=LabelKind.UNKNOWN)

    def index_of(self, name: str) -> int:
        return self.label_for(name).index

    def name_of(self, index: int) -> str:
        if index == UNKNOWN_INDEX:
            return self.unknown_name
        return self.known_classes[index]

    def output_width(self, regime: Regime) -> int:
        """Classifier output width: K for C1, K+1 for C2"""
        return self.n_known + (1 if Regime(regime) == Regime.C2 else 0)

    def class_names(self) -> List[str]:
        """Known names followed by the unknown name, in index order"""
        return list(self.known_classes) + [self.unknown_name]


class ManifestEntry(BaseModel):
    """Single clip in a dataset manifest"""
    model_config = ConfigDict(frozen=True)

    path: str = Field(..., description="Clip path relative to the dataset root")
    label: str = Field(..., description="Scene label string")
    split: Split = Split.TRAIN


class DatasetManifest(BaseModel):
    """Immutable list of clips with their split assignment"""
    model_config = ConfigDict(frozen=True)

    entries: Tuple[ManifestEntry, ...] = ()

    def __len__(self) -> int:
        return len(self.entries)

    def by_split(self, split: Split) -> List[ManifestEntry]:
        return [entry for entry in self.entries if entry.split == Split(split)]

    def labels(self) -> List[str]:
        return sorted({entry.label for entry in self.entries})

    def class_counts(self, split: Optional[Split] = None) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for entry in self.entries:
            if split is None or entry.split == Split(split):
                counts[entry.label] = counts.get(entry.label, 0) + 1
        return counts

    def merged_with(self, other: "DatasetManifest") -> "DatasetManifest":
        paths = {entry.path for entry in self.entries}
        duplicates = [entry.path for entry in other.entries if entry.path in paths]
        if duplicates:
            raise InvalidInput(f"clip listed twice across manifests: {duplicates[0]}")
        return DatasetManifest(entries=self.entries + other.entries)


class OpenSetDecision(BaseModel):
    """Outcome shared by all back-ends: a known class index or UNKNOWN"""
    model_config = ConfigDict(frozen=True)

    known_class: Optional[int] = Field(None, description="Predicted known class, None for UNKNOWN")
    unknownness_score: float = Field(..., description="Higher means more likely unknown")

    @field_validator("unknownness_score")
    @classmethod
    def _finite_score(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("unknownness score must be finite")
        return value

    @classmethod
    def known(cls, index: int, score: float) -> "OpenSetDecision":
        return cls(known_class=int(index), unknownness_score=float(score))

    @classmethod
    def unknown(cls, score: float) -> "OpenSetDecision":
        return cls(known_class=None, unknownness_score=float(score))

    @property
    def is_unknown(self) -> bool:
        return self.known_class is None

    @property
    def predicted_label(self) -> int:
        """Dataset-level label index (UNKNOWN_INDEX for unknown)"""
        return UNKNOWN_INDEX if self.known_class is None else self.known_class
