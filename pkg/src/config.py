"""
Pipeline configuration: INI-style file -> validated pydantic models.

    [paths]
    dataset_root = data/synthetic
    manifest = meta_train.tsv

    [run]
    seed = 7
    regime = C1

Every stage derives a fingerprint from the sections it depends on. Artifacts
embed that fingerprint so stale caches fail fast instead of silently mixing.
"""

import configparser
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Set

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from src.c2ae import C2aeConfig
from src.data_generator import SyntheticClassSpec
from src.errors import InvalidConfig
from src.features import FeatureConfig
from src.openmax import OpenmaxConfig
from src.schema import LabelSchema, Regime
from src.tensor_nn import TrainingConfig

CACHE_DIR_ENV = "SCENE_SENSE_CACHE_DIR"

logger = logging.getLogger(__name__)


def _split_list(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class PathsConfig(BaseModel):
    """File-system locations; excluded from fingerprints"""
    dataset_root: str = "data"
    manifest: str = "meta_train.tsv"
    test_manifest: Optional[str] = "meta_test.tsv"
    cache_dir: str = "cache"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "reports"

    def resolve(self, name: str) -> Path:
        """Manifest paths are relative to the dataset root unless absolute"""
        path = Path(getattr(self, name))
        if name in ("manifest", "test_manifest") and not path.is_absolute():
            return Path(self.dataset_root) / path
        return path


class DataConfig(BaseModel):
    known_classes: List[str]
    unknown_name: str = "unknown"
    tuning_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    # synthetic dataset generation only
    clips_per_class: int = Field(200, ge=2)
    clip_duration: float = Field(1.0, gt=0.0)
    test_fraction: float = Field(0.25, gt=0.0, lt=1.0)

    @field_validator("known_classes", mode="before")
    @classmethod
    def _split_known(cls, value):
        return _split_list(value)

    def label_schema(self) -> LabelSchema:
        return LabelSchema(known_classes=tuple(self.known_classes), unknown_name=self.unknown_name)


class ThresholdConfig(BaseModel):
    epsilons: List[float] = Field(default_factory=lambda: [0.5, 0.6, 0.7])

    @field_validator("epsilons", mode="before")
    @classmethod
    def _split_eps(cls, value):
        return _split_list(value)


class EvaluationConfig(BaseModel):
    histogram_bins: int = Field(20, ge=2)


class RunConfig(BaseModel):
    seed: int
    regime: Regime = Regime.C1


class PipelineConfig(BaseModel):
    """Whole-toolkit configuration"""
    paths: PathsConfig = Field(default_factory=PathsConfig)
    data: DataConfig
    features: FeatureConfig = Field(default_factory=FeatureConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    threshold: ThresholdConfig = Field(default_factory=ThresholdConfig)
    openmax: OpenmaxConfig = Field(default_factory=OpenmaxConfig)
    c2ae: C2aeConfig = Field(default_factory=C2aeConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    run: RunConfig
    synthetic: List[SyntheticClassSpec] = Field(default_factory=list)

    def fingerprint(self, *sections: str, exclude: Optional[Mapping[str, Set[str]]] = None) -> str:
        """SHA-256 over the canonical JSON of the named sections.

        `exclude` drops decision-time keys ({section: {key, ...}}) that do not
        change what a stage produces.
        """
        if not sections:
            sections = tuple(name for name in type(self).model_fields if name != "paths")
        exclude = exclude or {}
        payload = {}
        for name in sections:
            value = _dump(getattr(self, name))
            if isinstance(value, dict):
                value = {key: val for key, val in value.items() if key not in exclude.get(name, set())}
            payload[name] = value
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    # Stage fingerprints; each folds in the stages it consumes.
    def features_fingerprint(self) -> str:
        # the seed picks the validation split; the regime does not touch features
        return _combine(self.fingerprint("data", "features"), str(self.run.seed))

    def classifier_fingerprint(self) -> str:
        return _combine(self.features_fingerprint(), self.fingerprint("training"), self.run.regime.value)

    def autoencoder_fingerprint(self) -> str:
        return _combine(self.features_fingerprint(),
                        self.fingerprint("training", "c2ae", exclude={"c2ae": {"threshold"}}))

    def openmax_fingerprint(self) -> str:
        return _combine(self.classifier_fingerprint(),
                        self.fingerprint("openmax", exclude={"openmax": {"uncertainty_eps"}}))


def _dump(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, list):
        return [_dump(item) for item in value]
    return value


def _combine(*parts: str) -> str:
    return hashlib.sha256("|".join(parts).encode("utf-8")).hexdigest()[:16]


def _clean(value: str) -> Optional[str]:
    value = value.strip()
    if value == "" or value.lower() == "none":
        return None
    return value


def parse_overrides(pairs: Iterable[str]) -> Dict[str, Dict[str, str]]:
    """Turn ["training.epochs=5", ...] into {"training": {"epochs": "5"}}"""
    overrides: Dict[str, Dict[str, str]] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        section, dot, option = key.strip().rpartition(".")
        if not sep or not dot:
            raise InvalidConfig(f"override must look like section.key=value, got {pair!r}")
        overrides.setdefault(section, {})[option] = value
    return overrides


def config_from_mapping(raw: Mapping[str, Mapping[str, Any]]) -> PipelineConfig:
    """Validate a {section: {key: value}} mapping"""
    data: Dict[str, Any] = {}
    synthetic: List[Dict[str, Any]] = []
    for section, values in raw.items():
        cleaned = {key: (_clean(val) if isinstance(val, str) else val) for key, val in values.items()}
        cleaned = {key: val for key, val in cleaned.items() if val is not None}
        if section.startswith("synthetic."):
            synthetic.append({"name": section.split(".", 1)[1], **cleaned})
        else:
            data[section] = cleaned
    if synthetic:
        data["synthetic"] = synthetic

    cache_override = os.getenv(CACHE_DIR_ENV)
    if cache_override:
        logger.info(f"Cache dir overridden by {CACHE_DIR_ENV}={cache_override}")
        data.setdefault("paths", {})["cache_dir"] = cache_override

    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise InvalidConfig(f"invalid configuration: {e}") from e


def load_config(path: str, overrides: Optional[Mapping[str, Mapping[str, str]]] = None) -> PipelineConfig:
    """Read an INI config, apply overrides and the environment, validate"""
    load_dotenv()
    if not Path(path).is_file():
        raise InvalidConfig(f"config file not found: {path}")

    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise InvalidConfig(f"cannot parse {path}: {e}") from e

    raw: Dict[str, Dict[str, Any]] = {section: dict(parser.items(section)) for section in parser.sections()}
    for section, values in (overrides or {}).items():
        raw.setdefault(section, {}).update(values)
    return config_from_mapping(raw)
