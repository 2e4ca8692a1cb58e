"""
Log-mel feature pipeline: STFT power -> mel projection -> log -> per-bin standardization.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import librosa
import numpy as np
from pydantic import BaseModel, Field

from src.artifacts import check_fingerprint, read_container, write_container
from src.dataio import AudioClip
from src.errors import EmptyDataset, InvalidInput, InvalidParameter, PipelineMismatch
from src.schema import UNKNOWN_INDEX

logger = logging.getLogger(__name__)


class FeatureConfig(BaseModel):
    """STFT / mel parameters; defaults follow the 48 kHz, 2048/512, 256-mel setup"""
    sample_rate: int = Field(48000, gt=0)
    window_size: int = Field(2048, gt=0)
    hop: int = Field(512, gt=0)
    n_mels: int = Field(256, gt=0)
    log_floor: float = Field(1e-10, gt=0.0)
    std_floor: float = Field(1e-8, gt=0.0)
    window: str = "hann"
    center: bool = True
    pad_mode: str = "reflect"

    def n_frames(self, n_samples: int) -> int:
        """Frame count for a clip of n_samples"""
        if self.center:
            return 1 + n_samples // self.hop
        return 1 + (n_samples - self.window_size) // self.hop


@dataclass(frozen=True)
class FeatureMatrix:
    """time frames x mel bins"""
    values: np.ndarray
    standardized_with: Optional[str] = None  # stats fingerprint, None while raw

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise InvalidParameter(f"feature matrix must be 2-D, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidParameter("feature matrix has non-finite entries")
        object.__setattr__(self, "values", values)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]

    @property
    def is_standardized(self) -> bool:
        return self.standardized_with is not None


@dataclass(frozen=True)
class StandardizationStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-8
    fingerprint: str = ""

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or mean.ndim != 1:
            raise InvalidParameter(f"mean {mean.shape} and std {std.shape} must be equal-length vectors")
        if np.any(std < self.epsilon):
            raise InvalidParameter("std entries must be >= epsilon")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def n_mels(self) -> int:
        return self.mean.size


def stft_power(clip: Union[AudioClip, np.ndarray], window_size: int = 2048, hop: int = 512,
               window: Union[str, np.ndarray] = "hann", center: bool = True,
               pad_mode: str = "reflect") -> np.ndarray:
    """Squared-magnitude STFT, frames x (window_size // 2 + 1)"""
    if hop <= 0:
        raise InvalidParameter(f"hop must be positive, got {hop}")
    if window_size <= 0:
        raise InvalidParameter(f"window size must be positive, got {window_size}")
    samples = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    min_length = window_size // 2 + 1 if center else window_size
    if samples.size < min_length:
        raise InvalidParameter(f"clip of {samples.size} samples is shorter than the window ({window_size})")

    spectrum = librosa.stft(samples, n_fft=window_size, hop_length=hop, win_length=window_size,
                            window=window, center=center, pad_mode=pad_mode)
    return (np.abs(spectrum) ** 2).T


def mel_filterbank(sample_rate: int, window_size: int, n_mels: int) -> np.ndarray:
    """HTK-scale triangles spanning 0..Nyquist, peak 1; shape (n_mels, bins)"""
    n_bins = window_size // 2 + 1
    if n_mels > n_bins:
        raise InvalidParameter(f"n_mels={n_mels} exceeds the {n_bins} FFT bins")
    return librosa.filters.mel(sr=sample_rate, n_fft=window_size, n_mels=n_mels, fmin=0.0,
                               fmax=sample_rate / 2.0, htk=True, norm=None, dtype=np.float64)


def mel_project_log(spectrogram: np.ndarray, n_mels: int = 256, sample_rate: int = 48000,
                    log_floor: float = 1e-10, filterbank: Optional[np.ndarray] = None) -> FeatureMatrix:
    """log(mel energy + floor)"""
    spectrogram = np.asarray(spectrogram, dtype=np.float64)
    n_bins = spectrogram.shape[1]
    if filterbank is None:
        filterbank = mel_filterbank(sample_rate, 2 * (n_bins - 1), n_mels)
    if filterbank.shape != (n_mels, n_bins):
        raise InvalidParameter(f"filterbank {filterbank.shape} does not match {n_mels} mels x {n_bins} bins")
    return FeatureMatrix(values=np.log(spectrogram @ filterbank.T + log_floor))


def fit_standardization(matrices: Iterable[FeatureMatrix], epsilon: float = 1e-8,
                        fingerprint: str = "") -> StandardizationStats:
    """Population mean/std per mel bin pooled over every frame of every matrix"""
    count = 0
    mean = m2 = low = high = None
    for matrix in matrices:
        values = matrix.values
        if mean is None:
            mean = np.zeros(values.shape[1])
            m2 = np.zeros(values.shape[1])
            low = np.full(values.shape[1], np.inf)
            high = np.full(values.shape[1], -np.inf)
        elif values.shape[1] != mean.size:
            raise InvalidParameter(f"mixed n_mels: {values.shape[1]} vs {mean.size}")
        # Chan et al. pairwise combination of (count, mean, M2)
        n_b = values.shape[0]
        mean_b = values.mean(axis=0)
        m2_b = ((values - mean_b) ** 2).sum(axis=0)
        delta = mean_b - mean
        total = count + n_b
        mean = mean + delta * (n_b / total)
        m2 = m2 + m2_b + delta ** 2 * (count * n_b / total)
        count = total
        low = np.minimum(low, values.min(axis=0))
        high = np.maximum(high, values.max(axis=0))

    if mean is None or count == 0:
        raise EmptyDataset("cannot fit standardization on an empty training set")
    constant = low == high
    mean = np.where(constant, low, mean)
    std = np.where(constant, epsilon, np.maximum(np.sqrt(m2 / count), epsilon))
    if np.any(constant):
        logger.warning(f"{int(constant.sum())} mel bins are constant over the training set; std floored")
    return StandardizationStats(mean=mean, std=std, epsilon=epsilon, fingerprint=fingerprint)


def standardize(matrix: FeatureMatrix, stats: StandardizationStats) -> FeatureMatrix:
    if matrix.n_mels != stats.n_mels:
        raise InvalidParameter(f"matrix has {matrix.n_mels} mels, stats have {stats.n_mels}")
    return FeatureMatrix(values=(matrix.values - stats.mean) / stats.std, standardized_with=stats.fingerprint)


class FeatureExtractor:
    """Raw log-mel extraction for one FeatureConfig"""

    def __init__(self, config: FeatureConfig):
        self.config = config
        self.logger = logging.getLogger(__name__)

    @cached_property
    def filterbank(self) -> np.ndarray:
        return mel_filterbank(self.config.sample_rate, self.config.window_size, self.config.n_mels)

    def extract(self, clip: AudioClip) -> FeatureMatrix:
        cfg = self.config
        if clip.sample_rate != cfg.sample_rate:
            raise InvalidInput(f"clip sample rate {clip.sample_rate} Hz differs from the configured {cfg.sample_rate} Hz")
        power = stft_power(clip, cfg.window_size, cfg.hop, cfg.window, cfg.center, cfg.pad_mode)
        return mel_project_log(power, cfg.n_mels, cfg.sample_rate, cfg.log_floor, filterbank=self.filterbank)


def save_feature_matrix(path, matrix: FeatureMatrix, fingerprint: str) -> Path:
    """Raw matrices are cached as little-endian float32"""
    return write_container(path, {"values": matrix.values}, fingerprint, meta={"kind": "features"}, dtype="<f4")


def load_feature_matrix(path, expected_fingerprint: Optional[str] = None) -> FeatureMatrix:
    container = read_container(path)
    if expected_fingerprint is not None:
        check_fingerprint(container.fingerprint, expected_fingerprint, f"feature cache {path}")
    return FeatureMatrix(values=container.arrays["values"].astype(np.float64))


def save_stats(path, stats: StandardizationStats) -> Path:
    return write_container(path, {"mean": stats.mean, "std": stats.std}, stats.fingerprint,
                           meta={"kind": "standardization", "epsilon": stats.epsilon})


def load_stats(path, expected_fingerprint: Optional[str] = None) -> StandardizationStats:
    container = read_container(path)
    if expected_fingerprint is not None:
        check_fingerprint(container.fingerprint, expected_fingerprint, f"standardization stats {path}")
    return StandardizationStats(mean=container.arrays["mean"], std=container.arrays["std"],
                                epsilon=float(container.meta.get("epsilon", 1e-8)),
                                fingerprint=container.fingerprint)


@dataclass
class LabeledDataset:
    """Stacked feature matrices with dataset-level labels (known index or UNKNOWN_INDEX)"""
    ids: List[str]
    features: np.ndarray  # (N, frames, mels)
    labels: np.ndarray
    stats_fingerprint: Optional[str] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 3:
            raise InvalidInput(f"features must be (N, frames, mels), got {self.features.shape}")
        if not len(self.ids) == len(self.features) == len(self.labels):
            raise InvalidInput("ids, features and labels must have equal length")

    @classmethod
    def from_matrices(cls, ids: Sequence[str], matrices: Sequence[FeatureMatrix],
                      labels: Sequence[int]) -> "LabeledDataset":
        if not matrices:
            raise EmptyDataset("no feature matrices to stack")
        shapes = {matrix.values.shape for matrix in matrices}
        if len(shapes) != 1:
            raise InvalidInput(f"feature matrices differ in shape: {sorted(shapes)}")
        fingerprints = {matrix.standardized_with for matrix in matrices}
        if len(fingerprints) != 1:
            raise PipelineMismatch(f"feature matrices mix standardizations: {sorted(map(str, fingerprints))}")
        return cls(ids=list(ids), features=np.stack([matrix.values for matrix in matrices]),
                   labels=np.asarray(labels), stats_fingerprint=fingerprints.pop())

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def matrix_shape(self) -> Tuple[int, int]:
        return self.features.shape[1], self.features.shape[2]

    def inputs(self) -> np.ndarray:
        """Network input, (N, 1, frames, mels)"""
        return self.features[:, None, :, :]

    def matrix(self, position: int) -> FeatureMatrix:
        return FeatureMatrix(values=self.features[position], standardized_with=self.stats_fingerprint)

    def subset(self, selection) -> "LabeledDataset":
        positions = np.arange(len(self))[selection]
        return LabeledDataset(ids=[self.ids[i] for i in positions], features=self.features[positions],
                              labels=self.labels[positions], stats_fingerprint=self.stats_fingerprint)

    def known_only(self) -> "LabeledDataset":
        return self.subset(self.labels != UNKNOWN_INDEX)
