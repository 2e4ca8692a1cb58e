"""
Audio and manifest I/O plus the stratified tuning split.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import soundfile as sf

from src.errors import CorruptFile, EmptyClass, InvalidInput, InvalidParameter, UnsupportedFormat
from src.schema import DatasetManifest, ManifestEntry, Split

logger = logging.getLogger(__name__)

PCM_SUBTYPES = {"PCM_16": 16, "PCM_24": 24, "PCM_32": 32, "PCM_U8": 8}
MANIFEST_COLUMNS = ["filename", "scene_label"]


@dataclass(frozen=True)
class AudioClip:
    """Mono audio scaled to [-1, 1]"""
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise UnsupportedFormat(f"clip must be mono, got array of shape {samples.shape}")
        if samples.size == 0:
            raise InvalidInput("clip has no samples")
        if self.sample_rate <= 0:
            raise InvalidParameter(f"sample rate must be positive, got {self.sample_rate}")
        if np.max(np.abs(samples)) > 1.0:
            raise InvalidParameter("clip samples must lie in [-1, 1]")
        object.__setattr__(self, "samples", samples)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self) -> int:
        return self.samples.size


def load_wav(path) -> AudioClip:
    """Read a single-channel PCM WAV; samples are divided by 2^(bits-1)"""
    path = Path(path)
    if not path.is_file():
        raise InvalidInput(f"audio file not found: {path}")
    try:
        info = sf.info(str(path))
    except RuntimeError as e:  # libsndfile errors derive from RuntimeError
        raise CorruptFile(f"{path}: {e}") from e

    if info.format != "WAV" or info.subtype not in PCM_SUBTYPES:
        raise UnsupportedFormat(f"{path}: expected PCM WAV, got {info.format}/{info.subtype}")
    if info.channels != 1:
        raise UnsupportedFormat(f"{path}: expected 1 channel, got {info.channels}")

    try:
        samples, sample_rate = sf.read(str(path), dtype="float64", always_2d=False)
    except RuntimeError as e:
        raise CorruptFile(f"{path}: {e}") from e
    if samples.size == 0:
        raise CorruptFile(f"{path}: no audio frames")
    return AudioClip(samples=samples, sample_rate=int(sample_rate))


def write_wav(path, clip: AudioClip, bits: int = 16) -> Path:
    """Write PCM WAV, quantizing with the same 2^(bits-1) scale load_wav reads with"""
    if bits not in (16, 32):
        raise InvalidParameter(f"unsupported bit depth {bits}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    full_scale = 2 ** (bits - 1)
    dtype = np.int16 if bits == 16 else np.int32
    quantized = np.clip(np.round(clip.samples * full_scale), -full_scale, full_scale - 1).astype(dtype)
    sf.write(str(path), quantized, clip.sample_rate, subtype=f"PCM_{bits}")
    return path


def read_manifest(path, split: Split = Split.TRAIN) -> DatasetManifest:
    """Read a DCASE-style tab-separated meta file (filename, scene_label[, split])"""
    path = Path(path)
    if not path.is_file():
        raise InvalidInput(f"manifest not found: {path}")
    table = pd.read_csv(path, sep="\t", dtype=str)
    if not set(MANIFEST_COLUMNS).issubset(table.columns):
        # header-less meta file
        table = pd.read_csv(path, sep="\t", dtype=str, header=None)
        if table.shape[1] < 2:
            raise CorruptFile(f"{path}: expected at least two tab-separated columns")
        table = table.rename(columns={0: "filename", 1: "scene_label"})

    entries = []
    for row in table.itertuples(index=False):
        row_split = getattr(row, "split", None)
        entries.append(ManifestEntry(
            path=row.filename,
            label=row.scene_label,
            split=Split(row_split) if isinstance(row_split, str) else split,
        ))
    logger.info(f"Loaded {len(entries)} manifest entries from {path}")
    return DatasetManifest(entries=tuple(entries))


def write_manifest(path, manifest: DatasetManifest) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = pd.DataFrame({
        "filename": [entry.path for entry in manifest.entries],
        "scene_label": [entry.label for entry in manifest.entries],
        "split": [entry.split.value for entry in manifest.entries],
    })
    table.to_csv(path, sep="\t", index=False, lineterminator="\n")
    return path


def _validation_quota(counts: Dict[str, int], fraction: float) -> Dict[str, int]:
    """Per-class validation counts: floor of the exact share, remainders handed out
    largest-first so the overall count is round(fraction * total)"""
    exact = {label: fraction * n for label, n in counts.items()}
    quota = {label: int(np.floor(share)) for label, share in exact.items()}
    missing = int(round(fraction * sum(counts.values()))) - sum(quota.values())
    by_remainder = sorted(exact, key=lambda label: (-(exact[label] - quota[label]), label))
    for label in by_remainder[:max(missing, 0)]:
        quota[label] += 1
    return quota


def stratified_split(manifest: DatasetManifest, tuning_fraction: float, seed: int,
                     classes: Optional[Sequence[str]] = None) -> DatasetManifest:
    """Move a class-stratified fraction of the training entries to validation.

    Test entries are never touched. Entries already marked as validation are
    pooled back with training so repeated calls give the same assignment.
    """
    if not 0.0 < tuning_fraction < 1.0:
        raise InvalidParameter(f"tuning fraction must be in (0, 1), got {tuning_fraction}")

    pool: Dict[str, List[int]] = {}
    for position, entry in enumerate(manifest.entries):
        if entry.split in (Split.TRAIN, Split.VALIDATION):
            pool.setdefault(entry.label, []).append(position)

    for label in classes or []:
        if label not in pool:
            raise EmptyClass(f"class {label!r} has no training examples")
    if not pool:
        raise EmptyClass("manifest has no training examples")

    quota = _validation_quota({label: len(idx) for label, idx in pool.items()}, tuning_fraction)
    rng = np.random.default_rng(seed)
    validation = set()
    for label in sorted(pool):
        positions = pool[label]
        chosen = rng.permutation(len(positions))[:quota[label]]
        validation.update(positions[i] for i in chosen)

    entries = []
    for position, entry in enumerate(manifest.entries):
        if entry.split == Split.TEST:
            entries.append(entry)
            continue
        split = Split.VALIDATION if position in validation else Split.TRAIN
        entries.append(entry.model_copy(update={"split": split}))
    logger.info(f"Stratified split: {len(validation)} validation entries "
                f"({tuning_fraction:.0%} of {sum(len(v) for v in pool.values())})")
    return DatasetManifest(entries=tuple(entries))
