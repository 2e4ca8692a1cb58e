import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from scipy import signal

from src.dataio import AudioClip, write_manifest, write_wav
from src.schema import DatasetManifest, ManifestEntry, Split

logger = logging.getLogger(__name__)

# Peak level of a generated clip before per-clip gain jitter
TARGET_PEAK = 0.5


def _parse_pairs(value, arity: int):
    """'440:0.5, 880:0.2' or '100-400:0.3' -> list of tuples"""
    if not isinstance(value, str):
        return value
    parsed = []
    for item in value.split(","):
        item = item.strip()
        if not item:
            continue
        where, _, amplitude = item.partition(":")
        numbers = [float(x) for x in where.split("-")] if arity == 3 else [float(where)]
        parsed.append(tuple(numbers + [float(amplitude or 1.0)]))
    return parsed


class SyntheticClassSpec(BaseModel):
    """Noise + tone recipe for one synthetic scene class"""
    name: str
    known: bool = True
    tones: List[Tuple[float, float]] = Field(default_factory=list, description="(frequency Hz, amplitude)")
    bands: List[Tuple[float, float, float]] = Field(default_factory=list, description="(low Hz, high Hz, amplitude)")
    am_rate: float = Field(0.0, ge=0.0, description="Amplitude-modulation rate in Hz")
    am_depth: float = Field(0.0, ge=0.0, le=1.0)
    noise_floor: float = Field(0.0, ge=0.0, description="White-noise amplitude")
    silence: bool = False

    @field_validator("tones", mode="before")
    @classmethod
    def _parse_tones(cls, value):
        return _parse_pairs(value, arity=2)

    @field_validator("bands", mode="before")
    @classmethod
    def _parse_bands(cls, value):
        return _parse_pairs(value, arity=3)

    @field_validator("bands")
    @classmethod
    def _ordered_bands(cls, value):
        for low, high, _ in value:
            if not 0.0 <= low < high:
                raise ValueError(f"band {low}-{high} must satisfy 0 <= low < high")
        return value

    @property
    def is_silent(self) -> bool:
        return self.silence or not (self.tones or self.bands or self.noise_floor > 0)


def _band_noise(rng: np.random.Generator, low: float, high: float, n: int, sample_rate: int) -> np.ndarray:
    """Unit-RMS white noise through a 4th-order Butterworth band"""
    nyquist = sample_rate / 2
    noise = rng.standard_normal(n)
    if low <= 0 and high >= nyquist:
        filtered = noise
    elif low <= 0:
        filtered = signal.sosfilt(signal.butter(4, high, btype="lowpass", fs=sample_rate, output="sos"), noise)
    elif high >= nyquist:
        filtered = signal.sosfilt(signal.butter(4, low, btype="highpass", fs=sample_rate, output="sos"), noise)
    else:
        sos = signal.butter(4, [low, high], btype="bandpass", fs=sample_rate, output="sos")
        filtered = signal.sosfilt(sos, noise)
    rms = np.sqrt(np.mean(filtered ** 2))
    return filtered / rms if rms > 0 else filtered


def generate_synthetic_scene(spec: SyntheticClassSpec, seed: int,
                             sample_rate: int = 16000, duration: float = 1.0) -> AudioClip:
    """Render one clip of the recipe; the seed drives phases, noise and gain jitter"""
    n = int(round(sample_rate * duration))
    if spec.is_silent:
        return AudioClip(samples=np.zeros(n), sample_rate=sample_rate)

    rng = np.random.default_rng(seed)
    t = np.arange(n) / sample_rate
    audio = np.zeros(n)
    for frequency, amplitude in spec.tones:
        audio += amplitude * rng.uniform(0.8, 1.2) * np.sin(2 * np.pi * frequency * t + rng.uniform(0, 2 * np.pi))
    for low, high, amplitude in spec.bands:
        audio += amplitude * rng.uniform(0.8, 1.2) * _band_noise(rng, low, high, n, sample_rate)
    if spec.noise_floor > 0:
        audio += spec.noise_floor * rng.standard_normal(n)
    if spec.am_depth > 0 and spec.am_rate > 0:
        phase = rng.uniform(0, 2 * np.pi)
        audio *= 1.0 - spec.am_depth * 0.5 * (1.0 + np.sin(2 * np.pi * spec.am_rate * t + phase))

    peak = np.max(np.abs(audio))
    if peak > 0:
        audio *= TARGET_PEAK * rng.uniform(0.8, 1.2) / peak
    return AudioClip(samples=audio, sample_rate=sample_rate)


class DataGenerator:
    """Writes a labeled synthetic scene dataset: WAV clips plus DCASE-style manifests"""

    def __init__(self, seed: int = 42, sample_rate: int = 16000, clip_duration: float = 1.0,
                 recipes: Optional[Sequence[SyntheticClassSpec]] = None):
        self.seed = seed
        self.sample_rate = sample_rate
        self.clip_duration = clip_duration
        self.recipes = list(recipes) if recipes else self._create_base_recipes()
        self.logger = logging.getLogger(__name__)

    @staticmethod
    def _create_base_recipes() -> List[SyntheticClassSpec]:
        """Four known and two unknown scenes with distinct spectral shapes"""
        return [
            SyntheticClassSpec(name="tone-440", tones="440:1.0", noise_floor=0.02),
            SyntheticClassSpec(name="low-rumble", bands="40-200:1.0", am_rate=0.5, am_depth=0.3),
            SyntheticClassSpec(name="mid-hum", tones="1000:0.6, 2000:0.3", bands="800-1500:0.2"),
            SyntheticClassSpec(name="high-hiss", bands="4000-7000:1.0"),
            SyntheticClassSpec(name="traffic-drone", known=False, tones="120:0.4", bands="200-800:0.8",
                               am_rate=2.0, am_depth=0.5),
            SyntheticClassSpec(name="bird-chirp", known=False, tones="3000:0.5, 3500:0.4",
                               bands="2500-4000:0.3", am_rate=8.0, am_depth=0.8),
        ]

    @property
    def known_classes(self) -> List[str]:
        return [recipe.name for recipe in self.recipes if recipe.known]

    def clip_seed(self, class_number: int, clip_number: int) -> int:
        return int(np.random.SeedSequence([self.seed, class_number, clip_number]).generate_state(1)[0])

    def generate_clips(self, recipe: SyntheticClassSpec, class_number: int, count: int) -> List[AudioClip]:
        return [
            generate_synthetic_scene(recipe, self.clip_seed(class_number, i), self.sample_rate, self.clip_duration)
            for i in range(count)
        ]

    def generate_dataset(self, root, clips_per_class: int = 200,
                         test_fraction: float = 0.25) -> Tuple[DatasetManifest, DatasetManifest]:
        """Write audio/<class>/<class>-NNNN.wav plus meta_train.tsv and meta_test.tsv under root"""
        root = Path(root)
        n_test = int(round(clips_per_class * test_fraction))
        train_entries: List[ManifestEntry] = []
        test_entries: List[ManifestEntry] = []

        for class_number, recipe in enumerate(self.recipes):
            for i, clip in enumerate(self.generate_clips(recipe, class_number, clips_per_class)):
                relative = f"audio/{recipe.name}/{recipe.name}-{i:04d}.wav"
                write_wav(root / relative, clip)
                is_test = i >= clips_per_class - n_test
                entry = ManifestEntry(path=relative, label=recipe.name,
                                      split=Split.TEST if is_test else Split.TRAIN)
                (test_entries if is_test else train_entries).append(entry)
            self.logger.info(f"Generated {clips_per_class} clips for {recipe.name} "
                             f"({'known' if recipe.known else 'unknown'})")

        train = DatasetManifest(entries=tuple(train_entries))
        test = DatasetManifest(entries=tuple(test_entries))
        write_manifest(root / "meta_train.tsv", train)
        write_manifest(root / "meta_test.tsv", test)
        self.logger.info(f"Synthetic dataset written to {root}: {len(train)} train / {len(test)} test clips")
        return train, test

    def summary(self) -> Dict[str, str]:
        return {recipe.name: "known" if recipe.known else "unknown" for recipe in self.recipes}
