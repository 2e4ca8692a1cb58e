import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
import soundfile as sf

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.data_generator import DataGenerator, SyntheticClassSpec, generate_synthetic_scene
from src.dataio import AudioClip, load_wav, read_manifest, stratified_split, write_manifest, write_wav
from src.errors import CorruptFile, EmptyClass, InvalidInput, InvalidParameter, UnsupportedFormat
from src.features import FeatureConfig, FeatureExtractor
from src.schema import DatasetManifest, ManifestEntry, Split


def manifest_of(counts, split=Split.TRAIN):
    entries = [ManifestEntry(path=f"audio/{label}-{i}.wav", label=label, split=split)
               for label, n in counts.items() for i in range(n)]
    return DatasetManifest(entries=tuple(entries))


class TestWavIO(unittest.TestCase):
    """PCM WAV reading and writing"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_silence(self):
        """1 s of digital silence at 48 kHz reads back as 48000 zeros"""
        path = write_wav(self.root / "silence.wav", AudioClip(samples=np.zeros(48000), sample_rate=48000))
        clip = load_wav(path)
        self.assertEqual(len(clip), 48000)
        self.assertEqual(clip.sample_rate, 48000)
        self.assertTrue(np.all(clip.samples == 0.0))
        self.assertAlmostEqual(clip.duration, 1.0)

    def test_full_scale_sample(self):
        """PCM-16 value 32767 reads as 32767/32768"""
        path = self.root / "full.wav"
        sf.write(str(path), np.array([32767, 0, -32768], dtype=np.int16), 16000, subtype="PCM_16")
        clip = load_wav(path)
        np.testing.assert_array_equal(clip.samples, [32767 / 32768, 0.0, -1.0])

    def test_round_trip_within_one_lsb(self):
        rng = np.random.default_rng(3)
        original = AudioClip(samples=rng.uniform(-0.99, 0.99, 4000), sample_rate=16000)
        clip = load_wav(write_wav(self.root / "noise.wav", original))
        self.assertLessEqual(np.max(np.abs(clip.samples - original.samples)), 1.0 / 32768)

    def test_stereo_rejected(self):
        path = self.root / "stereo.wav"
        sf.write(str(path), np.zeros((100, 2), dtype=np.int16), 16000, subtype="PCM_16")
        with self.assertRaises(UnsupportedFormat):
            load_wav(path)

    def test_truncated_header(self):
        path = self.root / "broken.wav"
        path.write_bytes(b"RIFF\x10\x00")
        with self.assertRaises(CorruptFile):
            load_wav(path)

    def test_missing_file(self):
        with self.assertRaises(InvalidInput):
            load_wav(self.root / "nope.wav")

    def test_clip_invariants(self):
        with self.assertRaises(UnsupportedFormat):
            AudioClip(samples=np.zeros((10, 2)), sample_rate=16000)
        with self.assertRaises(InvalidParameter):
            AudioClip(samples=np.array([0.5, 1.5]), sample_rate=16000)


class TestManifest(unittest.TestCase):
    """DCASE-style meta files"""

    def test_round_trip(self):
        manifest = manifest_of({"park": 2, "tram": 1})
        with tempfile.TemporaryDirectory() as tmp:
            path = write_manifest(Path(tmp) / "meta.tsv", manifest)
            self.assertEqual(read_manifest(path), manifest)

    def test_headerless_file(self):
        """Two-column files without a header take the split argument"""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "fold1_evaluate.csv"
            path.write_text("audio/a.wav\tpark\naudio/b.wav\ttram\n")
            manifest = read_manifest(path, Split.TEST)
        self.assertEqual([entry.label for entry in manifest.entries], ["park", "tram"])
        self.assertTrue(all(entry.split == Split.TEST for entry in manifest.entries))


class TestStratifiedSplit(unittest.TestCase):
    """Class-stratified tuning split"""

    def test_ten_percent_per_class(self):
        manifest = manifest_of({"a": 100, "b": 100, "c": 100}).merged_with(
            DatasetManifest(entries=(ManifestEntry(path="test/x.wav", label="a", split=Split.TEST),)))
        split = stratified_split(manifest, 0.1, seed=1)
        self.assertEqual(split.class_counts(Split.VALIDATION), {"a": 10, "b": 10, "c": 10})
        self.assertEqual(split.class_counts(Split.TEST), {"a": 1})
        self.assertEqual(len(split), len(manifest))

    def test_stratification_bound(self):
        counts = {"a": 37, "b": 12, "c": 5, "d": 61}
        split = stratified_split(manifest_of(counts), 0.1, seed=4)
        validation = split.class_counts(Split.VALIDATION)
        for label, n in counts.items():
            self.assertLessEqual(abs(validation.get(label, 0) - 0.1 * n), 1.0)

    def test_singleton_class(self):
        """A one-clip class gives 0 or 1 validation clips; the global total is kept"""
        split = stratified_split(manifest_of({"a": 100, "b": 1}), 0.1, seed=0)
        validation = split.class_counts(Split.VALIDATION)
        self.assertIn(validation.get("b", 0), (0, 1))
        self.assertEqual(sum(validation.values()), 10)

    def test_deterministic(self):
        manifest = manifest_of({"a": 30, "b": 30})
        self.assertEqual(stratified_split(manifest, 0.2, seed=9), stratified_split(manifest, 0.2, seed=9))

    def test_repeat_split_is_stable(self):
        """Splitting an already split manifest gives the same assignment"""
        once = stratified_split(manifest_of({"a": 30, "b": 30}), 0.2, seed=9)
        self.assertEqual(stratified_split(once, 0.2, seed=9), once)

    def test_empty_class(self):
        with self.assertRaises(EmptyClass):
            stratified_split(manifest_of({"a": 10}), 0.1, seed=0, classes=["a", "b"])

    def test_bad_fraction(self):
        with self.assertRaises(InvalidParameter):
            stratified_split(manifest_of({"a": 10}), 1.0, seed=0)


class TestSyntheticScenes(unittest.TestCase):
    """Recipe-driven synthetic clips"""

    def setUp(self):
        self.config = FeatureConfig(sample_rate=16000, window_size=512, hop=256, n_mels=32)
        self.extractor = FeatureExtractor(self.config)
        self.tone = SyntheticClassSpec(name="tone-440", tones="440:1.0", noise_floor=0.02)

    def test_tone_peaks_at_its_mel_bin(self):
        """The mel profile peaks in the filter that weighs the direct-DFT peak bin most"""
        clip = generate_synthetic_scene(self.tone, seed=11)
        n = self.config.window_size
        frame = clip.samples[4000:4000 + n] * np.hanning(n + 1)[:n]
        k = np.arange(n // 2 + 1)
        dft = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n) @ frame
        peak_bin = int(np.argmax(np.abs(dft)))
        self.assertEqual(peak_bin, 14)  # 440 Hz / 31.25 Hz per bin

        expected = int(np.argmax(self.extractor.filterbank[:, peak_bin]))
        profile = self.extractor.extract(clip).values.mean(axis=0)
        self.assertEqual(int(np.argmax(profile)), expected)

    def test_seeds_vary_waveform_not_signature(self):
        first = generate_synthetic_scene(self.tone, seed=1)
        second = generate_synthetic_scene(self.tone, seed=2)
        self.assertFalse(np.allclose(first.samples, second.samples))
        profiles = [self.extractor.extract(clip).values.mean(axis=0) for clip in (first, second)]
        self.assertGreater(np.corrcoef(profiles)[0, 1], 0.9)

    def test_silence_class(self):
        clip = generate_synthetic_scene(SyntheticClassSpec(name="silence", silence=True), seed=5)
        self.assertTrue(np.all(clip.samples == 0.0))
        self.assertEqual(len(clip), 16000)

    def test_peak_level(self):
        clip = generate_synthetic_scene(SyntheticClassSpec(name="hiss", bands="4000-7000:1.0"), seed=3)
        self.assertLessEqual(np.max(np.abs(clip.samples)), 0.6 + 1e-12)

    def test_recipe_parsing(self):
        spec = SyntheticClassSpec(name="mix", tones="1000:0.6, 2000:0.3", bands="800-1500:0.2")
        self.assertEqual(spec.tones, [(1000.0, 0.6), (2000.0, 0.3)])
        self.assertEqual(spec.bands, [(800.0, 1500.0, 0.2)])
        with self.assertRaises(ValueError):
            SyntheticClassSpec(name="bad", bands="900-100:1.0")


class TestDataGenerator(unittest.TestCase):
    """Synthetic dataset on disk"""

    def test_generate_dataset(self):
        generator = DataGenerator(seed=3, clip_duration=0.25)
        with tempfile.TemporaryDirectory() as tmp:
            train, test = generator.generate_dataset(tmp, clips_per_class=8, test_fraction=0.25)
            self.assertEqual(len(train), 6 * 6)
            self.assertEqual(len(test), 6 * 2)
            self.assertEqual(read_manifest(Path(tmp) / "meta_test.tsv"), test)
            clip = load_wav(Path(tmp) / test.entries[0].path)
            self.assertEqual(len(clip), 4000)
        self.assertEqual(generator.known_classes, ["tone-440", "low-rumble", "mid-hum", "high-hiss"])
        self.assertEqual(generator.summary()["bird-chirp"], "unknown")

    def test_clips_are_reproducible(self):
        recipe = DataGenerator().recipes[0]
        first = DataGenerator(seed=5).generate_clips(recipe, 0, 2)
        second = DataGenerator(seed=5).generate_clips(recipe, 0, 2)
        np.testing.assert_array_equal(first[1].samples, second[1].samples)


if __name__ == '__main__':
    unittest.main()
