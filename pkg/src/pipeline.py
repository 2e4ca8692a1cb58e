"""
Stage orchestration behind the command line.

    generate -> featurize -> train-classifier -> fit-openmax -> evaluate
                          -> train-autoencoder ----------------^

Each stage reads the artifacts of the stages before it, checks their
fingerprints against the current config and writes its own fingerprinted
artifacts. Classifier-derived artifacts are keyed by regime so C1 and C2
runs share one feature cache and one autoencoder.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

from src.artifacts import check_fingerprint, read_table, write_table
from src.c2ae import C2aeDetector, c2ae_decide, c2ae_decide_batch, train_c2ae, write_reconstruction_errors
from src.classifier import (ClassifierConfig, closed_set_accuracy, predict, predict_batch, read_logit_records,
                            train_classifier, write_logit_records)
from src.config import PipelineConfig
from src.data_generator import DataGenerator
from src.dataio import load_wav, read_manifest, stratified_split
from src.errors import EmptyDataset, InputError, InvalidConfig, MissingArtifact
from src.evaluation import (EvaluationReport, OpenSetEvaluator, compare_reports, write_decisions,
                            write_report)
from src.features import (FeatureExtractor, LabeledDataset, fit_standardization, load_feature_matrix,
                          load_stats, save_feature_matrix, save_stats, standardize)
from src.openmax import fit_openmax, load_openmax, openmax_decide, save_openmax
from src.openmax import decide_batch as openmax_decide_batch
from src.schema import DatasetManifest, OpenSetDecision, Regime, Split
from src.tensor_nn import NetworkModel, load_checkpoint, save_checkpoint, write_training_log
from src.thresholding import ThresholdPolicy, sweep, threshold_decide

BACKENDS = ("threshold", "openmax", "c2ae")


def clip_id(path: str) -> str:
    """Cache key for a manifest path: directories joined by '__', extension dropped"""
    return Path(path).with_suffix("").as_posix().replace("/", "__")


@dataclass
class FeaturizeResult:
    n_clips: int
    n_train: int
    n_validation: int
    n_test: int
    stats_path: Path


class Pipeline:
    """Runs the toolkit stages for one validated PipelineConfig"""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.schema = config.data.label_schema()
        self.regime = config.run.regime
        self.logger = logging.getLogger(__name__)

        paths = config.paths
        self.dataset_root = Path(paths.dataset_root)
        self.cache_dir = paths.resolve("cache_dir")
        self.checkpoint_dir = paths.resolve("checkpoint_dir")
        self.output_dir = paths.resolve("output_dir") / self.regime.value

    # artifact locations
    @property
    def features_dir(self) -> Path:
        return self.cache_dir / "features"

    @property
    def stats_path(self) -> Path:
        return self.cache_dir / "standardization.ssna"

    @property
    def split_path(self) -> Path:
        return self.cache_dir / "split.tsv"

    def classifier_path(self, suffix: str = "ssna") -> Path:
        return self.checkpoint_dir / f"classifier_{self.regime.value}.{suffix}"

    def autoencoder_path(self, suffix: str = "ssna") -> Path:
        return self.checkpoint_dir / f"autoencoder.{suffix}"

    @property
    def train_logits_path(self) -> Path:
        return self.checkpoint_dir / f"train_logits_{self.regime.value}.tsv"

    @property
    def openmax_path(self) -> Path:
        return self.checkpoint_dir / f"openmax_{self.regime.value}.tsv"

    # generate
    def generate(self) -> DatasetManifest:
        data = self.config.data
        generator = DataGenerator(seed=self.config.run.seed, sample_rate=self.config.features.sample_rate,
                                  clip_duration=data.clip_duration, recipes=self.config.synthetic or None)
        missing = set(data.known_classes) - set(generator.known_classes)
        if missing:
            raise InvalidConfig(f"known classes without a synthetic recipe: {sorted(missing)}")
        train, test = generator.generate_dataset(self.dataset_root, data.clips_per_class, data.test_fraction)
        return train.merged_with(test)

    # featurize
    def _manifest(self) -> DatasetManifest:
        manifest = read_manifest(self.config.paths.resolve("manifest"), Split.TRAIN)
        test_manifest = self.config.paths.test_manifest
        if test_manifest:
            manifest = manifest.merged_with(read_manifest(self.config.paths.resolve("test_manifest"), Split.TEST))
        return manifest

    def featurize(self) -> FeaturizeResult:
        """Cache one raw matrix per clip, then fit standardization on the training split"""
        fingerprint = self.config.features_fingerprint()
        manifest = stratified_split(self._manifest(), self.config.data.tuning_fraction, self.config.run.seed,
                                    classes=self.config.data.known_classes)
        extractor = FeatureExtractor(self.config.features)

        self.logger.info(f"Extracting features for {len(manifest)} clips into {self.features_dir}")
        training_matrices = []
        for entry in manifest.entries:
            try:
                matrix = extractor.extract(load_wav(self.dataset_root / entry.path))
            except InputError as e:
                self.logger.error(f"Cannot featurize {entry.path}: {e}")
                raise
            path = save_feature_matrix(self.features_dir / f"{clip_id(entry.path)}.ssna", matrix, fingerprint)
            if entry.split == Split.TRAIN:
                # fit on what consumers will read back from the float32 cache
                training_matrices.append(load_feature_matrix(path))

        stats = fit_standardization(training_matrices, self.config.features.std_floor, fingerprint)
        save_stats(self.stats_path, stats)
        table = pd.DataFrame({
            "id": [clip_id(entry.path) for entry in manifest.entries],
            "filename": [entry.path for entry in manifest.entries],
            "scene_label": [entry.label for entry in manifest.entries],
            "split": [entry.split.value for entry in manifest.entries],
        })
        write_table(self.split_path, table, fingerprint)

        counts = {split: len(manifest.by_split(split)) for split in Split}
        self.logger.info(f"Featurized {len(manifest)} clips: {counts[Split.TRAIN]} train / "
                         f"{counts[Split.VALIDATION]} validation / {counts[Split.TEST]} test")
        return FeaturizeResult(n_clips=len(manifest), n_train=counts[Split.TRAIN],
                               n_validation=counts[Split.VALIDATION], n_test=counts[Split.TEST],
                               stats_path=self.stats_path)

    def load_split(self, split: Split) -> LabeledDataset:
        """Standardized features of one split, labels mapped through the label schema"""
        fingerprint = self.config.features_fingerprint()
        table, header = read_table(self.split_path)
        check_fingerprint(header["fingerprint"], fingerprint, f"split table {self.split_path}")
        stats = load_stats(self.stats_path, fingerprint)

        rows = table[table["split"] == Split(split).value]
        if rows.empty:
            raise EmptyDataset(f"the {Split(split).value} split is empty")
        matrices = [standardize(load_feature_matrix(self.features_dir / f"{row.id}.ssna", fingerprint), stats)
                    for row in rows.itertuples(index=False)]
        labels = [self.schema.index_of(label) for label in rows["scene_label"]]
        return LabeledDataset.from_matrices(list(rows["id"]), matrices, labels)

    # training
    def train_classifier(self):
        fingerprint = self.config.classifier_fingerprint()
        train_set = self.load_split(Split.TRAIN)
        validation_set = self.load_split(Split.VALIDATION)
        if self.regime == Regime.C1:
            train_set, validation_set = train_set.known_only(), validation_set.known_only()

        config = ClassifierConfig(n_known=self.schema.n_known, regime=self.regime,
                                  training=self.config.training, seed=self.config.run.seed)
        trained = train_classifier(config, train_set, validation_set)
        save_checkpoint(self.classifier_path(), trained.model, fingerprint,
                        meta={"regime": self.regime.value, "best_epoch": trained.result.best_epoch,
                              "stats_fingerprint": train_set.stats_fingerprint})
        write_training_log(self.classifier_path("log"), trained.result.history, fingerprint)
        write_logit_records(self.train_logits_path, trained.records, fingerprint, self.regime)
        self.logger.info(f"Classifier checkpoint written to {self.classifier_path()}")
        return trained

    def train_autoencoder(self):
        fingerprint = self.config.autoencoder_fingerprint()
        train_set = self.load_split(Split.TRAIN).known_only()
        validation_set = self.load_split(Split.VALIDATION).known_only()

        trained = train_c2ae(train_set, validation_set, self.schema.n_known, self.config.c2ae,
                             self.config.training, self.config.run.seed)
        save_checkpoint(self.autoencoder_path(), trained.model, fingerprint,
                        meta={"n_known": self.schema.n_known, "best_epoch": trained.result.best_epoch,
                              "stats_fingerprint": train_set.stats_fingerprint})
        write_training_log(self.autoencoder_path("log"), trained.result.history, fingerprint)
        self.logger.info(f"Autoencoder checkpoint written to {self.autoencoder_path()}")
        return trained

    def fit_openmax(self):
        records, regime = read_logit_records(self.train_logits_path, self.config.classifier_fingerprint())
        model = fit_openmax(records, self.config.openmax, regime)
        save_openmax(self.openmax_path, model, self.config.openmax_fingerprint())
        self.logger.info(f"Openmax model written to {self.openmax_path}")
        return model

    # decisions
    def _classifier(self) -> NetworkModel:
        model, _ = load_checkpoint(self.classifier_path(), self.config.classifier_fingerprint())
        return model

    def _detector(self) -> C2aeDetector:
        model, meta = load_checkpoint(self.autoencoder_path(), self.config.autoencoder_fingerprint())
        return C2aeDetector(model=model, n_known=self.schema.n_known, threshold=self.config.c2ae.threshold,
                            stats_fingerprint=meta.get("stats_fingerprint"), regime=self.regime)

    def evaluate(self, backend: str = "all") -> List[EvaluationReport]:
        """Decide every test clip with the chosen back-end(s) and write reports"""
        backends = BACKENDS if backend == "all" else (backend,)
        unknown_backends = set(backends) - set(BACKENDS)
        if unknown_backends:
            raise InvalidConfig(f"unknown back-end {sorted(unknown_backends)}; choose from {BACKENDS} or 'all'")

        test_set = self.load_split(Split.TEST)
        batch_size = self.config.training.eval_batch_size
        records = predict_batch(self._classifier(), test_set, batch_size)
        closed = closed_set_accuracy(records)
        fingerprint = self.config.fingerprint()
        write_logit_records(self.output_dir / "test_logits.tsv", records, fingerprint, self.regime)
        self.logger.info(f"Closed-set accuracy on known test clips: {closed:.3f}")

        decisions: Dict[str, List[OpenSetDecision]] = {}
        if "threshold" in backends:
            for epsilon, batch in sweep(records, self.config.threshold.epsilons, self.regime).items():
                decisions[f"eps{epsilon:g}"] = batch
        if "openmax" in backends:
            model = load_openmax(self.openmax_path, self.config.openmax_fingerprint())
            results = openmax_decide_batch(records, model, self.config.openmax.uncertainty_eps)
            decisions["openmax"] = [result.decision for result in results]
        if "c2ae" in backends:
            results = c2ae_decide_batch(records, test_set, self._detector(), batch_size)
            write_reconstruction_errors(self.output_dir / "reconstruction_errors.tsv", records, results, fingerprint)
            decisions["c2ae"] = [result.decision for result in results]

        evaluator = OpenSetEvaluator(self.schema, self.config.evaluation.histogram_bins)
        true_labels = [record.true_label for record in records]
        reports = []
        for name, batch in decisions.items():
            backend_name, setting = ("threshold", name) if name.startswith("eps") else (name, "")
            report = evaluator.evaluate(backend_name, batch, true_labels, self.regime, setting, closed)
            write_report(report, self.output_dir, fingerprint)
            write_decisions(self.output_dir / f"decisions_{report.name}.tsv", test_set.ids, true_labels,
                            batch, fingerprint)
            reports.append(report)

        write_table(self.output_dir / f"comparison_{backend}.tsv", compare_reports(reports), fingerprint,
                    header={"regime": self.regime.value})
        return reports

    def infer(self, clip_paths: Sequence[str], backend: str = "c2ae",
              epsilon: Optional[float] = None) -> pd.DataFrame:
        """Decisions for standalone WAV files with the trained artifacts"""
        if backend not in BACKENDS:
            raise InvalidConfig(f"unknown back-end {backend!r}; choose from {BACKENDS}")
        if not clip_paths:
            raise EmptyDataset("no clips to classify")
        stats = load_stats(self.stats_path, self.config.features_fingerprint())
        extractor = FeatureExtractor(self.config.features)
        classifier = self._classifier()

        if backend == "threshold":
            policy = ThresholdPolicy(epsilon=epsilon if epsilon is not None else self.config.threshold.epsilons[0],
                                     regime=self.regime)
        elif backend == "openmax":
            openmax = load_openmax(self.openmax_path, self.config.openmax_fingerprint())
        else:
            detector = self._detector()

        rows = []
        for path in clip_paths:
            if not Path(path).is_file():
                raise MissingArtifact(f"clip not found: {path}")
            matrix = standardize(extractor.extract(load_wav(path)), stats)
            record = predict(classifier, matrix, example_id=clip_id(str(path)))
            if backend == "threshold":
                decision = threshold_decide(record, policy)
            elif backend == "openmax":
                decision = openmax_decide(record, openmax, self.config.openmax.uncertainty_eps).decision
            else:
                decision = c2ae_decide(record, matrix, detector)
            rows.append({"path": str(path), "backend": backend,
                         "decision": self.schema.name_of(decision.predicted_label),
                         "unknownness_score": decision.unknownness_score})
            self.logger.debug(f"{path}: {rows[-1]['decision']} ({decision.unknownness_score:.4f})")
        return pd.DataFrame(rows)
