import os
import sys
import tempfile
import unittest
from pathlib import Path

import numpy as np
from scipy.stats import weibull_min

sys.path.append(os.path.join(os.path.dirname(__file__), '..'))

from src.classifier import LogitRecord
from src.errors import (DegenerateTail, DegenerateVector, InvalidConfig, InvalidInput, PipelineMismatch,
                        UnfittableClass)
from src.layers import softmax
from src.openmax import (ClassEVTModel, DivergenceConfig, OpenmaxConfig, OpenmaxModel, WeibullTail, decide_batch,
                         divergence, fit_openmax, fit_weibull_tail, load_openmax, openmax_decide, save_openmax)
from src.schema import UNKNOWN_INDEX, Regime


def clustered_records(n_per_class, width, seed=0, noise=0.3, regime=Regime.C1):
    """Logits near 5 * e_c, labelled with their class"""
    rng = np.random.default_rng(seed)
    records = []
    for c in range(width):
        label = UNKNOWN_INDEX if regime == Regime.C2 and c == width - 1 else c
        for i in range(n_per_class):
            logits = 5.0 * np.eye(width)[c] + noise * rng.normal(size=width)
            records.append(LogitRecord.from_logits(f"{c}-{i}", logits, label))
    return records


def fixed_model(means, weibull, alpha=None, regime=Regime.C1):
    classes = [ClassEVTModel(class_index=c, mean_activation=np.asarray(mu, dtype=np.float64), weibull=weibull)
               for c, mu in enumerate(means)]
    return OpenmaxModel(classes=classes, alpha=alpha or len(classes), regime=regime)


class TestDivergence(unittest.TestCase):
    """Weighted Euclidean plus cosine distance"""

    def test_identical_vectors(self):
        self.assertEqual(divergence([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]), 0.0)

    def test_hand_computed(self):
        """Orthogonal unit vectors: 5e-3 * sqrt(2) + 1"""
        self.assertAlmostEqual(divergence([1.0, 0.0], [0.0, 1.0]), 5e-3 * np.sqrt(2) + 1.0, places=12)

    def test_grows_along_a_ray(self):
        mu = np.array([3.0, 1.0, -2.0])
        values = [divergence(s * mu, mu) for s in (1.0, 1.5, 2.0, 4.0)]
        self.assertTrue(np.all(np.diff(values) > 0))

    def test_zero_vector(self):
        with self.assertRaises(DegenerateVector):
            divergence([0.0, 0.0], [1.0, 0.0])
        self.assertAlmostEqual(divergence([0.0, 0.0], [3.0, 4.0], DivergenceConfig(1.0, 0.0)), 5.0)

    def test_weights_validated(self):
        with self.assertRaises(InvalidConfig):
            DivergenceConfig(euclid_weight=0.0, cosine_weight=0.0)


class TestWeibullTail(unittest.TestCase):
    """Maximum-likelihood tail fits"""

    def test_recovers_known_parameters(self):
        for shape, scale in ((1.5, 2.0), (3.0, 0.5), (0.8, 10.0)):
            values = weibull_min.rvs(shape, scale=scale, size=5000, random_state=np.random.default_rng(11))
            fit = fit_weibull_tail(values, tail_size=5000, shift=0.0)
            self.assertAlmostEqual(fit.shape / shape, 1.0, delta=0.05)
            self.assertAlmostEqual(fit.scale / scale, 1.0, delta=0.05)

    def test_matches_scipy_fit(self):
        """Same estimate as a generic optimizer at fixed location"""
        values = weibull_min.rvs(2.2, scale=1.3, size=300, random_state=np.random.default_rng(3))
        fit = fit_weibull_tail(values, tail_size=300, shift=0.0)
        shape, _, scale = weibull_min.fit(values, floc=0.0)
        self.assertAlmostEqual(fit.shape, shape, delta=5e-3 * shape)
        self.assertAlmostEqual(fit.scale, scale, delta=5e-3 * scale)

    def test_estimate_maximizes_likelihood(self):
        values = weibull_min.rvs(1.7, scale=0.4, size=200, random_state=np.random.default_rng(5))
        fit = fit_weibull_tail(values, tail_size=200, shift=0.0)
        best = fit.log_likelihood(values)
        for factor in (0.95, 1.05):
            self.assertLess(WeibullTail(fit.shape * factor, fit.scale).log_likelihood(values), best)
            self.assertLess(WeibullTail(fit.shape, fit.scale * factor).log_likelihood(values), best)

    def test_recovers_generating_weibull_at_zero_location(self):
        """Weibull(2, 1), n=1000: shape within 2 +- 0.15, scale within 1 +- 0.05"""
        for seed in (1, 3):
            values = weibull_min.rvs(2.0, scale=1.0, size=1000, random_state=np.random.default_rng(seed))
            fit = fit_weibull_tail(values, tail_size=1000, shift=0.0)
            self.assertAlmostEqual(fit.shape, 2.0, delta=0.15)
            self.assertAlmostEqual(fit.scale, 1.0, delta=0.05)

    def test_default_location_is_tail_minimum(self):
        """Full tail: location is the sample minimum, (shape, scale) the MLE of the excess"""
        values = weibull_min.rvs(2.0, scale=1.0, size=1000, random_state=np.random.default_rng(3))
        fit = fit_weibull_tail(values, tail_size=1000)
        self.assertEqual(fit.shift, values.min())
        excess = values[values > values.min()] - values.min()
        shape, _, scale = weibull_min.fit(excess, floc=0.0)
        self.assertAlmostEqual(fit.shape, shape, delta=5e-3 * shape)
        self.assertAlmostEqual(fit.scale, scale, delta=5e-3 * scale)

    def test_beats_likelihood_grid(self):
        """No point of an 11 x 11 grid within +-20% has a higher tail log-likelihood"""
        values = weibull_min.rvs(2.0, scale=1.0, size=1000, random_state=np.random.default_rng(1))
        for shift in (None, 0.0):
            fit = fit_weibull_tail(values, tail_size=1000, shift=shift)
            kept = values[values > fit.shift]
            best = fit.log_likelihood(kept)
            for a in np.linspace(0.8, 1.2, 11):
                for b in np.linspace(0.8, 1.2, 11):
                    candidate = WeibullTail(fit.shape * a, fit.scale * b, fit.shift)
                    self.assertGreaterEqual(best, candidate.log_likelihood(kept) - 1e-9 * abs(best))

    def test_linear_ramp_tail(self):
        fit = fit_weibull_tail(np.arange(1.0, 101.0), tail_size=20)
        self.assertEqual(fit.shift, 81.0)
        self.assertEqual(fit.tail_size, 20)
        self.assertGreater(fit.cdf(100.0), fit.cdf(90.5))

    def test_tail_keeps_largest_values(self):
        values = np.concatenate([np.linspace(0.01, 0.1, 50), [0.5, 0.7, 0.8, 1.1, 1.3]])
        fit = fit_weibull_tail(values, tail_size=5)
        self.assertEqual(fit.shift, 0.5)
        self.assertEqual(fit.tail_size, 5)
        self.assertEqual(fit.cdf(0.5), 0.0)
        self.assertGreater(fit.cdf(1.3), 0.5)

    def test_cdf_monotone(self):
        fit = WeibullTail(shape=2.0, scale=1.0)
        self.assertTrue(np.all(np.diff(fit.cdf(np.linspace(0.0, 5.0, 50))) >= 0))

    def test_identical_values_fall_back(self):
        with self.assertRaises(DegenerateTail) as caught:
            fit_weibull_tail([0.2] * 10, tail_size=5)
        fallback = caught.exception.fallback
        self.assertEqual(fallback.shape, 100.0)
        self.assertEqual(fallback.scale, 0.2)
        self.assertLess(fallback.cdf(0.15), 1e-6)
        self.assertGreater(fallback.cdf(0.25), 0.99)

    def test_all_zero_values(self):
        with self.assertRaises(DegenerateTail) as caught:
            fit_weibull_tail([0.0] * 4, tail_size=4)
        self.assertEqual(caught.exception.fallback.scale, 1e-6)

    def test_short_tail(self):
        with self.assertRaises(DegenerateTail):
            fit_weibull_tail([0.1, 0.4], tail_size=20)


class TestOpenmaxDecide(unittest.TestCase):
    """Recalibration with fixed class models"""

    def setUp(self):
        self.means = 5.0 * np.eye(3)

    def test_no_penalty_limit(self):
        """All CDFs zero: Openmax is the softmax of [0, logits]"""
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1.0, shift=10.0))
        logits = np.array([2.0, 0.5, -1.0])
        result = openmax_decide(LogitRecord.from_logits("x", logits), model)
        np.testing.assert_allclose(result.probabilities, softmax(np.concatenate([[0.0], logits])), rtol=1e-12)
        self.assertEqual(result.decision.known_class, 0)
        self.assertEqual(result.closed_set_class, 0)

    def test_negative_logits_favor_unknown_slot(self):
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1.0, shift=10.0))
        result = openmax_decide(LogitRecord.from_logits("x", [-1.0, -2.0, -3.0]), model)
        self.assertTrue(result.decision.is_unknown)
        self.assertEqual(result.closed_set_class, 0)

    def test_far_probe_is_unknown(self):
        """CDF near 1 moves the top logit into the unknown slot"""
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1e-3))
        result = openmax_decide(LogitRecord.from_logits("x", [5.0, 1.0, 0.5]), model)
        self.assertTrue(result.decision.is_unknown)
        self.assertGreater(result.decision.unknownness_score, 0.9)
        unknown_logit = 5.0 + 1.0 * (2 / 3) + 0.5 * (1 / 3)
        expected = softmax(np.array([unknown_logit, 0.0, 1.0 / 3, 0.5 * 2 / 3]))
        np.testing.assert_allclose(result.probabilities, expected, rtol=1e-6)

    def test_alpha_limits_revision(self):
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1e-3), alpha=1)
        result = openmax_decide(LogitRecord.from_logits("x", [5.0, 1.0, 0.5]), model)
        expected = softmax(np.array([5.0, 0.0, 1.0, 0.5]))
        np.testing.assert_allclose(result.probabilities, expected, rtol=1e-6)

    def test_probabilities_sum_to_one(self):
        rng = np.random.default_rng(1)
        model = fixed_model(self.means, WeibullTail(shape=1.5, scale=0.3))
        for result in decide_batch([LogitRecord.from_logits(str(i), rng.normal(scale=3, size=3)) for i in range(50)],
                                   model):
            self.assertAlmostEqual(result.probabilities.sum(), 1.0)
            self.assertEqual(result.probabilities.size, 4)

    def test_c2_unknown_unit(self):
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1.0, shift=10.0), regime=Regime.C2)
        result = openmax_decide(LogitRecord.from_logits("x", [0.5, 1.0, 4.0]), model)
        self.assertTrue(result.decision.is_unknown)
        self.assertEqual(result.closed_set_class, 1)

    def test_uncertainty_threshold(self):
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1.0, shift=10.0))
        record = LogitRecord.from_logits("x", [1.0, 0.9, 0.8])
        self.assertFalse(openmax_decide(record, model).decision.is_unknown)
        self.assertTrue(openmax_decide(record, model, uncertainty_eps=0.5).decision.is_unknown)

    def test_width_mismatch(self):
        model = fixed_model(self.means, WeibullTail(shape=2.0, scale=1.0))
        with self.assertRaises(InvalidInput):
            openmax_decide(LogitRecord.from_logits("x", [1.0, 2.0]), model)


class TestFitOpenmax(unittest.TestCase):
    """Class models from training logits"""

    def test_fit_and_decide(self):
        records = clustered_records(30, 3)
        model = fit_openmax(records, OpenmaxConfig(tail_size=10))
        self.assertEqual(model.width, 3)
        self.assertEqual(model.alpha, 3)
        for c, evt in enumerate(model.classes):
            self.assertEqual(evt.n_correct, 30)
            self.assertEqual(evt.tail_size, 10)
            self.assertEqual(int(np.argmax(evt.mean_activation)), c)

        self.assertEqual(openmax_decide(LogitRecord.from_logits("k", [5.0, 0.1, -0.1]), model).decision.known_class, 0)
        far = openmax_decide(LogitRecord.from_logits("u", [5.0, 5.0, 0.0]), model)
        self.assertTrue(far.decision.is_unknown)

    def test_score_grows_along_ray(self):
        """Moving out from a class mean never lowers the unknown probability"""
        model = fit_openmax(clustered_records(30, 3), OpenmaxConfig(tail_size=10, alpha=1))
        mu = model.classes[0].mean_activation
        direction = np.array([0.0, -1.0, -1.0])
        scores = [openmax_decide(LogitRecord.from_logits(f"t{t}", mu + t * direction), model).decision.unknownness_score
                  for t in np.linspace(0.0, 20.0, 41)]
        self.assertTrue(np.all(np.diff(scores) >= -1e-12))
        self.assertLess(scores[0], 0.05)
        self.assertGreater(scores[-1], 0.9)

    def test_refit_is_deterministic(self):
        records = clustered_records(25, 3, seed=6)
        first = fit_openmax(records, OpenmaxConfig(tail_size=8))
        second = fit_openmax(records, OpenmaxConfig(tail_size=8))
        for a, b in zip(first.classes, second.classes):
            np.testing.assert_allclose(a.mean_activation, b.mean_activation, rtol=0, atol=1e-10)
            self.assertAlmostEqual(a.weibull.shape, b.weibull.shape, delta=1e-10)
            self.assertAlmostEqual(a.weibull.scale, b.weibull.scale, delta=1e-10)
            self.assertEqual(a.weibull.shift, b.weibull.shift)

    def test_in_cluster_cdf_below_half(self):
        """The median in-cluster divergence is not in the fitted tail"""
        records = clustered_records(30, 3, seed=2)
        model = fit_openmax(records, OpenmaxConfig(tail_size=10))
        for evt in model.classes:
            own = [r.logits for r in records if r.true_label == evt.class_index]
            median = np.median([divergence(v, evt.mean_activation, model.divergence) for v in own])
            self.assertLess(float(evt.weibull.cdf(median)), 0.5)

    def test_mean_of_two_examples(self):
        records = [LogitRecord.from_logits("a", [4.0, 1.0], 0), LogitRecord.from_logits("b", [6.0, 0.0], 0),
                   LogitRecord.from_logits("c", [0.0, 3.0], 1), LogitRecord.from_logits("d", [1.0, 5.0], 1)]
        with self.assertLogs("src.openmax", level="WARNING"):
            model = fit_openmax(records, OpenmaxConfig(tail_size=5))
        np.testing.assert_allclose(model.classes[0].mean_activation, [5.0, 0.5])
        np.testing.assert_allclose(model.classes[1].mean_activation, [0.5, 4.0])

    def test_misclassified_records_are_skipped(self):
        records = clustered_records(10, 2)
        records.append(LogitRecord.from_logits("wrong", [-20.0, 20.0], 0))
        model = fit_openmax(records, OpenmaxConfig(tail_size=5))
        self.assertEqual(model.classes[0].n_correct, 10)
        self.assertGreater(model.classes[0].mean_activation[0], 4.0)

    def test_unfittable_class(self):
        records = [LogitRecord.from_logits(str(i), [3.0, 0.0], 1) for i in range(5)]
        with self.assertRaises(UnfittableClass):
            fit_openmax(records, OpenmaxConfig())

    def test_degenerate_class_uses_fallback(self):
        records = [LogitRecord.from_logits(str(i), [4.0, 1.0], 0) for i in range(5)]
        records += clustered_records(10, 2)[10:]
        with self.assertLogs("src.openmax", level="WARNING"):
            model = fit_openmax(records, OpenmaxConfig(tail_size=5))
        self.assertTrue(model.classes[0].degenerate)
        self.assertFalse(model.classes[1].degenerate)

    def test_c2_fits_unknown_unit(self):
        records = clustered_records(15, 3, regime=Regime.C2)
        model = fit_openmax(records, OpenmaxConfig(tail_size=5), regime=Regime.C2)
        self.assertEqual(model.unknown_unit, 2)
        self.assertTrue(openmax_decide(records[-1], model).decision.is_unknown)

    def test_alpha_above_width(self):
        with self.assertRaises(InvalidConfig):
            fit_openmax(clustered_records(5, 2), OpenmaxConfig(alpha=3, tail_size=3))

    def test_save_load_round_trip(self):
        records = clustered_records(20, 3, seed=4)
        model = fit_openmax(records, OpenmaxConfig(tail_size=8))
        probes = clustered_records(3, 3, seed=9, noise=2.0)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_openmax(Path(tmp) / "openmax.tsv", model, "fp")
            restored = load_openmax(path, "fp")
            with self.assertRaises(PipelineMismatch):
                load_openmax(path, "other")
        self.assertEqual(restored.alpha, model.alpha)
        for original, loaded in zip(decide_batch(probes, model), decide_batch(probes, restored)):
            self.assertEqual(original.decision, loaded.decision)
            np.testing.assert_allclose(original.probabilities, loaded.probabilities, rtol=1e-12)


if __name__ == '__main__':
    unittest.main()
