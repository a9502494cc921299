import tempfile
import unittest
from pathlib import Path

import numpy as np

from clients.embedding import MockEmbeddingProvider
from fixtures import make_unit
from memory_handlers.metric_functions import (
    MetricSuite,
    build_metric_suite,
    d_emo,
    d_imp,
    d_rec,
    d_rel,
    embed,
    init_emotion_scorer,
    init_importance_scorer,
    load_emotion_scorer,
    load_importance_scorer,
    metric_vector,
    row_cosines,
    save_scorer,
)
from pydantic_models.config import MetricConfig
from utils.errors import ContractError, DimensionMismatchError


class TestMetricFunctions(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(5)

    def test_embed_is_deterministic_and_unit_norm(self):
        provider = MockEmbeddingProvider(dim=32, seed=1)
        first = embed(provider, "Station Kalo relays to station Venmir.")
        second = embed(
            MockEmbeddingProvider(dim=32, seed=1),
            "Station Kalo relays to station Venmir.",
        )
        np.testing.assert_array_equal(first, second)
        self.assertAlmostEqual(float(np.linalg.norm(first)), 1.0, places=12)
        with self.assertRaises(ContractError):
            embed(provider, "   ")

    def test_d_rel_bounds_and_identity(self):
        s = self.rng.standard_normal(6)
        self.assertAlmostEqual(d_rel(s, s), 1.0, places=12)
        self.assertAlmostEqual(d_rel(s, -s), -1.0, places=12)
        for _ in range(200):
            value = d_rel(self.rng.standard_normal(6), self.rng.standard_normal(6))
            self.assertTrue(-1.0 <= value <= 1.0)

    def test_d_rel_errors(self):
        with self.assertRaises(ContractError):
            d_rel(np.zeros(3), np.ones(3))
        with self.assertRaises(DimensionMismatchError):
            d_rel(np.ones(3), np.ones(4))

    def test_row_cosines_zero_rows_score_zero(self):
        memories = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 2.0]])
        np.testing.assert_allclose(
            row_cosines(np.array([1.0, 0.0]), memories), [1.0, 0.0, 0.0]
        )

    def test_d_rec(self):
        self.assertEqual(d_rec(4, 4, 1.0), 1.0)
        self.assertEqual(d_rec(4, 2, 1.0), 0.5)
        self.assertEqual(d_rec(4, 2, 2.0), 0.25)
        self.assertEqual(d_rec(4, 0, 0.5), 0.0)
        with self.assertRaises(ContractError):
            d_rec(0, 0, 1.0)
        with self.assertRaises(ContractError):
            d_rec(3, 4, 1.0)
        with self.assertRaises(ContractError):
            d_rec(3, 1, 0.0)

    def test_learned_metrics_stay_in_cosine_range(self):
        emotion = init_emotion_scorer(8, 16, self.rng)
        importance = init_importance_scorer(8, 4, self.rng)
        for _ in range(100):
            s, m = self.rng.standard_normal(8), self.rng.standard_normal(8)
            self.assertTrue(-1.0 <= d_emo(emotion, s, m) <= 1.0)
            self.assertTrue(-1.0 <= d_imp(importance, s, m) <= 1.0)
        with self.assertRaises(DimensionMismatchError):
            d_imp(importance, np.ones(8), np.ones(7))

    def test_importance_uses_distinct_projections(self):
        importance = init_importance_scorer(8, 4, self.rng)
        s, m = self.rng.standard_normal(8), self.rng.standard_normal(8)
        self.assertNotAlmostEqual(d_imp(importance, s, m), d_imp(importance, m, s))

    def test_scorer_save_load(self):
        emotion = init_emotion_scorer(8, 16, self.rng)
        importance = init_importance_scorer(8, 4, self.rng)
        with tempfile.TemporaryDirectory() as tmp:
            save_scorer(emotion, str(Path(tmp) / "emotion.json"))
            save_scorer(importance, str(Path(tmp) / "importance.json"))
            np.testing.assert_array_equal(
                load_emotion_scorer(str(Path(tmp) / "emotion.json")).flat(),
                emotion.flat(),
            )
            np.testing.assert_array_equal(
                load_importance_scorer(str(Path(tmp) / "importance.json")).flat(),
                importance.flat(),
            )


class TestMetricSuite(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(9)
        self.config = MetricConfig(recency_powers=[0.5, 1.0, 2.0])
        self.suite = build_metric_suite(self.config, 8, self.rng)

    def test_names_follow_fixed_order(self):
        self.assertEqual(
            self.suite.names, ["rel", "emo", "imp", "rec_p0.5", "rec_p1", "rec_p2"]
        )
        self.assertEqual(len(self.suite), 6)

    def test_matrix_matches_single_metric_functions(self):
        s = self.rng.standard_normal(8)
        units = [make_unit(i, i, 8, self.rng) for i in range(5)]
        matrix = self.suite.matrix(s, 6, units)
        self.assertEqual(matrix.shape, (5, 6))
        for row, unit in zip(matrix, units):
            m = np.asarray(unit.embedding)
            self.assertAlmostEqual(row[0], d_rel(s, m), places=12)
            emotion = d_emo(self.suite.emotion_scorer, s, m)
            importance = d_imp(self.suite.importance_scorer, s, m)
            self.assertAlmostEqual(row[1], emotion, places=12)
            self.assertAlmostEqual(row[2], importance, places=12)
            self.assertAlmostEqual(row[3], d_rec(6, unit.step, 0.5), places=12)
            self.assertAlmostEqual(row[5], d_rec(6, unit.step, 2.0), places=12)

    def test_annotated_units_give_the_same_metrics(self):
        s = self.rng.standard_normal(8)
        units = [make_unit(i, i, 8, self.rng) for i in range(4)]
        annotated = [self.suite.annotate(unit) for unit in units]
        self.assertIsNotNone(annotated[0].emotion)
        np.testing.assert_allclose(
            self.suite.matrix(s, 4, annotated),
            self.suite.matrix(s, 4, units),
            atol=1e-12,
        )

    def test_metric_vector(self):
        unit = make_unit(0, 2, 8, self.rng)
        vector = metric_vector(self.suite, self.rng.standard_normal(8), 3, unit)
        self.assertEqual(vector.names, self.suite.names)
        self.assertEqual(len(vector.values), 6)

    def test_empty_units_and_bad_dims(self):
        self.assertEqual(self.suite.matrix(np.ones(8), 1, []).shape, (0, 6))
        with self.assertRaises(DimensionMismatchError):
            self.suite.matrix(np.ones(5), 1, [make_unit(0, 1, 8, self.rng)])

    def test_missing_scorer_is_a_contract_error(self):
        with self.assertRaises(ContractError):
            MetricSuite(MetricConfig(), emotion_scorer=None, importance_scorer=None)

    def test_relevance_only_suite(self):
        suite = build_metric_suite(
            MetricConfig(emotion=False, importance=False, recency_powers=[]),
            8,
            self.rng,
        )
        self.assertEqual(suite.names, ["rel"])
        self.assertIsNone(suite.emotion_scorer)


if __name__ == "__main__":
    unittest.main()
