import tempfile
import unittest
from pathlib import Path

import numpy as np

from clients.embedding import MockEmbeddingProvider
from fixtures import make_trajectory, make_unit, random_store
from memory_handlers.metric_functions import build_metric_suite
from memory_handlers.retrieval_gate import (
    RankingExample,
    examples_from_trajectories,
    gate_forward,
    init_gate_params,
    load_gate,
    match_score,
    mean_kendall_tau,
    order_by_score,
    pair_weights,
    rank,
    retrieval_gradient,
    retrieval_loss,
    save_gate,
    synthetic_ranking_examples,
    train_gate,
)
from pydantic_models.config import MetricConfig
from pydantic_models.memory import MemoryStore
from utils.errors import ContractError, DivergenceError

NAMES = ["rel", "imp", "rec_p1"]


def random_examples(rng, dim, n_metrics, groups=2, per_group=2):
    examples = []
    for g in range(groups):
        for _ in range(per_group):
            t = int(rng.integers(2, 7))
            examples.append(
                RankingExample(
                    group=f"g{g}",
                    query=rng.standard_normal(dim),
                    memories=rng.standard_normal((t, dim)),
                    metrics=rng.uniform(-1, 1, size=(t, n_metrics)),
                )
            )
    return examples


class TestGateForward(unittest.TestCase):

    def test_softmax_weights_are_positive_and_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            scale = float(rng.uniform(0.01, 3.0))
            params = init_gate_params(4, NAMES, hidden=5, scale=scale, rng=rng)
            for _ in range(50):
                weights = gate_forward(
                    params, rng.standard_normal(4), rng.standard_normal(4)
                )
                self.assertTrue(np.all(weights > 0))
                self.assertLess(abs(weights.sum() - 1.0), 1e-9)

    def test_match_score_is_a_convex_mix(self):
        rng = np.random.default_rng(1)
        params = init_gate_params(4, NAMES, scale=1.0, rng=rng)
        metrics = np.array([0.2, -0.4, 0.9])
        score = match_score(
            params, rng.standard_normal(4), rng.standard_normal(4), metrics
        )
        self.assertTrue(metrics.min() <= score <= metrics.max())
        constant = match_score(params, np.ones(4), np.ones(4), np.full(3, 0.7))
        self.assertAlmostEqual(constant, 0.7, places=12)

    def test_contract_errors(self):
        params = init_gate_params(4, NAMES)
        with self.assertRaises(ContractError):
            gate_forward(params, np.ones(3), np.ones(4))
        with self.assertRaises(ContractError):
            match_score(params, np.ones(4), np.ones(4), np.ones(2))
        broken = params.model_copy(update={"b2": np.array([np.inf, 0.0, 0.0])})
        with self.assertRaises(ContractError):
            gate_forward(broken, np.ones(4), np.ones(4))

    def test_save_and_load(self):
        params = init_gate_params(4, NAMES, rng=np.random.default_rng(2))
        with tempfile.TemporaryDirectory() as tmp:
            path = str(Path(tmp) / "gate.json")
            save_gate(params, path)
            loaded = load_gate(path)
        np.testing.assert_array_equal(loaded.flat(), params.flat())
        self.assertEqual(loaded.metric_names, NAMES)


class TestRanking(unittest.TestCase):

    def setUp(self):
        self.dim = 6
        self.suite = build_metric_suite(
            MetricConfig(recency_powers=[1.0]), self.dim, np.random.default_rng(3)
        )

    def test_rank_matches_brute_force_on_random_stores(self):
        rng = np.random.default_rng(4)
        for case in range(500):
            params = init_gate_params(
                self.dim, self.suite.names, hidden=6, scale=1.0, rng=rng
            )
            size = int(rng.integers(0, 201))
            store = random_store(rng, self.dim, size, max_step=30)
            s_emb = rng.standard_normal(self.dim)
            ranked = rank(params, self.suite, s_emb, store, 31)
            brute = []
            for unit in store.units:
                metrics = self.suite.vector(s_emb, 31, unit)
                score = match_score(params, s_emb, np.asarray(unit.embedding), metrics)
                brute.append((-score, -unit.step, -unit.id, unit.id, score))
            brute.sort()
            self.assertEqual(ranked.ids, [row[3] for row in brute], f"case {case}")
            for entry, row in zip(ranked.entries, brute):
                self.assertAlmostEqual(entry.score, row[4], places=12)

    def test_empty_store_ranks_empty(self):
        params = init_gate_params(self.dim, self.suite.names)
        store = MemoryStore(dim=self.dim)
        ranked = rank(params, self.suite, np.ones(self.dim), store, 3)
        self.assertEqual(ranked.entries, [])

    def test_ties_break_on_recency_then_id(self):
        scores = np.array([0.5, 0.5, 0.5, 0.9])
        steps = np.array([1, 3, 3, 0])
        ids = np.array([0, 1, 2, 3])
        self.assertEqual(order_by_score(scores, steps, ids).tolist(), [3, 2, 1, 0])

    def test_identical_units_follow_the_tie_break(self):
        rng = np.random.default_rng(5)
        template = make_unit(0, 2, self.dim, rng)
        store = MemoryStore(dim=self.dim)
        for unit_id in range(4):
            store.units.append(template.model_copy(update={"id": unit_id}))
        # zero weights give a uniform mix, so identical units score identically
        params = init_gate_params(self.dim, self.suite.names, scale=0.0)
        ranked = rank(params, self.suite, rng.standard_normal(self.dim), store, 3)
        self.assertEqual(ranked.ids, [3, 2, 1, 0])

    def test_snapshot_size_limits_the_ranked_prefix(self):
        rng = np.random.default_rng(6)
        store = random_store(rng, self.dim, 10)
        params = init_gate_params(self.dim, self.suite.names, rng=rng)
        s_emb = rng.standard_normal(self.dim)
        ranked = rank(params, self.suite, s_emb, store, 25, size=4)
        self.assertEqual(sorted(ranked.ids), [u.id for u in store.units[:4]])

    def test_mismatched_metric_names(self):
        params = init_gate_params(self.dim, ["rel"])
        store = random_store(np.random.default_rng(0), self.dim, 3)
        with self.assertRaises(ContractError):
            rank(params, self.suite, np.ones(self.dim), store, 25)


class TestPairWeights(unittest.TestCase):

    def test_hand_computed_table(self):
        weighting = pair_weights(5, 0.5)
        np.testing.assert_allclose(
            weighting.magnitudes, [0.3902, 0.0976, 0.0244, 0.0976, 0.3902], atol=1e-4
        )
        self.assertEqual(weighting.orientations, [1, 1, 0, -1, -1])
        self.assertEqual(weighting.exponents, [0, 2, 4, 2, 0])

    def test_magnitudes_sum_to_one_and_are_symmetric(self):
        for t in range(2, 12):
            weighting = pair_weights(t, 0.8)
            self.assertAlmostEqual(sum(weighting.magnitudes), 1.0, places=12)
            np.testing.assert_allclose(
                weighting.magnitudes, weighting.magnitudes[::-1], rtol=1e-12
            )
            self.assertAlmostEqual(sum(weighting.weights), 0.0, places=12)

    def test_short_lists_have_no_pairs(self):
        self.assertEqual(pair_weights(1, 0.8).magnitudes, [])
        self.assertEqual(pair_weights(0, 0.8).orientations, [])


class TestRetrievalLoss(unittest.TestCase):

    def test_gradient_matches_central_differences(self):
        rng = np.random.default_rng(7)
        eps = 1e-5
        for case in range(100):
            params = init_gate_params(3, NAMES, hidden=4, scale=1.0, rng=rng)
            examples = random_examples(rng, 3, len(NAMES))
            gamma = float(rng.uniform(0.3, 0.95))
            analytic = retrieval_gradient(params, examples, gamma).flat()
            flat = params.flat()
            numeric = np.zeros_like(flat)
            for i in range(len(flat)):
                step = np.zeros_like(flat)
                step[i] = eps
                up = retrieval_loss(params.with_flat(flat + step), examples, gamma)
                down = retrieval_loss(params.with_flat(flat - step), examples, gamma)
                numeric[i] = (up - down) / (2 * eps)
            scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-4)
            error = np.max(np.abs(analytic - numeric) / scale)
            self.assertLess(error, 1e-4, f"case {case}")

    def test_loss_is_zero_without_pairs(self):
        params = init_gate_params(3, NAMES)
        single = RankingExample(
            group="g",
            query=np.ones(3),
            memories=np.ones((1, 3)),
            metrics=np.ones((1, 3)),
        )
        self.assertEqual(retrieval_loss(params, [single], 0.8), 0.0)
        self.assertEqual(retrieval_loss(params, [], 0.8), 0.0)

    def test_identical_scores_cost_ln2_per_unit_of_weight(self):
        rng = np.random.default_rng(11)
        params = init_gate_params(3, NAMES, hidden=4, scale=1.0, rng=rng)
        for t in range(2, 9):
            example = RankingExample(
                group="g",
                query=rng.standard_normal(3),
                memories=np.tile(rng.standard_normal(3), (t, 1)),
                metrics=np.tile(rng.uniform(-1, 1, size=len(NAMES)), (t, 1)),
            )
            total = sum(abs(w) for w in pair_weights(t, 0.7).weights)
            self.assertAlmostEqual(
                retrieval_loss(params, [example], 0.7), np.log(2) * total, places=12
            )

    def test_strongly_ordered_scores_drive_the_loss_to_zero(self):
        rng = np.random.default_rng(12)
        params = init_gate_params(3, NAMES, hidden=4, scale=1.0, rng=rng)
        memory = rng.standard_normal(3)
        losses = []
        for scale in (1.0, 10.0, 100.0, 1000.0):
            descending = scale * np.arange(6, 0, -1, dtype=float)
            example = RankingExample(
                group="g",
                query=rng.standard_normal(3),
                memories=np.tile(memory, (6, 1)),
                metrics=np.tile(descending[:, None], (1, len(NAMES))),
            )
            losses.append(retrieval_loss(params, [example], 0.8))
        self.assertEqual(losses, sorted(losses, reverse=True))
        self.assertLess(losses[-1], 1e-12)

    def test_loss_ignores_memory_id_labels(self):
        provider = MockEmbeddingProvider(dim=8)
        suite = build_metric_suite(
            MetricConfig(emotion=False, importance=False, recency_powers=[1.0]),
            8,
            np.random.default_rng(0),
        )
        params = init_gate_params(8, suite.names, rng=np.random.default_rng(1))
        trajectories = [
            make_trajectory(f"t{i}", 1.0, dim=8, steps=4) for i in range(2)
        ]
        relabeled = []
        for trajectory in trajectories:
            copy = trajectory.model_copy(deep=True)
            new_id = {u.id: 100 + 7 * u.id for u in copy.memories.units}
            for unit in copy.memories.units:
                unit.id = new_id[unit.id]
            for record in copy.steps:
                record.ranked_ids = [new_id[i] for i in record.ranked_ids]
                record.aggregation.merged_ids = [
                    new_id[i] for i in record.aggregation.merged_ids
                ]
            relabeled.append(copy)
        before = retrieval_loss(
            params, examples_from_trajectories(trajectories, suite, provider), 0.8
        )
        after = retrieval_loss(
            params, examples_from_trajectories(relabeled, suite, provider), 0.8
        )
        self.assertGreater(before, 0.0)
        self.assertEqual(before, after)

    def test_training_lowers_the_loss(self):
        rng = np.random.default_rng(8)
        examples = synthetic_ranking_examples(NAMES, "rel", 20, dim=8, rng=rng)
        params = init_gate_params(8, NAMES, rng=rng)
        trained, log = train_gate(params, examples, lr=0.5, steps=50)
        self.assertEqual(list(log.columns), ["step", "loss"])
        self.assertEqual(len(log), 51)
        self.assertLess(log["loss"].iloc[-1], log["loss"].iloc[0])
        self.assertFalse(np.array_equal(trained.flat(), params.flat()))

    def test_minibatches_are_seeded(self):
        examples = synthetic_ranking_examples(
            NAMES, "rel", 12, dim=8, rng=np.random.default_rng(9)
        )
        params = init_gate_params(8, NAMES, rng=np.random.default_rng(10))
        runs = [
            train_gate(
                params, examples, 0.5, 10, batch_size=3, rng=np.random.default_rng(1)
            )[0]
            for _ in range(2)
        ]
        np.testing.assert_array_equal(runs[0].flat(), runs[1].flat())

    def test_divergence_and_bad_learning_rate(self):
        examples = synthetic_ranking_examples(
            NAMES, "rel", 4, dim=8, rng=np.random.default_rng(0)
        )
        params = init_gate_params(8, NAMES)
        with self.assertRaises(DivergenceError):
            train_gate(params, examples, lr=np.inf, steps=3)
        with self.assertRaises(ContractError):
            train_gate(params, examples, lr=0.0, steps=3)

    def test_examples_from_trajectories(self):
        provider = MockEmbeddingProvider(dim=8)
        suite = build_metric_suite(
            MetricConfig(emotion=False, importance=False, recency_powers=[1.0]),
            8,
            np.random.default_rng(0),
        )
        trajectories = [
            make_trajectory(f"t{i}", 1.0, dim=8, steps=3) for i in range(2)
        ]
        examples = examples_from_trajectories(trajectories, suite, provider)
        # the first step of each trajectory ranks a single memory
        self.assertEqual(len(examples), 4)
        self.assertEqual([e.group for e in examples], ["t0", "t0", "t1", "t1"])
        self.assertEqual(examples[0].metrics.shape, (2, 2))


class TestGateRecovery(unittest.TestCase):
    """The gate learns to follow the one metric that governs the true ranking."""

    def check_recovery(self, designated):
        train = synthetic_ranking_examples(
            NAMES,
            designated,
            40,
            dim=16,
            rng=np.random.default_rng(100),
            group_prefix="train",
        )
        held_out = synthetic_ranking_examples(
            NAMES,
            designated,
            100,
            dim=16,
            rng=np.random.default_rng(200),
            group_prefix="test",
        )
        params = init_gate_params(16, NAMES, rng=np.random.default_rng(300))
        self.assertLessEqual(mean_kendall_tau(params, held_out, designated), 0.3)
        trained, _ = train_gate(params, train, lr=0.5, steps=2000)
        self.assertGreaterEqual(mean_kendall_tau(trained, held_out, designated), 0.9)

    def test_recovers_relevance(self):
        self.check_recovery("rel")

    def test_recovers_recency(self):
        self.check_recovery("rec_p1")

    def test_recovers_importance(self):
        self.check_recovery("imp")


if __name__ == "__main__":
    unittest.main()
