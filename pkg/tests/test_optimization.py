import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from clients.chat import ScriptedChatEndpoint
from clients.runtime import build_runtime
from clients.scripted import NAME_HINT
from environment_handlers.corpus import load_environment
from fixtures import make_trajectory, synthetic_config
from memory_handlers.store import deserialize_trajectories
from training_handlers.optimization import (
    bundle_dir,
    filter_successful,
    initial_bundle,
    load_bundle,
    off_policy_optimize,
    on_policy_optimize,
    save_bundle,
)
from utils.errors import ContractError, StageError


def failing_responder(prompt, index):
    raise RuntimeError("expert offline")


class TestBundles(unittest.TestCase):

    def setUp(self):
        self.runtime = build_runtime(synthetic_config())

    def test_filter_successful(self):
        trajectories = [make_trajectory(f"t{r}", r) for r in (1.0, 0.5, 0.0)]
        self.assertEqual(
            [t.id for t in filter_successful(trajectories, 0.5)], ["t1.0", "t0.5"]
        )
        self.assertEqual(len(filter_successful(trajectories, 0.0)), 3)
        with self.assertRaises(ContractError):
            filter_successful(trajectories, 1.5)

    def test_initial_bundle_is_seeded(self):
        first = initial_bundle(self.runtime)
        second = initial_bundle(build_runtime(synthetic_config()))
        np.testing.assert_array_equal(first.gate.flat(), second.gate.flat())
        self.assertEqual(first.version, 0)
        self.assertEqual(first.gate.metric_names, ["rel", "rec_p1"])
        self.assertEqual(first.task_prompt.hints, ())

    def test_save_and_load_round_trip(self):
        bundle = initial_bundle(self.runtime).model_copy(update={"version": 3})
        with tempfile.TemporaryDirectory() as tmp:
            path = save_bundle(bundle, tmp, parent_version=2)
            self.assertEqual(path, bundle_dir(tmp, 3))
            manifest = json.loads((path / "manifest.json").read_text())
            loaded = load_bundle(str(path))
        self.assertEqual(manifest["stage"], "complete")
        self.assertEqual(manifest["parent_version"], 2)
        self.assertEqual(loaded.version, 3)
        np.testing.assert_array_equal(loaded.gate.flat(), bundle.gate.flat())
        self.assertEqual(loaded.task_prompt, bundle.task_prompt)
        self.assertEqual(loaded.utilization, bundle.utilization)

    def test_partial_bundle_loads_with_a_warning(self):
        bundle = initial_bundle(self.runtime)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_bundle(bundle, tmp, stage="dpo")
            with self.assertLogs("training_handlers.optimization", level="WARNING"):
                load_bundle(str(path))

    def test_configured_bundle_path_wins(self):
        bundle = initial_bundle(self.runtime).model_copy(update={"version": 4})
        with tempfile.TemporaryDirectory() as tmp:
            path = save_bundle(bundle, tmp)
            config = synthetic_config().model_copy(update={"bundle_path": str(path)})
            self.assertEqual(initial_bundle(build_runtime(config)).version, 4)


class TestOffPolicy(unittest.TestCase):

    def setUp(self):
        self.runtime = build_runtime(synthetic_config())
        self.bundle = initial_bundle(self.runtime)
        rng = np.random.default_rng(0)
        self.trajectories = [
            make_trajectory(f"t{i}", float(i % 2), dim=64, steps=3, rng=rng)
            for i in range(6)
        ]

    def test_one_pass_updates_every_component(self):
        before = [t.model_copy(deep=True) for t in self.trajectories]
        with tempfile.TemporaryDirectory() as tmp:
            updated = off_policy_optimize(
                self.trajectories, self.bundle, self.runtime, tmp
            )
            out = Path(tmp)
            manifest = json.loads((bundle_dir(tmp, 1) / "manifest.json").read_text())
            sft_lines = (out / "sft_v1.jsonl").read_text().splitlines()
            self.assertTrue((out / "gate_loss_v1.csv").exists())
            self.assertTrue((out / "gate_loss_v1.html").exists())
            self.assertTrue((out / "dpo_v1.jsonl").exists())
        self.assertEqual(updated.version, 1)
        self.assertEqual(manifest["parent_version"], 0)
        self.assertEqual(manifest["stage"], "complete")
        self.assertEqual(len(sft_lines), 3)
        self.assertEqual(updated.task_prompt.hints, (NAME_HINT,))
        self.assertFalse(np.array_equal(updated.gate.flat(), self.bundle.gate.flat()))
        self.assertEqual(self.trajectories, before)
        self.assertEqual(self.bundle.version, 0)
        self.assertEqual(self.bundle.task_prompt.hints, ())

    def test_deterministic(self):
        results = []
        for _ in range(2):
            with tempfile.TemporaryDirectory() as tmp:
                results.append(
                    off_policy_optimize(
                        self.trajectories, self.bundle, self.runtime, tmp
                    )
                )
        np.testing.assert_array_equal(results[0].gate.flat(), results[1].gate.flat())
        self.assertEqual(results[0].task_prompt, results[1].task_prompt)

    def test_no_successes_leaves_the_gate_unchanged(self):
        failures = [t.model_copy(update={"reward": 0.0}) for t in self.trajectories]
        with tempfile.TemporaryDirectory() as tmp:
            updated = off_policy_optimize(failures, self.bundle, self.runtime, tmp)
            self.assertEqual((Path(tmp) / "sft_v1.jsonl").read_text(), "")
        np.testing.assert_array_equal(updated.gate.flat(), self.bundle.gate.flat())
        self.assertEqual(updated.task_prompt.hints, (NAME_HINT,))

    def test_empty_log(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(ContractError):
                off_policy_optimize([], self.bundle, self.runtime, tmp)

    def test_stage_failure_persists_a_partial_bundle(self):
        self.runtime.expert = ScriptedChatEndpoint(failing_responder)
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(StageError) as ctx:
                off_policy_optimize(self.trajectories, self.bundle, self.runtime, tmp)
            manifest = json.loads((bundle_dir(tmp, 1) / "manifest.json").read_text())
        self.assertEqual(ctx.exception.stage, "sft-dataset")
        self.assertIsInstance(ctx.exception.cause, RuntimeError)
        self.assertEqual(manifest["stage"], "sft-dataset")


class TestOnPolicy(unittest.TestCase):

    def run_cycle(self, tmp, tasks, epochs, sample_batch):
        config = synthetic_config(
            tmp, tasks=tasks, epochs=epochs, sample_batch=sample_batch
        )
        runtime = build_runtime(config)
        corpus, task_list = load_environment(
            config.environment, np.random.default_rng(config.seed)
        )
        return on_policy_optimize(
            task_list, corpus, initial_bundle(runtime), runtime, tmp
        )

    def test_single_epoch(self):
        with tempfile.TemporaryDirectory() as tmp:
            bundle, metrics = self.run_cycle(tmp, tasks=4, epochs=1, sample_batch=2)
            payload = (Path(tmp) / "trajectories.jsonl").read_bytes()
            log = deserialize_trajectories(payload)
            self.assertTrue((Path(tmp) / "epoch_metrics.csv").exists())
            self.assertFalse((Path(tmp) / "step_timings.csv").exists())
            self.assertTrue((bundle_dir(tmp, 1) / "manifest.json").exists())
        self.assertEqual(bundle.version, 1)
        self.assertEqual(metrics["epoch"].tolist(), [0, 1])
        self.assertEqual(metrics["bundle_version"].tolist(), [0, 1])
        self.assertEqual(metrics["trajectories"].tolist(), [2, 2])
        self.assertEqual(len(log), 4)
        self.assertEqual([t.epoch for t in log], [0, 0, 1, 1])

    def test_reflection_teaches_the_extractor_the_route(self):
        with tempfile.TemporaryDirectory() as tmp:
            bundle, metrics = self.run_cycle(tmp, tasks=30, epochs=5, sample_batch=30)
        rewards = metrics["mean_reward"].tolist()
        steps = metrics["mean_steps"].tolist()
        self.assertEqual(len(metrics), 6)
        self.assertLessEqual(rewards[0], 0.3)
        self.assertGreaterEqual(rewards[-1], 0.8)
        self.assertLess(steps[-1], steps[0])
        self.assertEqual(metrics["new_hints"].iloc[0], 2)
        self.assertFalse(metrics["discarded"].any())
        self.assertEqual(bundle.version, 5)


if __name__ == "__main__":
    unittest.main()
