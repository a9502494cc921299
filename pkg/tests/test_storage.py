import unittest

import numpy as np

from clients.chat import ScriptedChatEndpoint
from clients.embedding import MockEmbeddingProvider
from clients.scripted import NAME_HINT, REFLECTION_HINTS, synthetic_responder
from fixtures import make_trajectory
from memory_handlers.storage import (
    REFLECTION_MARKER,
    cache_flush,
    cache_put,
    extract,
    partition_trajectories,
    reflect,
    render_storage_prompt,
    sample_group,
    update_task_prompt,
)
from pydantic_models.storage import ObservationCache, TaskPrompt
from utils.errors import ContractError


class TestExtract(unittest.TestCase):

    def setUp(self):
        self.provider = MockEmbeddingProvider(dim=16)

    def test_prompt_lists_observation_hints_and_instruction(self):
        prompt = TaskPrompt(hints=("keep names", "keep dates"))
        rendered = render_storage_prompt(prompt, "It rained in Oslo.")
        lines = rendered.split("\n")
        self.assertEqual(lines[0], "Observation: It rained in Oslo.")
        self.assertEqual(lines[1], "Hint: keep names keep dates")
        self.assertEqual(lines[-1], prompt.global_instruction)

    def test_prompt_without_hints_has_no_hint_line(self):
        rendered = render_storage_prompt(TaskPrompt(), "obs")
        self.assertNotIn("Hint:", rendered)

    def test_extract_embeds_the_summary(self):
        endpoint = ScriptedChatEndpoint(["  Oslo had rain.  "])
        unit = extract(
            endpoint, TaskPrompt(), "It rained in Oslo.", self.provider, 4, 2
        )
        self.assertEqual(unit.text, "Oslo had rain.")
        self.assertEqual(unit.source, "It rained in Oslo.")
        self.assertEqual((unit.id, unit.step), (4, 2))
        self.assertFalse(unit.fallback)
        self.assertEqual(len(unit.embedding), 16)

    def test_endpoint_failure_falls_back_to_the_observation(self):
        for endpoint in (ScriptedChatEndpoint([]), ScriptedChatEndpoint(["   "])):
            unit = extract(endpoint, TaskPrompt(), "raw text", self.provider, 0, 1)
            self.assertEqual(unit.text, "raw text")
            self.assertTrue(unit.fallback)

    def test_empty_observation(self):
        with self.assertRaises(ContractError):
            extract(ScriptedChatEndpoint(["x"]), TaskPrompt(), " ", self.provider, 0, 1)


class TestObservationCache(unittest.TestCase):

    def test_put_releases_a_full_batch(self):
        cache = ObservationCache(capacity=3)
        released = []
        for observation in ["a", "b", "c", "d"]:
            cache, batch = cache_put(cache, observation)
            released.append(batch)
        self.assertEqual(released, [[], [], ["a", "b", "c"], []])
        self.assertEqual(cache.pending, ["d"])

    def test_flush_drains_and_leaves_the_input_unchanged(self):
        cache = ObservationCache(capacity=5, pending=["a", "b"])
        emptied, batch = cache_flush(cache)
        self.assertEqual(batch, ["a", "b"])
        self.assertEqual(emptied.pending, [])
        self.assertEqual(cache.pending, ["a", "b"])


class TestReflection(unittest.TestCase):

    def setUp(self):
        self.trajectories = [
            make_trajectory("win", 1.0),
            make_trajectory("half", 0.5),
            make_trajectory("loss", 0.0),
        ]

    def test_partition_on_threshold(self):
        positive, negative = partition_trajectories(self.trajectories, 0.5)
        self.assertEqual([t.id for t in positive], ["win", "half"])
        self.assertEqual([t.id for t in negative], ["loss"])
        with self.assertRaises(ContractError):
            partition_trajectories(self.trajectories, 1.5)

    def test_reflect_cleans_and_dedupes_hints(self):
        reply = "1. Keep names\n- Keep names\n\n* Keep dates\nx"
        endpoint = ScriptedChatEndpoint([reply])
        hints = reflect(endpoint, self.trajectories[:1], "positive", lines=2)
        self.assertEqual(hints, ["Keep names", "Keep dates"])
        self.assertIn(REFLECTION_MARKER, endpoint.prompts[0])
        self.assertIn("State: ", endpoint.prompts[0])

    def test_reflect_on_empty_group_makes_no_call(self):
        endpoint = ScriptedChatEndpoint([])
        self.assertEqual(reflect(endpoint, [], "negative"), [])
        self.assertEqual(endpoint.calls, 0)

    def test_reflect_failures(self):
        silent = ScriptedChatEndpoint([])
        self.assertEqual(reflect(silent, self.trajectories, "negative"), [])
        with self.assertRaises(ContractError):
            reflect(ScriptedChatEndpoint(["x"]), self.trajectories, "neutral")

    def relay_trajectory(self, kept: bool):
        trajectory = make_trajectory("relay", 0.0)
        route = "Station Kalo relays to station Venmir."
        for unit in trajectory.memories.units:
            unit.source = f"The harbor was busy. {route}"
            unit.text = route if kept else "The harbor was busy."
        return trajectory

    def test_synthetic_reflector_reads_the_group(self):
        endpoint = ScriptedChatEndpoint(synthetic_responder)
        self.assertEqual(
            reflect(endpoint, self.trajectories, "negative"), [NAME_HINT]
        )
        dropped = reflect(endpoint, [self.relay_trajectory(False)], "negative")
        self.assertEqual(dropped, REFLECTION_HINTS)
        kept = reflect(endpoint, [self.relay_trajectory(True)], "positive")
        self.assertEqual(kept, REFLECTION_HINTS[:1])

    def test_sample_group_is_seeded_and_ordered(self):
        pool = [make_trajectory(f"t{i}", 1.0) for i in range(10)]
        first = sample_group(pool, 4, np.random.default_rng(3))
        second = sample_group(pool, 4, np.random.default_rng(3))
        self.assertEqual([t.id for t in first], [t.id for t in second])
        ids = [int(t.id[1:]) for t in first]
        self.assertEqual(ids, sorted(ids))
        self.assertEqual(len(sample_group(pool[:3], 4, np.random.default_rng(0))), 3)


class TestUpdateTaskPrompt(unittest.TestCase):

    def test_appends_new_hints_once(self):
        prompt = TaskPrompt(hints=("a",))
        updated = update_task_prompt(prompt, ["a", "b"], ["c", "b"])
        self.assertEqual(updated.hints, ("a", "b", "c"))
        self.assertEqual(prompt.hints, ("a",))
        self.assertEqual(updated.global_instruction, prompt.global_instruction)

    def test_keeps_the_most_recent_hints(self):
        prompt = TaskPrompt(hints=("a", "b"))
        updated = update_task_prompt(prompt, ["c", "d"], ["e"], max_hints=3)
        self.assertEqual(updated.hints, ("c", "d", "e"))

    def test_duplicate_hints_are_rejected(self):
        with self.assertRaises(ValueError):
            TaskPrompt(hints=("a", "a"))


if __name__ == "__main__":
    unittest.main()
