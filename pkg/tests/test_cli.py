import io
import json
import tempfile
import unittest
from contextlib import redirect_stderr
from pathlib import Path

import pandas as pd

from cli import EXIT_BAD_CONFIG, EXIT_FAILED, EXIT_OK, main
from fixtures import make_trajectory, synthetic_config
from memory_handlers.store import deserialize_trajectories, serialize_trajectories
from pydantic_models.config import RunConfig


class TestCli(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config_path = self.root / "config.json"
        config = synthetic_config(str(self.root / "default"), tasks=3)
        self.config_path.write_text(config.model_dump_json())

    def tearDown(self):
        self.tmp.cleanup()

    def cli(self, *argv):
        config = str(self.config_path)
        return main([*argv, "--config", config, "--log-level", "ERROR"])

    def fixture_log(self):
        path = self.root / "fixture.jsonl"
        trajectories = [
            make_trajectory(f"t{i}", float(i % 2), dim=64, steps=3) for i in range(4)
        ]
        path.write_bytes(serialize_trajectories(trajectories))
        return path

    def test_run_is_reproducible(self):
        outputs = []
        for name in ("first", "second"):
            out = self.root / name
            self.assertEqual(
                self.cli("run", "--seed", "1", "--output-dir", str(out)), EXIT_OK
            )
            outputs.append(out)
        for artifact in ("trajectories.jsonl", "summary.csv"):
            self.assertEqual(
                (outputs[0] / artifact).read_bytes(),
                (outputs[1] / artifact).read_bytes(),
                artifact,
            )
        log_bytes = (outputs[0] / "trajectories.jsonl").read_bytes()
        log = deserialize_trajectories(log_bytes)
        self.assertEqual(len(log), 3)
        self.assertFalse((outputs[0] / "step_timings.csv").exists())

    def test_baseline_policy_flag(self):
        out = self.root / "full"
        code = self.cli(
            "run", "--policy", "full", "--output-dir", str(out), "--record-timings"
        )
        self.assertEqual(code, EXIT_OK)
        summary = pd.read_csv(out / "summary.csv")
        self.assertEqual(summary["memory_policy"].tolist(), ["full"])
        self.assertEqual(summary["exact_match"].tolist(), [1.0])
        self.assertTrue((out / "step_timings.csv").exists())

    def test_invalid_config_names_the_field(self):
        self.config_path.write_text(json.dumps({"optimization": {"epochs": 0}}))
        stderr = io.StringIO()
        with redirect_stderr(stderr):
            code = self.cli("train-on")
        self.assertEqual(code, EXIT_BAD_CONFIG)
        self.assertIn("optimization.epochs", stderr.getvalue())

    def test_shipped_config_is_valid(self):
        shipped = Path(__file__).resolve().parents[1] / "configs" / "synthetic.json"
        config = RunConfig.model_validate_json(shipped.read_text())
        self.assertEqual(config.optimization.epochs, 5)
        self.assertEqual(config.metrics.names(), ["rel", "rec_p1"])

    def test_unreadable_config(self):
        self.config_path.write_text("[1, 2]")
        with redirect_stderr(io.StringIO()):
            self.assertEqual(self.cli("run"), EXIT_BAD_CONFIG)

    def test_missing_log_fails(self):
        code = self.cli("report", "--log", str(self.root / "absent.jsonl"))
        self.assertEqual(code, EXIT_FAILED)

    def test_export_datasets(self):
        out = self.root / "export"
        log = str(self.fixture_log())
        code = self.cli("export-datasets", "--log", log, "--output-dir", str(out))
        self.assertEqual(code, EXIT_OK)
        sft = (out / "sft.jsonl").read_text().splitlines()
        self.assertEqual(len(sft), 2)
        self.assertEqual(json.loads(sft[0])["trajectory_id"], "t1")
        self.assertTrue((out / "dpo.jsonl").exists())

    def test_train_off_writes_the_next_bundle(self):
        out = self.root / "off"
        log = str(self.fixture_log())
        code = self.cli("train-off", "--log", log, "--output-dir", str(out))
        self.assertEqual(code, EXIT_OK)
        manifest = json.loads((out / "bundle_v1" / "manifest.json").read_text())
        self.assertEqual(manifest["stage"], "complete")

    def test_report_with_losses(self):
        out = self.root / "report"
        logprobs = self.root / "sft_logprobs.jsonl"
        logprobs.write_text(json.dumps({"token_logprobs": [-0.5, -1.5]}) + "\n")
        code = self.cli(
            "report",
            "--log",
            str(self.fixture_log()),
            "--output-dir",
            str(out),
            "--sft-logprobs",
            str(logprobs),
        )
        self.assertEqual(code, EXIT_OK)
        report = pd.read_csv(out / "report.csv")
        self.assertEqual(report["trajectories"].tolist(), [4])
        self.assertEqual(report["exact_match"].tolist(), [0.5])
        self.assertIn("<div", (out / "report.html").read_text())
        losses = pd.read_csv(out / "loss_report.csv")
        self.assertEqual(losses["kind"].tolist(), ["sft"])
        self.assertAlmostEqual(losses["loss"].iloc[0], 1.0)


if __name__ == "__main__":
    unittest.main()
