import tempfile
import unittest
from pathlib import Path

import numpy as np

from stability_pruner.analyzer import compression_summary, memory_report
from stability_pruner.architectures import lenet5
from stability_pruner.report_generator import (SCHEMA, ReportWriter, read_report, render_ablation,
                                               render_compression, render_cost_report, render_eval,
                                               render_trm_curve)


class TestReportWriter(unittest.TestCase):
    def test_records_are_tagged_and_json_safe(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "report.jsonl"
            with ReportWriter(path) as writer:
                writer.write({"record": "importance", "score": np.float32(np.inf), "count": np.int64(3),
                              "matrix": np.eye(2, dtype=np.int64), "path": Path("runs")})
                writer.write_all([{"record": "totals", "flops": 10}])
            self.assertEqual(writer.count, 2)
            first, second = read_report(path)
        self.assertEqual(first["schema"], SCHEMA)
        self.assertEqual(first["score"], "inf")
        self.assertEqual(first["count"], 3)
        self.assertEqual(first["matrix"], [[1, 0], [0, 1]])
        self.assertEqual(first["path"], "runs")
        self.assertEqual(second["flops"], 10)

    def test_record_type_is_required(self):
        with tempfile.TemporaryDirectory() as tmp:
            with ReportWriter(Path(tmp) / "r.jsonl") as writer:
                with self.assertRaises(ValueError):
                    writer.write({"flops": 1})


class TestRendering(unittest.TestCase):
    def test_cost_report(self):
        text = render_cost_report(memory_report(lenet5(), 1))
        self.assertIn("| conv1 | conv2d |", text)
        self.assertIn("2,293,000", text)

    def test_trm_and_compression(self):
        self.assertIn("| 64 |", render_trm_curve("lenet5", [(1, 100), (64, 6400)]))
        summary = compression_summary(memory_report(lenet5()), memory_report(lenet5((4, 14))))
        text = render_compression(summary, [{"name": "conv1", "flops_before": 288000, "flops_after": 57600}])
        self.assertIn("% pruned", text)
        self.assertIn("| conv1 | 288,000 | 57,600 |", text)

    def test_eval_and_ablation(self):
        text = render_eval("lenet5", "test", 0.75, np.array([[3, 1], [1, 3]]))
        self.assertIn("25.00%", text)
        points = [{"k": 4, "arm": arm, "accuracy": acc}
                  for arm, acc in (("highest_ratio", 0.9), ("random", 0.8), ("lowest_ratio", 0.5))]
        self.assertIn("| 4 | 0.9000 | 0.8000 | 0.5000 |", render_ablation(points))


if __name__ == "__main__":
    unittest.main()
