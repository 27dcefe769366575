import json
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SCHEMA = "stability_pruner.report/1"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, Path):
        return str(value)
    return value


class ReportWriter:
    """Appends schema-tagged records to one ``.jsonl`` file."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = open(self.path, "w", encoding="utf-8")
        self.count = 0

    def write(self, record: Dict) -> None:
        if "record" not in record:
            raise ValueError("report records need a 'record' type")
        payload = {"schema": SCHEMA}
        payload.update(_jsonable(record))
        self._handle.write(json.dumps(payload, sort_keys=True) + "\n")
        self.count += 1

    def write_all(self, records: Iterable[Dict]) -> None:
        for record in records:
            self.write(record)

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()
            logger.info("📝 wrote %d records to %s", self.count, self.path)

    def __enter__(self) -> "ReportWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_report(path) -> List[Dict]:
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def _table(header: Sequence[str], rows: Iterable[Sequence]) -> List[str]:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    for row in rows:
        lines.append("| " + " | ".join(str(cell) for cell in row) + " |")
    return lines


def _millions(value: int) -> str:
    return f"{value / 1e6:.2f}M"


def _mib(value: int) -> str:
    return f"{value / 2 ** 20:.2f} MiB"


def render_cost_report(report) -> str:
    parts = []
    parts.append(f"## 🧮 {report.architecture} (batch {report.batch_size})")
    parts.append("")
    parts.extend(_table(
        ["layer", "kind", "output", "FLOPS", "params", "feature maps"],
        ((layer.name, layer.kind, "x".join(map(str, layer.output_shape)), f"{layer.flops:,}",
          f"{layer.params:,}", f"{layer.featuremap_bytes:,}") for layer in report.layers)))
    parts.append("")
    parts.append(f"- **FLOPS**: {report.flops:,} ({_millions(report.flops)})")
    parts.append(f"- **Parameters**: {report.params:,} ({_millions(report.params)})")
    parts.append(f"- **Model size**: {report.model_size_bytes:,} bytes ({_mib(report.model_size_bytes)})")
    parts.append(f"- **Run-time memory**: {report.trm_bytes:,} bytes ({_mib(report.trm_bytes)})")
    parts.append("")
    return "\n".join(parts)


def render_trm_curve(name: str, points: Sequence) -> str:
    parts = [f"## 💾 Run-time memory of {name}", ""]
    parts.extend(_table(["batch", "TRM bytes", "TRM"], ((b, f"{trm:,}", _mib(trm)) for b, trm in points)))
    parts.append("")
    return "\n".join(parts)


def render_compression(summary, rows: Optional[List[Dict]] = None) -> str:
    parts = ["## 📉 Compression", ""]
    parts.append(f"- **FLOPS**: {_millions(summary.flops_before)} -> {_millions(summary.flops_after)} "
                 f"({summary.flops_ratio:.2f}X, {summary.flops_pruned_percent:.2f}% pruned)")
    parts.append(f"- **Parameters**: {_millions(summary.params_before)} -> {_millions(summary.params_after)} "
                 f"({summary.params_ratio:.2f}X, {summary.params_pruned_percent:.2f}% pruned)")
    parts.append(f"- **Run-time memory (batch {summary.batch_size})**: {_mib(summary.trm_before)} -> "
                 f"{_mib(summary.trm_after)} ({summary.trm_ratio:.2f}X)")
    parts.append("")
    if rows:
        parts.extend(_table(["layer", "original FLOPS", "pruned FLOPS"],
                            ((r["name"], f"{r['flops_before']:,}", f"{r['flops_after']:,}") for r in rows)))
        parts.append("")
    return "\n".join(parts)


def render_train_report(report, title: str = "Training") -> str:
    parts = [f"## 📈 {title} ({report.loss_mode} loss)", ""]
    parts.extend(_table(
        ["epoch", "lr", "loss", "train acc", "test acc"],
        ((e.epoch + 1, f"{e.lr:g}", f"{e.train_loss:.4f}", f"{e.train_accuracy:.4f}",
          "-" if e.test_accuracy is None else f"{e.test_accuracy:.4f}") for e in report.epochs)))
    parts.append("")
    parts.append(f"- **Checksum**: `{report.final_checksum}`")
    parts.append("")
    return "\n".join(parts)


def render_prune_result(result, base_widths: Sequence[int]) -> str:
    parts = ["## ✂️ Pruning", ""]
    parts.append(f"- **Start widths**: {list(base_widths)}")
    rows = ((it.iteration + 1, it.pruned.total, it.widths, f"{it.params:,}") for it in result.iterations)
    parts.append("")
    parts.extend(_table(["iteration", "removed", "widths", "params"], rows))
    parts.append("")
    return "\n".join(parts)


def render_eval(name: str, split: str, accuracy: float, confusion: np.ndarray) -> str:
    parts = [f"## 🎯 {name} on {split}", ""]
    parts.append(f"- **Accuracy**: {accuracy:.4f}")
    parts.append(f"- **Error**: {100.0 * (1.0 - accuracy):.2f}%")
    parts.append("")
    per_class = confusion.diagonal() / np.maximum(confusion.sum(axis=1), 1)
    parts.extend(_table(["class", "samples", "accuracy"],
                        ((c, int(confusion[c].sum()), f"{per_class[c]:.4f}") for c in range(len(confusion)))))
    parts.append("")
    return "\n".join(parts)


def render_ablation(points: Sequence[Dict]) -> str:
    parts = ["## 🧪 Ablation (no fine-tuning)", ""]
    by_k: Dict[int, Dict[str, List[float]]] = {}
    for point in points:
        by_k.setdefault(point["k"], {}).setdefault(point["arm"], []).append(point["accuracy"])
    rows = []
    for k in sorted(by_k):
        arms = by_k[k]
        rows.append([k] + [f"{np.mean(arms[a]):.4f}" if a in arms else "-"
                           for a in ("highest_ratio", "random", "lowest_ratio")])
    parts.extend(_table(["k", "highest ratio", "random", "lowest ratio"], rows))
    parts.append("")
    return "\n".join(parts)
