import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from stability_pruner import __version__
from stability_pruner.ablation import mean_accuracy, ordering_holds, run_ablation
from stability_pruner.analyzer import (CostAnalyzer, compression_summary, layerwise_flops_comparison, memory_report,
                                       top_flops_layers, trm_curve)
from stability_pruner.architectures import resolve_architecture
from stability_pruner.config import RunConfig, resolve
from stability_pruner.dataio import CHECKPOINT_MAGIC, load_checkpoint, load_dataset, save_checkpoint
from stability_pruner.errors import ConfigError, PrunerError
from stability_pruner.layers import Architecture
from stability_pruner.log import setup_logging
from stability_pruner.model import ModelGraph, error_percent
from stability_pruner.pruner import CRITERIA, IterativePruner, PruneHooks, conv_layer_index
from stability_pruner.report_generator import (ReportWriter, render_ablation, render_compression, render_cost_report,
                                               render_eval, render_prune_result, render_train_report,
                                               render_trm_curve)
from stability_pruner.trainer import Trainer, epoch_medians

logger = logging.getLogger("stability_pruner.cli")

MODEL_FILE = "model.sfpk"
PRUNED_FILE = "pruned.sfpk"


def _datasets(config: RunConfig, arch: Architecture):
    train_set, test_set = load_dataset(config.data)
    if train_set.sample_shape != tuple(arch.input_shape):
        raise ConfigError(f"data {config.data!r} has samples of shape {train_set.sample_shape}, "
                          f"the model expects {tuple(arch.input_shape)}")
    if train_set.num_classes != arch.num_classes:
        raise ConfigError(f"data {config.data!r} has {train_set.num_classes} classes, "
                          f"the model predicts {arch.num_classes}")
    return train_set, test_set


def _require_checkpoint(config: RunConfig) -> ModelGraph:
    if not config.checkpoint:
        raise ConfigError(f"{config.command} needs --checkpoint")
    return load_checkpoint(config.checkpoint)


def _metadata(config: RunConfig, **extra) -> Dict:
    metadata = {"command": config.command, "seed": config.seed, "config_hash": config.config_hash()}
    metadata.update(extra)
    return metadata


def _is_checkpoint(ref: str) -> bool:
    path = Path(ref)
    if not path.is_file():
        return False
    with open(path, "rb") as f:
        return f.read(len(CHECKPOINT_MAGIC)) == CHECKPOINT_MAGIC


def _architecture_of(ref: str) -> Architecture:
    if _is_checkpoint(ref):
        return load_checkpoint(ref).architecture
    return resolve_architecture(ref)


def cmd_train(config: RunConfig) -> Path:
    arch = resolve_architecture(config.arch or "lenet5")
    train_set, test_set = _datasets(config, arch)
    model = ModelGraph.initialize(arch, config.seed)
    loss_mode = "total" if config.train.lam > 0 else "actual"
    logger.info("🏋️ training %s on %d samples for %d epoch(s)", arch.name, len(train_set), config.train.epochs)
    model, report = Trainer(config.train).train(model, train_set, loss_mode, test_set)
    if report.epochs:
        first, last = epoch_medians(report)
        logger.info("📉 median loss %.4f in the first quarter of epochs, %.4f in the last", first, last)

    config.write_resolved()
    path = save_checkpoint(model, config.out / MODEL_FILE, _metadata(config, epoch=config.train.epochs))
    accuracy = model.accuracy(test_set)
    with ReportWriter(config.out / "train_report.jsonl") as writer:
        writer.write_all(report.to_records("train"))
        writer.write({"record": "eval", "split": "test", "accuracy": accuracy, "samples": len(test_set)})
    print(render_train_report(report))
    return path


def cmd_prune(config: RunConfig) -> Path:
    model = _require_checkpoint(config)
    train_set, test_set = _datasets(config, model.architecture)
    schedule = config.prune_schedule(model.conv_widths())
    base = model
    train_reports = []

    def aux_train(m: ModelGraph, t: int) -> ModelGraph:
        cfg = replace(config.aux, epochs=schedule.aux_epochs, lam=schedule.lam, seed=config.seed * 1000 + t)
        m, report = Trainer(cfg).train(m, train_set, "total")
        train_reports.append(("aux", t, report))
        return m

    def finetune(m: ModelGraph, t: int) -> ModelGraph:
        cfg = replace(config.finetune, epochs=schedule.finetune_epochs, seed=config.seed * 1000 + t)
        m, report = Trainer(cfg).finetune(m, train_set, test_set)
        train_reports.append(("finetune", t, report))
        return m

    hooks = PruneHooks(aux_train, finetune, config.criterion, config.seed)
    config.write_resolved()
    with ReportWriter(config.out / "prune_report.jsonl") as writer:
        def on_iteration(residual: ModelGraph, iteration) -> None:
            writer.write_all(iteration.report.to_records(iteration.iteration))
            for phase, t, report in train_reports:
                for record in report.to_records(phase):
                    record["iteration"] = t
                    writer.write(record)
            train_reports.clear()
            writer.write({"record": "iteration", "iteration": iteration.iteration,
                          "criterion": config.criterion,
                          "pruned": {str(k): list(v) for k, v in iteration.pruned.layers.items()},
                          "widths": iteration.widths, "params": iteration.params,
                          "test_accuracy": residual.accuracy(test_set)})

        result = IterativePruner(schedule, hooks).run(model, on_iteration)
        before, after = memory_report(base), memory_report(result.model)
        summary = compression_summary(before, after)
        rows = layerwise_flops_comparison(before, after)
        writer.write(summary.to_record())
        writer.write_all(rows)
        accuracy = result.model.accuracy(test_set)
        writer.write({"record": "eval", "split": "test", "accuracy": accuracy, "samples": len(test_set)})

    path = save_checkpoint(result.model, config.out / PRUNED_FILE,
                           _metadata(config, iterations=len(schedule.iterations), widths=result.model.conv_widths()))
    print(render_prune_result(result, base.conv_widths()))
    print(render_compression(summary, rows))
    return path


def cmd_analyze(config: RunConfig) -> Path:
    ref = config.checkpoint or config.arch
    if not ref:
        raise ConfigError("analyze needs --arch or --checkpoint")
    arch = _architecture_of(ref)
    analyzer = CostAnalyzer(arch)
    config.write_resolved()
    path = config.out / "cost_report.jsonl"
    with ReportWriter(path) as writer:
        reports = analyzer.reports(config.batch_sizes)
        for report in reports:
            writer.write_all(report.to_records())
        points = trm_curve(arch, config.batch_sizes)
        for batch_size, trm in points:
            writer.write({"record": "trm_point", "architecture": arch.name, "batch_size": batch_size,
                          "trm_bytes": trm, "model_size_bytes": reports[0].model_size_bytes})
        logger.info("🔥 most expensive conv layers: %s", ", ".join(top_flops_layers(reports[0], 6)))
        print(render_cost_report(reports[0]))
        if len(points) > 1:
            print(render_trm_curve(arch.name, points))
        if config.compare:
            other_arch = _architecture_of(config.compare)
            other = CostAnalyzer(other_arch).report(config.batch_sizes[0])
            summary = analyzer.compare(other_arch, config.batch_sizes[0])
            rows = layerwise_flops_comparison(reports[0], other)
            writer.write_all(other.to_records())
            writer.write(summary.to_record())
            writer.write_all(rows)
            print(render_compression(summary, rows))
    return path


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> np.ndarray:
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels, predictions), 1)
    return matrix


def cmd_eval(config: RunConfig) -> Path:
    model = _require_checkpoint(config)
    train_set, test_set = _datasets(config, model.architecture)
    dataset = test_set if config.split == "test" else train_set
    predictions = model.predict(dataset.images, config.train.batch_size)
    accuracy = float(np.mean(predictions == dataset.labels))
    matrix = confusion_matrix(dataset.labels, predictions, dataset.num_classes)
    config.write_resolved()
    path = config.out / "eval_report.jsonl"
    with ReportWriter(path) as writer:
        writer.write({"record": "eval", "split": config.split, "accuracy": accuracy,
                      "error_percent": error_percent(accuracy), "samples": len(dataset),
                      "checksum": model.checksum()})
        writer.write({"record": "confusion", "split": config.split, "matrix": matrix})
    print(render_eval(model.architecture.name, config.split, accuracy, matrix))
    return path


def cmd_ablate(config: RunConfig) -> Path:
    model = _require_checkpoint(config)
    train_set, test_set = _datasets(config, model.architecture)
    eval_set = test_set.subset(config.eval_samples) if config.eval_samples else test_set
    layers = [conv_layer_index(model, position) for position in config.ablate_layers]
    points = run_ablation(model, train_set, eval_set, config.aux, layers, config.ks, config.seeds, config.workers)
    config.write_resolved()
    path = config.out / "ablation_report.jsonl"
    with ReportWriter(path) as writer:
        writer.write_all(p.to_record() for p in points)
        for (k, arm), acc in sorted(mean_accuracy(points).items()):
            writer.write({"record": "ablation_mean", "k": k, "arm": arm, "accuracy": acc})
    ks = [k for k in config.ks if k > 0]
    if ordering_holds(points, ks):
        logger.info("✅ highest_ratio >= random >= lowest_ratio at k=%s", ks)
    else:
        logger.warning("⚠️ arm ordering does not hold at every k in %s", ks)
    records = [p.to_record() for p in points]
    print(render_ablation(records))
    return path


COMMANDS = {
    "train": cmd_train,
    "prune": cmd_prune,
    "analyze": cmd_analyze,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="INI config file; flags override its values")
    parser.add_argument("--arch", help="built-in architecture name or description file")
    parser.add_argument("--checkpoint", help="SFPK checkpoint to start from")
    parser.add_argument("--data", help="MNIST directory or synth[:n=..,classes=..,size=..,seed=..]")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--batch", help="mini-batch size (analyze: comma-separated batch sizes)")


def _training(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--lambda", dest="lam", type=float, help="auxiliary loss weight")
    parser.add_argument("--aux-form", choices=["abs", "literal"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stab-prune", description="Stability-based filter pruning toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="count", default=0)
    subparser = parser.add_subparsers(dest="command")

    train_parser = subparser.add_parser("train", help="Train a model from scratch")
    _common(train_parser)
    _training(train_parser)

    prune_parser = subparser.add_parser("prune", help="Iteratively prune a trained checkpoint")
    _common(prune_parser)
    _training(prune_parser)
    prune_parser.add_argument("--schedule", help="schedule file, 'p1,p2;p1,p2' or 'to:w1,w2'")
    prune_parser.add_argument("--criterion", choices=list(CRITERIA))
    prune_parser.add_argument("--aux-epochs", type=int)
    prune_parser.add_argument("--finetune-epochs", type=int)

    analyze_parser = subparser.add_parser("analyze", help="FLOPS, parameters and memory of an architecture")
    _common(analyze_parser)
    analyze_parser.add_argument("--compare", help="pruned architecture or checkpoint to compare against")

    eval_parser = subparser.add_parser("eval", help="Accuracy and confusion matrix of a checkpoint")
    _common(eval_parser)
    eval_parser.add_argument("--split", choices=["train", "test"])

    ablate_parser = subparser.add_parser("ablate", help="Accuracy after pruning without fine-tuning")
    _common(ablate_parser)
    _training(ablate_parser)
    ablate_parser.add_argument("--layers", help="conv layer positions, e.g. '1' or '0,1' (-1 = last)")
    ablate_parser.add_argument("--k", help="comma-separated filter counts")
    ablate_parser.add_argument("--seeds", help="comma-separated seeds")
    ablate_parser.add_argument("--workers", type=int)
    ablate_parser.add_argument("--eval-samples", type=int)
    ablate_parser.add_argument("--aux-epochs", type=int)
    return parser


def _flags(args: argparse.Namespace) -> Dict:
    skip = {"command", "config", "verbose", "quiet"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.verbose - args.quiet)
    if args.command is None:
        parser.print_help()
        return 2
    try:
        config = resolve(args.command, _flags(args), args.config)
        COMMANDS[args.command](config)
    except PrunerError as exc:
        logger.error("❌ %s", exc)
        return exc.exit_code
    logger.info("✅ %s finished: %s", args.command, config.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
