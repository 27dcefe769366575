"""Stability-based filter ranking, selection and network surgery."""
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from stability_pruner.dependency import DependencyGraph
from stability_pruner.errors import ArchitectureError, ConfigError
from stability_pruner.model import ModelGraph
from stability_pruner.tensor import abs_sum, generator

logger = logging.getLogger(__name__)

CRITERIA = ("stability", "l1", "random")


@dataclass
class LayerImportance:
    layer_index: int
    scores: np.ndarray                       # FI per filter (or l1 norm / random key)
    before_abs: np.ndarray
    after_abs: Optional[np.ndarray] = None

    @property
    def width(self) -> int:
        return len(self.scores)


@dataclass
class ImportanceReport:
    """Per-layer filter scores.

    ``high_is_prunable`` is True for stability ratios and random keys (largest
    scores go first) and False for the l1 baseline (smallest go first).
    """
    criterion: str
    layers: List[LayerImportance]
    high_is_prunable: bool = True

    def layer(self, layer_index: int) -> LayerImportance:
        for entry in self.layers:
            if entry.layer_index == layer_index:
                return entry
        raise KeyError(layer_index)

    def prune_order(self, layer_index: int) -> np.ndarray:
        """Filter indices from most to least prunable; ties go to the lower index."""
        scores = self.layer(layer_index).scores
        key = -scores if self.high_is_prunable else scores
        return np.lexsort((np.arange(len(scores)), key))

    def to_records(self, iteration: Optional[int] = None) -> List[dict]:
        records = []
        for entry in self.layers:
            for j in range(entry.width):
                score = float(entry.scores[j])
                records.append({
                    "record": "importance",
                    "iteration": iteration,
                    "criterion": self.criterion,
                    "layer": entry.layer_index,
                    "filter": j,
                    "score": score if math.isfinite(score) else "inf",
                    "before_abs": float(entry.before_abs[j]),
                    "after_abs": None if entry.after_abs is None else float(entry.after_abs[j]),
                })
        return records


@dataclass
class PrunedSet:
    """Filter indices removed this iteration, keyed by conv layer index."""
    layers: Dict[int, Tuple[int, ...]] = field(default_factory=dict)

    def count(self, layer_index: int) -> int:
        return len(self.layers.get(layer_index, ()))

    @property
    def total(self) -> int:
        return sum(len(v) for v in self.layers.values())

    def is_empty(self) -> bool:
        return self.total == 0


def _filter_abs_sums(model: ModelGraph, layer_index: int) -> np.ndarray:
    return np.array([abs_sum(w) for w in model.filters(layer_index)], dtype=np.float64)


def rank_filters(before: ModelGraph, after: ModelGraph) -> ImportanceReport:
    """Stability ratio |m_j| / |f_j| per filter; a zero ``before`` filter scores +inf."""
    if not before.same_architecture(after):
        raise ArchitectureError("rank_filters needs two models with the same architecture")
    layers = []
    for index in before.architecture.conv_indices:
        f = _filter_abs_sums(before, index)
        m = _filter_abs_sums(after, index)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(f > 0, m / np.where(f > 0, f, 1.0), np.inf)
        layers.append(LayerImportance(index, ratio, f, m))
    return ImportanceReport("stability", layers, high_is_prunable=True)


def rank_l1(model: ModelGraph) -> ImportanceReport:
    """l1-norm baseline: the smallest filters are the least important."""
    layers = []
    for index in model.architecture.conv_indices:
        norms = _filter_abs_sums(model, index)
        layers.append(LayerImportance(index, norms, norms))
    return ImportanceReport("l1", layers, high_is_prunable=False)


def rank_random(model: ModelGraph, seed: int) -> ImportanceReport:
    layers = []
    for index in model.architecture.conv_indices:
        width = model.filters(index).shape[0]
        keys = generator((seed, index)).permutation(width).astype(np.float64)
        layers.append(LayerImportance(index, keys, _filter_abs_sums(model, index)))
    return ImportanceReport("random", layers, high_is_prunable=True)


def select_filters(report: ImportanceReport, counts: Sequence[int]) -> PrunedSet:
    """Per conv layer, the ``counts[i]`` least important filters (never cross-layer)."""
    if len(counts) != len(report.layers):
        raise ConfigError(f"expected {len(report.layers)} prune counts, got {len(counts)}")
    selected = {}
    for entry, count in zip(report.layers, counts):
        count = int(count)
        if count < 0:
            raise ConfigError(f"layer {entry.layer_index}: negative prune count {count}")
        if count > entry.width:
            raise ConfigError(f"layer {entry.layer_index}: cannot prune {count} of {entry.width} filters")
        if count:
            order = report.prune_order(entry.layer_index)
            selected[entry.layer_index] = tuple(sorted(int(j) for j in order[:count]))
    return PrunedSet(selected)


def _check_pruned(model: ModelGraph, pruned: PrunedSet) -> None:
    for index, filters in pruned.layers.items():
        if index not in model.architecture.conv_indices:
            raise ConfigError(f"layer {index} is not a conv layer")
        width = model.layers[index].out_channels
        if len(set(filters)) != len(filters) or any(not 0 <= j < width for j in filters):
            raise ConfigError(f"layer {index}: invalid filter indices {filters} for width {width}")
        if len(filters) >= width:
            raise ArchitectureError(f"layer {index}: pruning {len(filters)} of {width} filters would empty it")


def _channel_columns(keep: np.ndarray, spatial: int) -> np.ndarray:
    """Flattened-feature columns of the kept channels (channel-major flatten)."""
    return (keep[:, None] * spatial + np.arange(spatial)[None, :]).reshape(-1)


def surgery(model: ModelGraph, pruned: PrunedSet) -> ModelGraph:
    """Remove the pruned filters and every slice that depends on them.

    Returns a new model; surviving weights are exact copies of the originals.
    """
    _check_pruned(model, pruned)
    if pruned.is_empty():
        return model.copy()
    graph = DependencyGraph(model.architecture)
    params = {k: v.copy() for k, v in model.params.items()}
    buffers = {k: v.copy() for k, v in model.buffers.items()}
    layers = list(model.layers)

    for index, filters in sorted(pruned.layers.items()):
        if not filters:
            continue
        width = layers[index].out_channels
        keep = np.setdiff1d(np.arange(width), np.asarray(filters, dtype=np.int64))
        params[f"{index}.weight"] = params[f"{index}.weight"][keep]
        params[f"{index}.bias"] = params[f"{index}.bias"][keep]
        layers[index] = replace(layers[index], out_channels=len(keep))
        for dep in graph.channel_dependents(index):
            d = dep.layer_index
            if dep.role == "batchnorm":
                for name in ("gamma", "beta"):
                    params[f"{d}.{name}"] = params[f"{d}.{name}"][keep]
                for name in ("running_mean", "running_var"):
                    buffers[f"{d}.{name}"] = buffers[f"{d}.{name}"][keep]
                layers[d] = replace(layers[d], channels=len(keep))
            elif dep.role == "conv_input":
                params[f"{d}.weight"] = params[f"{d}.weight"][:, keep]
                layers[d] = replace(layers[d], in_channels=len(keep))
            else:
                columns = _channel_columns(keep, dep.spatial)
                params[f"{d}.weight"] = params[f"{d}.weight"][:, columns]
                layers[d] = replace(layers[d], in_features=len(columns))
    result = ModelGraph(model.architecture.with_layers(layers), params, buffers, model.dtype)
    logger.debug("surgery removed %d filters: widths %s -> %s", pruned.total,
                 model.conv_widths(), result.conv_widths())
    return result


def mask_filters(model: ModelGraph, pruned: PrunedSet) -> ModelGraph:
    """Zero the pruned filters and their dependent slices, keeping all shapes."""
    _check_pruned(model, pruned)
    masked = model.copy()
    graph = DependencyGraph(model.architecture)
    for index, filters in pruned.layers.items():
        if not filters:
            continue
        drop = np.asarray(filters, dtype=np.int64)
        masked.params[f"{index}.weight"][drop] = 0
        masked.params[f"{index}.bias"][drop] = 0
        for dep in graph.channel_dependents(index):
            d = dep.layer_index
            if dep.role == "batchnorm":
                masked.params[f"{d}.gamma"][drop] = 0
                masked.params[f"{d}.beta"][drop] = 0
            elif dep.role == "conv_input":
                masked.params[f"{d}.weight"][:, drop] = 0
            else:
                masked.params[f"{d}.weight"][:, _channel_columns(drop, dep.spatial)] = 0
    return masked


@dataclass
class PruneSchedule:
    """Per-iteration prune counts P^t = [p_1..p_K] plus per-iteration training budgets."""
    iterations: List[List[int]] = field(default_factory=list)
    aux_epochs: int = 1
    finetune_epochs: int = 3
    lam: float = 1e-5

    def validate(self, widths: Sequence[int]) -> None:
        if self.aux_epochs < 1 or self.finetune_epochs < 0:
            raise ConfigError("aux_epochs must be >= 1 and finetune_epochs >= 0")
        if self.lam <= 0:
            raise ConfigError(f"lambda must be > 0 for the auxiliary phase, got {self.lam}")
        current = list(widths)
        for t, counts in enumerate(self.iterations):
            if len(counts) != len(widths):
                raise ConfigError(f"iteration {t}: expected {len(widths)} counts, got {len(counts)}")
            for i, p in enumerate(counts):
                if p < 0:
                    raise ConfigError(f"iteration {t}: negative count for conv layer {i}")
                if p >= current[i]:
                    raise ConfigError(f"iteration {t}: conv layer {i} would keep no filters "
                                      f"({p} of {current[i]} pruned)")
                current[i] -= p

    def final_widths(self, widths: Sequence[int]) -> List[int]:
        return [w - sum(counts[i] for counts in self.iterations) for i, w in enumerate(widths)]

    @classmethod
    def towards(cls, widths: Sequence[int], targets: Sequence[int], fraction: float = 0.2,
                **kwargs) -> "PruneSchedule":
        """Remove ceil(fraction * remaining gap) per layer per iteration until targets are met."""
        if len(widths) != len(targets):
            raise ConfigError(f"expected {len(widths)} target widths, got {len(targets)}")
        if not 0 < fraction <= 1:
            raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
        for w, target in zip(widths, targets):
            if not 1 <= target <= w:
                raise ConfigError(f"target width {target} must be in [1, {w}]")
        current = list(widths)
        iterations = []
        while any(c > t for c, t in zip(current, targets)):
            counts = [math.ceil(fraction * (c - t)) if c > t else 0 for c, t in zip(current, targets)]
            iterations.append(counts)
            current = [c - p for c, p in zip(current, counts)]
        return cls(iterations=iterations, **kwargs)

    @classmethod
    def parse(cls, text: str, **kwargs) -> "PruneSchedule":
        """One iteration per line, comma-separated counts; '#' starts a comment."""
        iterations = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                iterations.append([int(x) for x in line.split(",")])
            except ValueError:
                raise ConfigError(f"schedule line {lineno}: expected comma-separated integers") from None
        return cls(iterations=iterations, **kwargs)

    def format(self) -> str:
        return "".join(",".join(str(p) for p in counts) + "\n" for counts in self.iterations)


@dataclass
class PruneHooks:
    """Training callbacks used by a pruning iteration.

    ``aux_train`` receives a copy of the snapshot and returns it trained with
    the total loss; ``finetune`` receives the residual model and returns it
    trained with the data loss only. Both also get the iteration index.
    """
    aux_train: Callable[[ModelGraph, int], ModelGraph]
    finetune: Callable[[ModelGraph, int], ModelGraph]
    criterion: str = "stability"
    seed: int = 0


@dataclass
class IterationResult:
    iteration: int
    report: ImportanceReport
    pruned: PrunedSet
    widths: List[int]
    params: int


def rank_for(criterion: str, snapshot: ModelGraph, hooks: PruneHooks, t: int) -> ImportanceReport:
    if criterion == "stability":
        perturbed = hooks.aux_train(snapshot.copy(), t)
        return rank_filters(snapshot, perturbed)
    if criterion == "l1":
        return rank_l1(snapshot)
    if criterion == "random":
        return rank_random(snapshot, hooks.seed * 1000 + t)
    raise ConfigError(f"criterion must be one of {CRITERIA}, got {criterion!r}")


def prune_iteration(model: ModelGraph, schedule: PruneSchedule, t: int,
                    hooks: PruneHooks) -> Tuple[ModelGraph, IterationResult]:
    """Rank, select and cut on the snapshot, then fine-tune the residual model."""
    if not 0 <= t < len(schedule.iterations):
        raise ConfigError(f"iteration {t} outside schedule of {len(schedule.iterations)}")
    snapshot = model.copy()
    report = rank_for(hooks.criterion, snapshot, hooks, t)
    pruned = select_filters(report, schedule.iterations[t])
    residual = surgery(snapshot, pruned)
    residual = hooks.finetune(residual, t)
    result = IterationResult(t, report, pruned, residual.conv_widths(), residual.parameter_count())
    logger.info("✂️ iteration %d: widths %s, %d params", t, result.widths, result.params)
    return residual, result


@dataclass
class PruneResult:
    model: ModelGraph
    iterations: List[IterationResult] = field(default_factory=list)


class IterativePruner:
    def __init__(self, schedule: PruneSchedule, hooks: PruneHooks):
        if hooks.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {hooks.criterion!r}")
        self.schedule = schedule
        self.hooks = hooks

    def run(self, model: ModelGraph,
            on_iteration: Optional[Callable[[ModelGraph, IterationResult], None]] = None) -> PruneResult:
        self.schedule.validate(model.conv_widths())
        result = PruneResult(model)
        logger.info("🔧 pruning %s over %d iteration(s) with the %s criterion -> widths %s",
                    model.architecture.name, len(self.schedule.iterations), self.hooks.criterion,
                    self.schedule.final_widths(model.conv_widths()))
        for t in range(len(self.schedule.iterations)):
            result.model, iteration = prune_iteration(result.model, self.schedule, t, self.hooks)
            result.iterations.append(iteration)
            if on_iteration is not None:
                on_iteration(result.model, iteration)
        return result


def conv_layer_index(model: ModelGraph, position: int) -> int:
    """Layer index of the ``position``-th conv layer (0-based, negative from the end)."""
    indices = model.architecture.conv_indices
    try:
        return indices[position]
    except IndexError:
        raise ConfigError(f"model has {len(indices)} conv layers, no conv #{position}") from None


def counts_for_layers(model: ModelGraph, per_layer: Dict[int, int]) -> List[int]:
    """Expand {layer index: count} into the per-conv-layer count list."""
    counts = []
    for index in model.architecture.conv_indices:
        counts.append(int(per_layer.get(index, 0)))
    unknown = set(per_layer) - set(model.architecture.conv_indices)
    if unknown:
        raise ConfigError(f"layers {sorted(unknown)} are not conv layers")
    return counts
