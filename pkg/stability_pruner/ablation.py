import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from stability_pruner.errors import ConfigError
from stability_pruner.model import ModelGraph
from stability_pruner.pruner import ImportanceReport, PrunedSet, rank_filters, surgery
from stability_pruner.tensor import generator
from stability_pruner.trainer import TrainConfig, Trainer

logger = logging.getLogger(__name__)

ARMS = ("highest_ratio", "random", "lowest_ratio")


@dataclass(frozen=True)
class AblationPoint:
    seed: int
    k: int
    arm: str
    accuracy: float
    layers: Tuple[int, ...]

    def to_record(self) -> Dict:
        record = asdict(self)
        record["record"] = "ablation_point"
        record["layers"] = list(self.layers)
        return record


def choose_filters(report: ImportanceReport, layer_index: int, k: int, arm: str, seed: int) -> Tuple[int, ...]:
    scores = report.layer(layer_index).scores
    width = len(scores)
    if arm == "highest_ratio":
        chosen = report.prune_order(layer_index)[:k]
    elif arm == "lowest_ratio":
        chosen = np.lexsort((np.arange(width), scores))[:k]
    elif arm == "random":
        chosen = generator((seed, layer_index, k)).choice(width, size=k, replace=False)
    else:
        raise ConfigError(f"arm must be one of {ARMS}, got {arm!r}")
    return tuple(sorted(int(j) for j in chosen))


def prune_arm(model: ModelGraph, report: ImportanceReport, layer_indices: Sequence[int], k: int,
              arm: str, seed: int) -> ModelGraph:
    pruned = PrunedSet({i: choose_filters(report, i, k, arm, seed) for i in layer_indices} if k else {})
    return surgery(model, pruned)


def check_ablation(model: ModelGraph, layer_indices: Sequence[int], ks: Sequence[int]) -> None:
    if not layer_indices:
        raise ConfigError("ablation needs at least one conv layer")
    for index in layer_indices:
        if index not in model.architecture.conv_indices:
            raise ConfigError(f"layer {index} is not a conv layer")
        width = model.layers[index].out_channels
        for k in ks:
            if not 0 <= k < width:
                raise ConfigError(f"k={k} must be in [0, {width}) for layer {index}")


def ablate_seed(model: ModelGraph, eval_set, aux_train: Callable[[ModelGraph, int], ModelGraph],
                layer_indices: Sequence[int], ks: Sequence[int], seed: int) -> List[AblationPoint]:
    perturbed = aux_train(model.copy(), seed)
    report = rank_filters(model, perturbed)
    baseline = model.accuracy(eval_set)
    layers = tuple(layer_indices)
    points = []
    for k in sorted(ks):
        for arm in ARMS:
            acc = baseline if k == 0 else prune_arm(model, report, layers, k, arm, seed).accuracy(eval_set)
            points.append(AblationPoint(seed, k, arm, acc, layers))
    logger.info("🧪 seed %d done: baseline %.4f", seed, baseline)
    return points


def auxiliary_trainer(dataset, config: TrainConfig) -> Callable[[ModelGraph, int], ModelGraph]:
    def train(model: ModelGraph, seed: int) -> ModelGraph:
        trained, _ = Trainer(replace(config, seed=seed), progress=False).train(model, dataset, "total")
        return trained
    return train


def run_ablation(model: ModelGraph, train_set, eval_set, aux_config: TrainConfig,
                 layer_indices: Sequence[int], ks: Sequence[int], seeds: Sequence[int],
                 workers: int = 1) -> List[AblationPoint]:
    check_ablation(model, layer_indices, ks)
    aux_train = auxiliary_trainer(train_set, aux_config)
    logger.info("🧪 ablating layers %s for k in %s over %d seed(s)", list(layer_indices), list(ks), len(seeds))

    def one(seed: int) -> List[AblationPoint]:
        return ablate_seed(model, eval_set, aux_train, layer_indices, ks, seed)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(one, seeds))
    else:
        per_seed = [one(seed) for seed in seeds]
    points = [p for chunk in per_seed for p in chunk]
    return sorted(points, key=lambda p: (p.seed, p.k, ARMS.index(p.arm)))


def mean_accuracy(points: Sequence[AblationPoint]) -> Dict[Tuple[int, str], float]:
    """Mean accuracy over seeds per (k, arm)."""
    grouped: Dict[Tuple[int, str], List[float]] = {}
    for p in points:
        grouped.setdefault((p.k, p.arm), []).append(p.accuracy)
    return {key: float(np.mean(values)) for key, values in grouped.items()}


def ordering_holds(points: Sequence[AblationPoint], ks: Sequence[int]) -> bool:
    """highest_ratio >= random >= lowest_ratio in mean accuracy at every k."""
    means = mean_accuracy(points)
    return all(means[(k, "highest_ratio")] >= means[(k, "random")] >= means[(k, "lowest_ratio")] for k in ks)
