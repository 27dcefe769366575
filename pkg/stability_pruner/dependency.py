"""Channel data-flow graph used by surgery.

Nodes are layer indices; an edge u -> v means v reads u's output. Walking
forward from a conv layer through channel-preserving layers (ReLU, MaxPool,
BatchNorm) finds every tensor slice that belongs to one of its filters.
"""
from dataclasses import dataclass
from typing import List

import networkx as nx

from stability_pruner.errors import ArchitectureError
from stability_pruner.layers import Architecture, LayerKind

CHANNEL_PRESERVING = (LayerKind.RELU, LayerKind.MAXPOOL2D, LayerKind.BATCHNORM2D)


@dataclass(frozen=True)
class Dependent:
    layer_index: int
    role: str              # "batchnorm", "conv_input" or "linear_input"
    spatial: int = 1       # h*w elements per channel when a flatten intervenes


class DependencyGraph:
    def __init__(self, architecture: Architecture):
        self.architecture = architecture
        self.shapes = architecture.shapes()
        self.graph = nx.DiGraph()
        for index, spec in enumerate(architecture.layers):
            self.graph.add_node(index, kind=spec.kind, out_shape=self.shapes[index][1])
        for index in range(1, len(architecture.layers)):
            self.graph.add_edge(index - 1, index)

    def consumers(self, index: int) -> List[int]:
        return sorted(self.graph.successors(index))

    def channel_dependents(self, conv_index: int) -> List[Dependent]:
        """Every slice to remove together with one output channel of ``conv_index``."""
        spec = self.architecture.layers[conv_index]
        if spec.kind != LayerKind.CONV2D:
            raise ArchitectureError(f"layer {conv_index} is {spec.kind.value}, not a conv layer")
        dependents: List[Dependent] = []
        frontier = self.consumers(conv_index)
        spatial = 1
        found_consumer = False
        while frontier:
            if len(frontier) > 1:
                raise ArchitectureError(f"layer {conv_index}: branching outputs are not supported")
            node = frontier[0]
            kind = self.graph.nodes[node]["kind"]
            if kind == LayerKind.BATCHNORM2D:
                dependents.append(Dependent(node, "batchnorm"))
            elif kind == LayerKind.CONV2D:
                dependents.append(Dependent(node, "conv_input"))
                found_consumer = True
                break
            elif kind == LayerKind.FLATTEN:
                _, h, w = self.shapes[node][0]
                spatial = h * w
            elif kind == LayerKind.LINEAR:
                dependents.append(Dependent(node, "linear_input", spatial))
                found_consumer = True
                break
            elif kind not in CHANNEL_PRESERVING:
                raise ArchitectureError(f"layer {node}: cannot propagate channels through {kind.value}")
            frontier = self.consumers(node)
        if not found_consumer:
            raise ArchitectureError(f"layer {conv_index}: dangling dependency, no consumer reads its channels")
        return dependents
