"""Occlusion ordering: the pairwise occlusion graph, layer assignment, and
cumulative masks.

An edge (i, j) in the graph means "object i is occluded by object j".
Layer 1 objects are fully visible; any other object sits one layer behind
its deepest occluder. The cumulative mask for a layer is the pixelwise
union of every mask in shallower layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .maskops import as_mask


class OcclusionCycleError(ValueError):
    """The occlusion relation contains a cycle; layer order is undefined."""

    def __init__(self, cycle):
        self.cycle = list(cycle)
        super().__init__("occlusion cycle detected: " + " -> ".join(map(str, self.cycle)))


@dataclass(frozen=True)
class OcclusionGraph:
    """Directed occlusion relation over object ids.

    Edge (i, j): i is occluded by j. Must be irreflexive and acyclic.
    """

    nodes: frozenset = field(default_factory=frozenset)
    edges: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        nodes = frozenset(self.nodes)
        edges = frozenset(tuple(e) for e in self.edges)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "edges", edges)
        for i, j in edges:
            if i == j:
                raise ValueError(f"self-occlusion edge ({i}, {i}) is not allowed")
            if i not in nodes or j not in nodes:
                raise ValueError(f"edge ({i}, {j}) references unknown node")
        cycle = _find_cycle(nodes, edges)
        if cycle is not None:
            raise OcclusionCycleError(cycle)

    def occluders_of(self, i):
        if i not in self.nodes:
            raise KeyError(f"unknown object id: {i!r}")
        return {j for (a, j) in self.edges if a == i}


def _find_cycle(nodes, edges):
    """Return one cycle as a node list, or None if the graph is acyclic."""
    succ = {n: [] for n in nodes}
    for i, j in edges:
        succ[i].append(j)
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {n: WHITE for n in nodes}
    parent = {}
    for start in sorted(nodes, key=str):
        if color[start] != WHITE:
            continue
        stack = [(start, iter(sorted(succ[start], key=str)))]
        color[start] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for nxt in it:
                if color[nxt] == GRAY:
                    # unwind the gray path to report the cycle
                    cycle = [nxt, node]
                    cur = node
                    while cur != nxt:
                        cur = parent[cur]
                        cycle.append(cur)
                    cycle.reverse()
                    return cycle
                if color[nxt] == WHITE:
                    color[nxt] = GRAY
                    parent[nxt] = node
                    stack.append((nxt, iter(sorted(succ[nxt], key=str))))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return None


def occluder_set(graph: OcclusionGraph, i) -> set:
    """Objects directly occluding object i."""
    return graph.occluders_of(i)


def layer_assignment(graph: OcclusionGraph) -> dict:
    """Assign each object its occlusion layer.

    Layer is 1 for unoccluded objects, otherwise 1 + max layer over the
    occluder set, computed by memoized recursion over the DAG.
    """
    occluders = {n: graph.occluders_of(n) for n in graph.nodes}
    layers: dict = {}
    # iterative worklist to avoid recursion limits on long chains
    for n in graph.nodes:
        stack = [n]
        while stack:
            cur = stack[-1]
            if cur in layers:
                stack.pop()
                continue
            pending = [j for j in occluders[cur] if j not in layers]
            if pending:
                stack.extend(pending)
            else:
                s = occluders[cur]
                layers[cur] = 1 if not s else 1 + max(layers[j] for j in s)
                stack.pop()
    return layers


def cumulative_mask(masks: dict, layers: dict, target_layer: int) -> np.ndarray:
    """Union of all masks strictly shallower than target_layer.

    Empty mask for target_layer == 1 (no prior occlusion).
    """
    if target_layer < 1:
        raise ValueError(f"target_layer must be >= 1, got {target_layer}")
    missing = set(masks) - set(layers)
    if missing:
        raise KeyError(f"layer map missing object ids: {sorted(map(str, missing))}")
    shapes = {as_mask(m).shape for m in masks.values()}
    if len(shapes) > 1:
        raise ValueError(f"masks disagree on shape: {sorted(shapes)}")
    if not masks:
        raise ValueError("cumulative_mask needs at least one mask to fix the raster shape")
    shape = next(iter(shapes))
    cm = np.zeros(shape, dtype=bool)
    for oid, m in masks.items():
        if layers[oid] < target_layer:
            cm |= as_mask(m)
    return cm


def layer_union_masks(scene) -> list:
    """Per-layer union masks for a scene: entry k-1 is the union of all
    amodal masks assigned layer k. List length equals the deepest layer."""
    layers = scene.layers
    max_layer = max(layers.values())
    h, w = scene.objects[0].amodal_mask.shape
    unions = [np.zeros((h, w), dtype=bool) for _ in range(max_layer)]
    for obj in scene.objects:
        unions[layers[obj.object_id] - 1] |= obj.amodal_mask
    return unions
