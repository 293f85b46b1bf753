#!/usr/bin/env python3
"""
Personalized PageRank sampling of contextual subgraphs.

Scores are computed with forward push (local push over a residual vector), so
the cost of one anchor depends on its neighborhood, not on the graph size.
A breadth-first neighbor sampler with the same node budget is the alternative.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Sequence

import numpy as np
import scipy.sparse as sp

from graph_store import ContextSubgraph, TextAttributedGraph, induced_subgraph, whole_graph_subgraph


LOGGER = logging.getLogger("ppr_sampler")

LEVELS: Sequence[str] = ("node", "edge", "graph")
SAMPLERS: Sequence[str] = ("ppr", "neighbor")


@dataclass(frozen=True)
class PprParams:
    alpha: float = 0.15
    epsilon: float = 1e-6
    topk: int = 128

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if not self.epsilon > 0.0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.topk < 1:
            raise ValueError(f"topk must be at least 1, got {self.topk}")


@dataclass
class PprScores:
    """Sparse PPR estimate for one anchor, with the final push residuals."""

    anchor: int
    entries: Dict[int, float]
    residuals: Dict[int, float] = field(default_factory=dict)
    degrees: Dict[int, int] = field(default_factory=dict)

    def score(self, v: int) -> float:
        return self.entries.get(v, 0.0)

    def max_residual_ratio(self) -> float:
        """max r(u)/deg(u) over nodes with leftover residual (0 when none)."""
        ratios = [r / self.degrees[u] for u, r in self.residuals.items() if r > 0 and self.degrees.get(u)]
        return max(ratios, default=0.0)

    def ranked(self) -> List[int]:
        """Node ids by descending score, ascending id on ties."""
        return sorted(self.entries, key=lambda v: (-self.entries[v], v))


def approximate_ppr(graph: TextAttributedGraph, anchor: int, params: PprParams) -> PprScores:
    """Forward push from `anchor` until every residual r(u) < epsilon * deg(u).

    Pushes run in FIFO order; neighbors are visited in ascending id order.
    """
    if not 0 <= anchor < graph.num_nodes:
        raise IndexError(f"anchor {anchor} out of range [0, {graph.num_nodes})")
    offsets = graph.csr_offsets.tolist()
    targets = graph.csr_targets.tolist()
    if offsets[anchor + 1] == offsets[anchor]:
        return PprScores(anchor=anchor, entries={anchor: 1.0})

    alpha, epsilon = params.alpha, params.epsilon
    p: Dict[int, float] = {}
    r: Dict[int, float] = {anchor: 1.0}
    queue = deque([anchor])
    queued = {anchor}
    pushes = 0

    while queue:
        u = queue.popleft()
        queued.discard(u)
        start, stop = offsets[u], offsets[u + 1]
        deg = stop - start
        residual = r.get(u, 0.0)
        if residual < epsilon * deg:
            continue
        p[u] = p.get(u, 0.0) + alpha * residual
        r[u] = 0.0
        share = (1.0 - alpha) * residual / deg
        pushes += 1
        if share == 0.0:
            continue
        for w in targets[start:stop]:
            value = r.get(w, 0.0) + share
            r[w] = value
            if w not in queued and value >= epsilon * (offsets[w + 1] - offsets[w]):
                queue.append(w)
                queued.add(w)

    LOGGER.debug("PPR from %s: %s pushes, %s touched nodes", anchor, pushes, len(r))
    entries = {v: s for v, s in p.items() if s > 0.0}
    degrees = {u: offsets[u + 1] - offsets[u] for u in r}
    return PprScores(anchor=anchor, entries=entries, residuals=r, degrees=degrees)


def power_iteration_ppr(
    graph: TextAttributedGraph,
    anchor: int,
    alpha: float,
    tol: float = 1e-13,
    max_iter: int = 100_000,
) -> np.ndarray:
    """Dense reference: iterate pi = alpha * e_anchor + (1 - alpha) * P^T pi to a fixed point."""
    degrees = graph.degrees.astype(np.float64)
    inv = np.divide(1.0, degrees, out=np.zeros_like(degrees), where=degrees > 0)
    transition = sp.diags(inv) @ graph.adjacency()
    transition_t = transition.T.tocsr()
    teleport = np.zeros(graph.num_nodes)
    teleport[anchor] = 1.0
    pi = teleport.copy()
    for _ in range(max_iter):
        updated = alpha * teleport + (1.0 - alpha) * (transition_t @ pi)
        if np.abs(updated - pi).max() < tol:
            return updated
        pi = updated
    LOGGER.warning("Power iteration did not converge within %s iterations", max_iter)
    return pi


def top_k_context(scores: PprScores, anchor: int, k: int) -> FrozenSet[int]:
    """The anchor plus the k highest-scoring other nodes (ties by ascending id)."""
    others = [v for v in scores.ranked() if v != anchor]
    return frozenset([anchor, *others[:k]])


def neighbor_context(graph: TextAttributedGraph, anchor: int, k: int, hops: int) -> FrozenSet[int]:
    """The anchor plus up to k nodes within `hops` hops, nearer hops first, ascending id within a hop."""
    if not 0 <= anchor < graph.num_nodes:
        raise IndexError(f"anchor {anchor} out of range [0, {graph.num_nodes})")
    chosen = [anchor]
    seen = {anchor}
    frontier = [anchor]
    for _ in range(hops):
        ring = sorted({w for u in frontier for w in graph.neighbors(u).tolist()} - seen)
        if not ring:
            break
        chosen += ring[:k + 1 - len(chosen)]
        if len(chosen) > k:
            break
        seen.update(ring)
        frontier = ring
    return frozenset(chosen)


def context_nodes(
    graph: TextAttributedGraph,
    anchor: int,
    params: PprParams,
    method: str = "ppr",
    hops: int = 2,
) -> FrozenSet[int]:
    """Context node set of one anchor; both methods keep at most `params.topk` other nodes."""
    if method == "ppr":
        return top_k_context(approximate_ppr(graph, anchor, params), anchor, params.topk)
    if method == "neighbor":
        return neighbor_context(graph, anchor, params.topk, hops)
    raise ValueError(f"Unknown sampler: {method} (expected one of {', '.join(SAMPLERS)})")


def contextual_subgraph(
    graph: TextAttributedGraph,
    anchor: int,
    params: PprParams,
    method: str = "ppr",
    hops: int = 2,
) -> ContextSubgraph:
    return induced_subgraph(graph, context_nodes(graph, anchor, params, method, hops), anchor)


def contextual_subgraphs_for_task(
    graph: TextAttributedGraph,
    anchors: Sequence[int],
    level: str,
    params: PprParams,
    method: str = "ppr",
    hops: int = 2,
) -> List[ContextSubgraph]:
    """Node: one subgraph. Edge: one per endpoint, in anchor order. Graph: the whole graph."""
    if level == "node":
        if len(anchors) != 1:
            raise ValueError(f"node level expects 1 anchor, got {len(anchors)}")
        return [contextual_subgraph(graph, anchors[0], params, method, hops)]
    if level == "edge":
        if len(anchors) != 2:
            raise ValueError(f"edge level expects 2 anchors, got {len(anchors)}")
        return [contextual_subgraph(graph, v, params, method, hops) for v in anchors]
    if level == "graph":
        return [whole_graph_subgraph(graph)]
    raise ValueError(f"Unknown level: {level} (expected one of {', '.join(LEVELS)})")


class ContextSampler:
    """Caches per-anchor context node sets over one immutable graph.

    `method` is "ppr" (top-k by personalized PageRank) or "neighbor" (the
    first k nodes of a breadth-first walk limited to `hops`).
    """

    def __init__(self, graph: TextAttributedGraph, params: PprParams, method: str = "ppr", hops: int = 2):
        if method not in SAMPLERS:
            raise ValueError(f"Unknown sampler: {method} (expected one of {', '.join(SAMPLERS)})")
        if hops < 1:
            raise ValueError(f"hops must be at least 1, got {hops}")
        self.graph = graph
        self.params = params
        self.method = method
        self.hops = hops
        self._contexts: Dict[int, FrozenSet[int]] = {}

    def context(self, anchor: int) -> FrozenSet[int]:
        nodes = self._contexts.get(anchor)
        if nodes is None:
            nodes = context_nodes(self.graph, anchor, self.params, self.method, self.hops)
            self._contexts[anchor] = nodes
        return nodes

    def subgraph(self, anchor: int) -> ContextSubgraph:
        return induced_subgraph(self.graph, self.context(anchor), anchor)

    def batch_subgraph(self, anchors: Sequence[int]) -> ContextSubgraph:
        """Union of the anchors' contexts with induced edges; anchored at the first anchor."""
        if not anchors:
            raise ValueError("empty anchor batch")
        union = set()
        for anchor in anchors:
            union.update(self.context(anchor))
        return induced_subgraph(self.graph, union, anchors[0])
