#!/usr/bin/env python3
"""
Encoder-only inference and task readouts.

Only the LM and the online GNN are used: texts are tokenized without masking,
[CLS] rows are propagated over the contextual subgraph, and the GNN outputs
are the node embeddings. Readouts turn them into node, edge or graph vectors.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from gnn_propagator import EdgeFeatureTable, encode_edge_features, gnn_forward
from graph_store import ContextSubgraph, TextAttributedGraph
from ppr_sampler import LEVELS, ContextSampler, PprParams, contextual_subgraphs_for_task
from pretrainer import ModelState
from text_encoder import lm_forward, tokenize


LOGGER = logging.getLogger("embedder")


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    node_ids: np.ndarray

    def __post_init__(self) -> None:
        self.rows = np.asarray(self.rows)
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        if self.rows.ndim != 2 or len(self.rows) != len(self.node_ids):
            raise ValueError("rows must be a matrix aligned with node_ids")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("embeddings contain non-finite values")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def row_index(self, node_id: int) -> int:
        matches = np.nonzero(self.node_ids == node_id)[0]
        if len(matches) == 0:
            raise KeyError(f"node {node_id} has no embedding row")
        return int(matches[0])

    def row_of(self, node_id: int) -> np.ndarray:
        return self.rows[self.row_index(node_id)]


@dataclass(frozen=True)
class AnchorSpec:
    level: str
    anchors: tuple = ()

    def __post_init__(self) -> None:
        if self.level not in LEVELS:
            raise ValueError(f"Unknown level: {self.level}")
        expected = {"node": 1, "edge": 2}.get(self.level)
        if expected is not None and len(self.anchors) != expected:
            raise ValueError(f"{self.level} level expects {expected} anchor(s), got {len(self.anchors)}")


def _edge_inputs(state: ModelState, graph: TextAttributedGraph) -> Optional[EdgeFeatureTable]:
    if not state.config.use_edge_features or graph.edge_texts is None:
        return None
    return encode_edge_features(state.model.lm, state.vocab, graph)


@torch.no_grad()
def node_cls_matrix(state: ModelState, graph: TextAttributedGraph, nodes: Sequence[int], batch_size: int = 256) -> torch.Tensor:
    """Unmasked LM [CLS] rows for `nodes`, in the given order."""
    max_len = state.config.max_len
    chunks = []
    for start in range(0, len(nodes), batch_size):
        batch = [tokenize(state.vocab, graph.node_texts[v], max_len) for v in nodes[start:start + batch_size]]
        chunks.append(lm_forward(state.model.lm, batch).cls)
    return torch.cat(chunks)


@torch.no_grad()
def embed_nodes(
    state: ModelState,
    sub: ContextSubgraph,
    graph: TextAttributedGraph,
    edge_feats: Optional[EdgeFeatureTable] = None,
    pre_gnn: bool = False,
) -> EmbeddingMatrix:
    """GNN-propagated [CLS] embeddings for every node of `sub` (LM [CLS] when pre_gnn or the model has no GNN)."""
    model = state.model
    was_training = model.training
    model.eval()
    try:
        cls = node_cls_matrix(state, graph, sub.local_to_global.tolist())
        propagate = state.config.use_gnn and not pre_gnn
        rows = gnn_forward(model, sub, cls, edge_feats) if propagate else cls
    finally:
        model.train(was_training)
    return EmbeddingMatrix(rows=rows.cpu().numpy(), node_ids=sub.local_to_global.copy())


def readout(level: str, embeddings: Sequence[EmbeddingMatrix], anchors: AnchorSpec) -> np.ndarray:
    """node: the anchor row; edge: [h_v || h_u]; graph: column mean."""
    if level != anchors.level:
        raise ValueError(f"readout level {level} does not match anchor level {anchors.level}")
    if level == "node":
        if len(embeddings) != 1:
            raise ValueError("node readout expects one embedding matrix")
        return embeddings[0].row_of(anchors.anchors[0]).copy()
    if level == "edge":
        if len(embeddings) != 2:
            raise ValueError("edge readout expects two embedding matrices")
        v, u = anchors.anchors
        return np.concatenate([embeddings[0].row_of(v), embeddings[1].row_of(u)])
    if len(embeddings) != 1:
        raise ValueError("graph readout expects one embedding matrix")
    return embeddings[0].rows.mean(axis=0)


def unified_embedding(
    state: ModelState,
    graph: TextAttributedGraph,
    anchors: AnchorSpec,
    ppr: PprParams,
    edge_feats: Optional[EdgeFeatureTable] = None,
) -> np.ndarray:
    """Sample the task's contextual subgraph(s), embed each, and read out one vector."""
    if edge_feats is None:
        edge_feats = _edge_inputs(state, graph)
    cfg = state.config
    subgraphs = contextual_subgraphs_for_task(
        graph, list(anchors.anchors), anchors.level, ppr, cfg.sampler, cfg.sampler_hops
    )
    embeddings = [embed_nodes(state, sub, graph, edge_feats) for sub in subgraphs]
    return readout(anchors.level, embeddings, anchors)


@torch.no_grad()
def embed_all_nodes(
    state: ModelState,
    graph: TextAttributedGraph,
    ppr: PprParams,
    nodes: Optional[Sequence[int]] = None,
    pre_gnn: bool = False,
) -> EmbeddingMatrix:
    """Node-level embedding of each node inside its own PPR context.

    The LM [CLS] row of every node is computed once and shared by all the
    subgraphs that contain it.
    """
    nodes = list(range(graph.num_nodes)) if nodes is None else list(nodes)
    model = state.model
    was_training = model.training
    model.eval()
    try:
        cls = node_cls_matrix(state, graph, list(range(graph.num_nodes)))
        if pre_gnn or not state.config.use_gnn:
            rows = cls[torch.as_tensor(nodes, dtype=torch.long)]
        else:
            edge_feats = _edge_inputs(state, graph)
            sampler = ContextSampler(graph, ppr, state.config.sampler, state.config.sampler_hops)
            out = []
            for v in nodes:
                sub = sampler.subgraph(v)
                local = gnn_forward(model, sub, cls[torch.as_tensor(sub.local_to_global, dtype=torch.long)], edge_feats)
                out.append(local[sub.anchor_local])
            rows = torch.stack(out) if out else cls.new_zeros((0, cls.shape[1]))
    finally:
        model.train(was_training)
    LOGGER.info("Embedded %s node(s) (%s)", len(nodes), "GNN" if state.config.use_gnn and not pre_gnn else "pre-GNN")
    return EmbeddingMatrix(rows=rows.cpu().numpy(), node_ids=np.asarray(nodes, dtype=np.int64))


def parameter_checksum(state: ModelState) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(state.model.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def write_embeddings_tsv(embeddings: EmbeddingMatrix, path: Path, id_map: Optional[np.ndarray] = None) -> None:
    """`#dim=<d>` header, then `node_id<TAB>f1 f2 ... fd` with 9 significant digits.

    `id_map` translates dense row ids back to input ids (TextAttributedGraph.original_ids).
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ids = embeddings.node_ids if id_map is None else np.asarray(id_map)[embeddings.node_ids]
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"#dim={embeddings.dim}\n")
        for node_id, row in zip(ids.tolist(), embeddings.rows.tolist()):
            f.write(f"{node_id}\t" + " ".join(format(x, ".9g") for x in row) + "\n")


def read_embeddings_tsv(path: Path) -> EmbeddingMatrix:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embedding file not found: {path}")
    ids: List[int] = []
    rows: List[List[float]] = []
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#dim="):
                dim = int(line[len("#dim="):])
                continue
            node_id, _, values = line.partition("\t")
            row = [float(x) for x in values.split()]
            if dim is not None and len(row) != dim:
                raise ValueError(f"{path}:{line_number}: expected {dim} values, got {len(row)}")
            ids.append(int(node_id))
            rows.append(row)
    if dim is None:
        raise ValueError(f"{path}: missing '#dim=' header")
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    return EmbeddingMatrix(rows=matrix, node_ids=np.asarray(ids, dtype=np.int64))
