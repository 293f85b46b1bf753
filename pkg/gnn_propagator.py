#!/usr/bin/env python3
"""
GAT-style message passing over node [CLS] vectors.

Every node attends over its neighbors plus a self-loop; head outputs are
averaged so each layer maps width d to width d. When edge vectors are given,
a neighbor message is the transformed neighbor state multiplied elementwise
by the edge vector (the self-loop message is left unscaled).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple, Type

import torch
import torch.nn.functional as F
from torch import nn

from graph_store import ContextSubgraph, TextAttributedGraph
from text_encoder import TextEncoder, Vocab, lm_forward, tokenize

if TYPE_CHECKING:
    from pretrainer import UniGraphModel


LOGGER = logging.getLogger("gnn_propagator")

ACTIVATIONS: Dict[str, Type[nn.Module]] = {
    "elu": nn.ELU,
    "relu": nn.ReLU,
    "gelu": nn.GELU,
    "tanh": nn.Tanh,
    "identity": nn.Identity,
}


@dataclass(frozen=True)
class GatConfig:
    num_layers: int = 3
    d: int = 64
    num_heads: int = 4
    attention_dropout: float = 0.0
    nonlinearity: str = "elu"
    residual: bool = True
    negative_slope: float = 0.2

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be at least 1")
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} is not divisible by num_heads={self.num_heads}")
        if self.nonlinearity not in ACTIVATIONS:
            raise ValueError(f"Unknown nonlinearity: {self.nonlinearity}")


@dataclass
class EdgeFeatureTable:
    """One d-wide vector per CSR entry of a graph."""

    vectors: torch.Tensor

    @property
    def num_rows(self) -> int:
        return self.vectors.shape[0]

    def for_subgraph(self, sub: ContextSubgraph) -> torch.Tensor:
        return self.vectors[torch.as_tensor(sub.edge_ids, dtype=torch.long)]


def segment_softmax(scores: torch.Tensor, index: torch.Tensor, num_segments: int) -> torch.Tensor:
    """Softmax of `scores` (E x H) within groups of rows sharing `index`."""
    expanded = index.unsqueeze(-1).expand_as(scores)
    peak = scores.new_full((num_segments, scores.shape[1]), -math.inf)
    peak = peak.scatter_reduce(0, expanded, scores.detach(), reduce="amax", include_self=True)
    weights = torch.exp(scores - peak[index])
    totals = scores.new_zeros((num_segments, scores.shape[1])).index_add_(0, index, weights)
    return weights / totals[index]


class GatLayer(nn.Module):
    def __init__(self, config: GatConfig):
        super().__init__()
        self.num_heads = config.num_heads
        self.d = config.d
        self.residual = config.residual
        self.negative_slope = config.negative_slope
        self.linear = nn.Linear(config.d, config.num_heads * config.d, bias=False)
        self.attn_src = nn.Parameter(torch.empty(config.num_heads, config.d))
        self.attn_dst = nn.Parameter(torch.empty(config.num_heads, config.d))
        self.bias = nn.Parameter(torch.zeros(config.d))
        self.activation = ACTIVATIONS[config.nonlinearity]()
        self.dropout = nn.Dropout(config.attention_dropout)
        bound = 1.0 / math.sqrt(config.d)
        with torch.no_grad():
            for param in (self.linear.weight, self.attn_src, self.attn_dst):
                param.uniform_(-bound, bound)

    def forward(
        self,
        h: torch.Tensor,
        src: torch.Tensor,
        dst: torch.Tensor,
        edge_feats: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ):
        n = h.shape[0]
        loops = torch.arange(n, device=h.device)
        src_all = torch.cat([src, loops])
        dst_all = torch.cat([dst, loops])

        transformed = self.linear(h).view(n, self.num_heads, self.d)
        score_src = (transformed * self.attn_src).sum(-1)
        score_dst = (transformed * self.attn_dst).sum(-1)
        scores = F.leaky_relu(score_src[src_all] + score_dst[dst_all], self.negative_slope)
        attention = segment_softmax(scores, dst_all, n)

        messages = transformed[src_all]
        if edge_feats is not None:
            gate = torch.cat([edge_feats, edge_feats.new_ones((n, self.d))])
            messages = messages * gate.unsqueeze(1)
        weighted = self.dropout(attention).unsqueeze(-1) * messages
        out = h.new_zeros((n, self.num_heads, self.d)).index_add_(0, dst_all, weighted)
        out = self.activation(out.mean(dim=1) + self.bias)
        if self.residual:
            out = out + h
        if return_attention:
            return out, (src_all, dst_all, attention)
        return out


class GnnPropagator(nn.Module):
    def __init__(self, config: GatConfig):
        super().__init__()
        self.config = config
        self.layers = nn.ModuleList(GatLayer(config) for _ in range(config.num_layers))

    def forward(
        self,
        x: torch.Tensor,
        sub: ContextSubgraph,
        edge_feats: Optional[torch.Tensor] = None,
        return_attention: bool = False,
    ):
        if x.shape != (sub.num_nodes, self.config.d):
            raise ValueError(
                f"expected a {sub.num_nodes} x {self.config.d} input, got {tuple(x.shape)}"
            )
        if edge_feats is not None and edge_feats.shape != (len(sub.csr_targets), self.config.d):
            raise ValueError(
                f"expected {len(sub.csr_targets)} x {self.config.d} edge features, got {tuple(edge_feats.shape)}"
            )
        src_np, dst_np = sub.edge_index()
        src = torch.as_tensor(src_np, dtype=torch.long, device=x.device)
        dst = torch.as_tensor(dst_np, dtype=torch.long, device=x.device)
        attentions: List[Tuple[torch.Tensor, torch.Tensor, torch.Tensor]] = []
        h = x
        for layer in self.layers:
            if return_attention:
                h, attention = layer(h, src, dst, edge_feats, return_attention=True)
                attentions.append(attention)
            else:
                h = layer(h, src, dst, edge_feats)
        if return_attention:
            return h, attentions
        return h


def gnn_forward(
    model: "UniGraphModel",
    sub: ContextSubgraph,
    cls_matrix: torch.Tensor,
    edge_feats: Optional[EdgeFeatureTable] = None,
    use_target: bool = False,
) -> torch.Tensor:
    """Propagate [CLS] rows over `sub` with the online GNN, or the EMA copy when use_target."""
    edges = edge_feats.for_subgraph(sub) if edge_feats is not None else None
    if use_target:
        with torch.no_grad():
            return model.target_gnn(cls_matrix, sub, edges)
    return model.gnn(cls_matrix, sub, edges)


@torch.no_grad()
def encode_edge_features(
    encoder: TextEncoder,
    vocab: Vocab,
    graph: TextAttributedGraph,
    batch_size: int = 256,
) -> EdgeFeatureTable:
    """Run every distinct edge text through the LM once; its [CLS] row becomes the edge vector."""
    if graph.edge_texts is None:
        raise ValueError("no edge texts: the graph carries no edge text to encode")
    distinct = sorted(set(graph.edge_texts))
    position = {text: i for i, text in enumerate(distinct)}
    max_len = encoder.config.max_len

    was_training = encoder.training
    encoder.eval()
    try:
        chunks = []
        for start in range(0, len(distinct), batch_size):
            batch = [tokenize(vocab, text, max_len) for text in distinct[start:start + batch_size]]
            chunks.append(lm_forward(encoder, batch).cls)
    finally:
        encoder.train(was_training)

    table = torch.cat(chunks) if chunks else torch.zeros((0, encoder.config.d))
    index = torch.tensor([position[text] for text in graph.edge_texts], dtype=torch.long)
    LOGGER.info("Encoded %s edge texts (%s distinct)", len(graph.edge_texts), len(distinct))
    return EdgeFeatureTable(vectors=table[index])
