#!/usr/bin/env python3
"""
Instruction-tuning dataset export.

Renders the per-domain classification prompts around graph embeddings. Each
prompt carries `<node_v>` / `<node_u>` markers where a downstream consumer
splices in projected embeddings. `embedding_rows` index the companion
embedding TSV: every `<node_v>` is the first row. In node prompts the
neighbor `<node_u>` markers take the remaining rows in order; in edge
prompts every `<node_u>` is the second row.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from embedder import AnchorSpec, EmbeddingMatrix
from graph_store import TextAttributedGraph
from ppr_sampler import PprParams, approximate_ppr


LOGGER = logging.getLogger("instruct_export")

NODE_V = "<node_v>"
NODE_U = "<node_u>"

_PLACEHOLDER = re.compile(r"\{([A-Z_]+)\}")
_SENTENCE_END = re.compile(r"(?<=[.!?])\s+")

_NEIGHBOR_CLAUSE = "{NODE_V} and its contextual neighbor nodes {NEIGHBORS} are highly correlated. "
_QUESTION = "Question: Which category should {NODE_V} be classified as? "


@dataclass(frozen=True)
class PromptTemplate:
    domain: str
    level: str
    body: str
    required: Tuple[str, ...]

    def __post_init__(self) -> None:
        present = set(_PLACEHOLDER.findall(self.body))
        missing = [name for name in self.required if name not in present]
        if missing:
            raise ValueError(f"template '{self.domain}' is missing placeholder(s): {', '.join(missing)}")
        if not self.body.endswith("Answer: "):
            raise ValueError(f"template '{self.domain}' must end with 'Answer: '")


TEMPLATES: Dict[str, PromptTemplate] = {
    "citation": PromptTemplate(
        domain="citation",
        level="node",
        body=(
            "Given a citation graph, node represents academic paper with a specific topic. "
            "{NODE_V} is featured with its content: {TITLE}, {ABSTRACT}. "
            + _NEIGHBOR_CLAUSE + _QUESTION
            + "Please strictly classify the paper into one of the following categories:[{CANDIDATE_LABELS}].  Answer: "
        ),
        required=("NODE_V", "NEIGHBORS", "TITLE", "ABSTRACT", "CANDIDATE_LABELS"),
    ),
    "products": PromptTemplate(
        domain="products",
        level="node",
        body=(
            "Given a products graph, node represents a product sold in Amazon with a specific category. "
            "{NODE_V} is featured with its content: {CONTENT}. "
            + _NEIGHBOR_CLAUSE + _QUESTION
            + "Please strictly classify the product into one of the following categories:[{CANDIDATE_LABELS}].  Answer: "
        ),
        required=("NODE_V", "NEIGHBORS", "CONTENT", "CANDIDATE_LABELS"),
    ),
    "web": PromptTemplate(
        domain="web",
        level="node",
        body=(
            "Given a Wikipedia graph, node represents Wikipedia page with a specific category. "
            "{NODE_V} is featured with its content: {NAME},{CONTENT}. "
            + _NEIGHBOR_CLAUSE + _QUESTION
            + "Please strictly classify the Wikipedia page into one of the following categories:[{CANDIDATE_LABELS}].  Answer: "
        ),
        required=("NODE_V", "NEIGHBORS", "NAME", "CONTENT", "CANDIDATE_LABELS"),
    ),
    "knowledge": PromptTemplate(
        domain="knowledge",
        level="edge",
        body=(
            "Given a knowledge graph, edge between two entities represents a relation with a specific category. "
            "Node one {NODE_V} is featured with its content: {NAME},{CONTENT}. "
            "Node two {NODE_U} is featured with its content: {NAME_U},{CONTENT_U}. "
            "Question: Which category should the relation between node one {NODE_V} and node two {NODE_U} "
            "be classified as? "
            "Please strictly classify the relation into one of the following categories:[{CANDIDATE_LABELS}].  Answer: "
        ),
        required=("NODE_V", "NODE_U", "NAME", "CONTENT", "NAME_U", "CONTENT_U", "CANDIDATE_LABELS"),
    ),
}


def get_template(domain: str) -> PromptTemplate:
    if domain not in TEMPLATES:
        raise ValueError(f"Unknown template domain: {domain} (expected one of {', '.join(TEMPLATES)})")
    return TEMPLATES[domain]


def split_title_abstract(text: str) -> Tuple[str, str]:
    """First line is the title; without a line break, the first sentence is."""
    text = text.strip()
    if "\n" in text:
        title, rest = text.split("\n", 1)
        return title.strip(), " ".join(rest.split())
    parts = _SENTENCE_END.split(text, maxsplit=1)
    if len(parts) == 2:
        return parts[0].strip(), parts[1].strip()
    return text, ""


def _substitute(body: str, values: Mapping[str, str]) -> str:
    def replace(match: re.Match) -> str:
        name = match.group(1)
        if name not in values:
            raise ValueError(f"no value for placeholder {{{name}}}")
        return values[name]

    return _PLACEHOLDER.sub(replace, body)


def neighbor_markers(count: int) -> str:
    return "{" + "; ".join([NODE_U] * count) + "}"


def render_prompt(
    template: PromptTemplate,
    graph: TextAttributedGraph,
    anchors: AnchorSpec,
    candidate_labels: Sequence[str],
    neighbors: Sequence[int] = (),
) -> str:
    """Fill a template for `anchors` (dense ids). `neighbors` are the already-capped contextual nodes."""
    if not candidate_labels:
        raise ValueError("candidate_labels must be nonempty")
    if anchors.level != template.level:
        raise ValueError(
            f"template '{template.domain}' needs a {template.level}-level anchor spec, got {anchors.level}"
        )
    for v in anchors.anchors:
        if not 0 <= v < graph.num_nodes:
            raise IndexError(f"node id {v} out of range [0, {graph.num_nodes})")

    text_v = graph.node_texts[anchors.anchors[0]]
    name_v, content_v = split_title_abstract(text_v)
    values = {
        "NODE_V": NODE_V,
        "NEIGHBORS": neighbor_markers(len(neighbors)),
        "TITLE": name_v,
        "ABSTRACT": content_v,
        "NAME": name_v,
        "CONTENT": text_v.strip() if template.domain == "products" else content_v,
        "CANDIDATE_LABELS": ", ".join(candidate_labels),
    }
    if template.level == "edge":
        name_u, content_u = split_title_abstract(graph.node_texts[anchors.anchors[1]])
        values.update({"NODE_U": NODE_U, "NAME_U": name_u, "CONTENT_U": content_u})
    return _substitute(template.body, values)


@dataclass
class InstructionRecord:
    prompt: str
    embedding_rows: List[int]
    target: str
    embedding: Optional[List[List[float]]] = None

    def to_dict(self) -> dict:
        payload = {"prompt": self.prompt, "embedding_rows": self.embedding_rows, "target": self.target}
        if self.embedding is not None:
            payload["embedding"] = self.embedding
        return payload


def _ranked_neighbors(graph: TextAttributedGraph, anchor: int, ppr: PprParams, cap: int) -> List[int]:
    if cap <= 0:
        return []
    ranked = [v for v in approximate_ppr(graph, anchor, ppr).ranked() if v != anchor]
    return ranked[:min(cap, ppr.topk)]


def _edge_examples(
    graph: TextAttributedGraph,
    split_ids: Sequence[int],
    split_edges: Optional[Sequence[Tuple[int, int]]] = None,
) -> List[Tuple[int, int, str]]:
    """Labeled undirected edges; the edge text is the relation label.

    With `split_edges` the listed pairs are used as given, otherwise every edge
    whose lower endpoint is in `split_ids`.
    """
    if graph.edge_texts is None:
        raise ValueError("edge-level export needs edge texts as relation labels")
    src, dst = graph.edge_index()
    entries = {(u, v): entry for entry, (u, v) in enumerate(zip(src.tolist(), dst.tolist())) if u < v}
    if split_edges is not None:
        chosen = []
        for u, v in split_edges:
            key = (min(u, v), max(u, v))
            if key not in entries:
                raise ValueError(f"({u}, {v}) is not an edge of the graph")
            chosen.append(key)
    else:
        members = set(split_ids)
        chosen = [key for key in entries if key[0] in members]
    examples = []
    for u, v in sorted(chosen):
        label = graph.edge_texts[entries[(u, v)]]
        if not label:
            raise ValueError(f"edge ({u}, {v}) has no relation label")
        examples.append((u, v, label))
    return examples


def build_records(
    graph: TextAttributedGraph,
    embeddings: EmbeddingMatrix,
    split_ids: Sequence[int],
    template: PromptTemplate,
    ppr: PprParams,
    neighbor_cap: int = 8,
    inline: bool = False,
    split_edges: Optional[Sequence[Tuple[int, int]]] = None,
) -> List[InstructionRecord]:
    """One record per anchor in ascending id order.

    `embeddings.node_ids` are input ids (as written to the embedding TSV);
    `split_ids` and `split_edges` are dense ids. Edge-level templates use
    `split_edges` when the split lists edge pairs.
    """

    def row(v: int) -> int:
        return embeddings.row_index(int(graph.original_ids[v]))

    def attach(record: InstructionRecord) -> InstructionRecord:
        if inline:
            record.embedding = [embeddings.rows[r].tolist() for r in record.embedding_rows]
        return record

    records: List[InstructionRecord] = []
    if template.level == "edge":
        examples = _edge_examples(graph, split_ids, split_edges)
        candidates = sorted({label for _, _, label in examples})
        for u, v, label in examples:
            prompt = render_prompt(template, graph, AnchorSpec("edge", (u, v)), candidates)
            records.append(attach(InstructionRecord(prompt, [row(u), row(v)], label)))
        return records

    anchors = sorted(set(int(v) for v in split_ids))
    targets = {}
    for v in anchors:
        label = graph.label_of(v)
        if label is None:
            raise ValueError(f"anchor {int(graph.original_ids[v])} has no label")
        targets[v] = label
    candidates = sorted(set((graph.labels or {}).values()))
    for v in anchors:
        neighbors = _ranked_neighbors(graph, v, ppr, neighbor_cap)
        prompt = render_prompt(template, graph, AnchorSpec("node", (v,)), candidates, neighbors)
        rows = [row(v)] + [row(u) for u in neighbors]
        records.append(attach(InstructionRecord(prompt, rows, targets[v])))
    return records


def emit_instruction_dataset(
    graph: TextAttributedGraph,
    embeddings: EmbeddingMatrix,
    split_ids: Sequence[int],
    template: PromptTemplate,
    out_path: Path,
    ppr: PprParams = PprParams(),
    neighbor_cap: int = 8,
    inline: bool = False,
    split_edges: Optional[Sequence[Tuple[int, int]]] = None,
) -> int:
    """Write the JSON Lines dataset and return the record count."""
    records = build_records(graph, embeddings, split_ids, template, ppr, neighbor_cap, inline, split_edges)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), ensure_ascii=False) + "\n")
    LOGGER.info("Wrote %s %s instruction record(s) to %s", len(records), template.domain, out_path)
    return len(records)
