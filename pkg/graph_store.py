#!/usr/bin/env python3
"""
Text-attributed graph storage.

Graphs are held as immutable symmetrized CSR arrays with one raw text per node,
optional text per directed CSR entry, optional labels and optional splits over
nodes or edge pairs.
Input files are JSON Lines (nodes, edges) plus a JSON splits object; input node
ids may be arbitrary integers and are remapped to dense 0..n-1.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp


LOGGER = logging.getLogger("graph_store")

SPLIT_NAMES: Sequence[str] = ("train", "valid", "test")


class GraphFormatError(ValueError):
    """Raised for malformed or inconsistent graph input."""

    def __init__(self, message: str, path: Optional[Path] = None, line: Optional[int] = None):
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
        self.path = path
        self.line = line


@dataclass(frozen=True, eq=False)
class TextAttributedGraph:
    """Immutable symmetrized CSR graph with node (and optional edge) texts."""

    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    node_texts: Tuple[str, ...]
    edge_texts: Optional[Tuple[str, ...]] = None
    labels: Optional[Dict[int, str]] = None
    splits: Optional[Dict[str, Tuple[int, ...]]] = None
    original_ids: Optional[np.ndarray] = None
    edge_splits: Optional[Dict[str, Tuple[Tuple[int, int], ...]]] = None

    def __post_init__(self) -> None:
        offsets = np.asarray(self.csr_offsets, dtype=np.int64)
        targets = np.asarray(self.csr_targets, dtype=np.int64)
        offsets.setflags(write=False)
        targets.setflags(write=False)
        object.__setattr__(self, "csr_offsets", offsets)
        object.__setattr__(self, "csr_targets", targets)
        if self.original_ids is None:
            original = np.arange(len(self.node_texts), dtype=np.int64)
        else:
            original = np.asarray(self.original_ids, dtype=np.int64)
        original.setflags(write=False)
        object.__setattr__(self, "original_ids", original)
        self._validate()

    def _validate(self) -> None:
        n = len(self.node_texts)
        offsets, targets = self.csr_offsets, self.csr_targets
        if offsets.ndim != 1 or len(offsets) != n + 1:
            raise GraphFormatError(f"csr_offsets must have length {n + 1}, got {len(offsets)}")
        if offsets[0] != 0 or np.any(np.diff(offsets) < 0):
            raise GraphFormatError("csr_offsets must start at 0 and be nondecreasing")
        if offsets[-1] != len(targets):
            raise GraphFormatError("csr_offsets[num_nodes] must equal len(csr_targets)")
        if len(targets) and (targets.min() < 0 or targets.max() >= n):
            raise GraphFormatError("csr_targets contains an out-of-range node id")
        if self.edge_texts is not None and len(self.edge_texts) != len(targets):
            raise GraphFormatError("edge_texts must align with csr_targets")
        if len(self.original_ids) != n:
            raise GraphFormatError("original_ids must have one entry per node")
        if len(targets):
            src = np.repeat(np.arange(n, dtype=np.int64), np.diff(offsets))
            forward = set(zip(src.tolist(), targets.tolist()))
            for u, v in forward:
                if (v, u) not in forward:
                    raise GraphFormatError(f"adjacency is not symmetric: ({u}, {v}) has no reverse entry")
        if self.labels is not None:
            for node in self.labels:
                if not 0 <= node < n:
                    raise GraphFormatError(f"label for unknown node {node}")
        if self.splits is not None:
            seen: Dict[int, str] = {}
            for name, ids in self.splits.items():
                for node in ids:
                    if not 0 <= node < n:
                        raise GraphFormatError(f"split '{name}' references unknown node {node}")
                    if node in seen:
                        raise GraphFormatError(f"node {node} is in both '{seen[node]}' and '{name}' splits")
                    seen[node] = name
        if self.edge_splits is not None:
            seen_edges: Dict[Tuple[int, int], str] = {}
            for name, pairs in self.edge_splits.items():
                for u, v in pairs:
                    if not (0 <= u < n and 0 <= v < n):
                        raise GraphFormatError(f"split '{name}' references unknown node in edge ({u}, {v})")
                    if u >= v or v not in targets[offsets[u]:offsets[u + 1]]:
                        raise GraphFormatError(f"split '{name}' references ({u}, {v}), which is not an edge")
                    if (u, v) in seen_edges:
                        raise GraphFormatError(
                            f"edge ({u}, {v}) is in both '{seen_edges[(u, v)]}' and '{name}' splits"
                        )
                    seen_edges[(u, v)] = name

    @property
    def num_nodes(self) -> int:
        return len(self.node_texts)

    @property
    def num_entries(self) -> int:
        """Number of directed CSR entries (twice the undirected edge count)."""
        return len(self.csr_targets)

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    def degree(self, v: int) -> int:
        self._check_node(v)
        return int(self.csr_offsets[v + 1] - self.csr_offsets[v])

    def neighbors(self, v: int) -> np.ndarray:
        """Sorted neighbor ids of `v` (a read-only view into the CSR)."""
        self._check_node(v)
        return self.csr_targets[self.csr_offsets[v]:self.csr_offsets[v + 1]]

    def edge_index(self) -> Tuple[np.ndarray, np.ndarray]:
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), self.degrees)
        return src, self.csr_targets

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.num_entries, dtype=np.float64)
        return sp.csr_matrix(
            (data, self.csr_targets, self.csr_offsets),
            shape=(self.num_nodes, self.num_nodes),
        )

    def label_of(self, v: int) -> Optional[str]:
        if self.labels is None:
            return None
        return self.labels.get(v)

    def dense_id(self, original_id: int) -> int:
        index = int(np.searchsorted(self.original_ids, original_id))
        if index >= self.num_nodes or self.original_ids[index] != original_id:
            raise IndexError(f"unknown node id {original_id}")
        return index

    def _check_node(self, v: int) -> None:
        if not 0 <= v < self.num_nodes:
            raise IndexError(f"node id {v} out of range [0, {self.num_nodes})")


@dataclass(frozen=True, eq=False)
class ContextSubgraph:
    """Induced subgraph over a node set, with local ids in ascending global order.

    `edge_ids[i]` is the parent CSR entry of local entry i. `anchor_local` is
    None for whole-graph subgraphs, where every node is an anchor.
    """

    local_to_global: np.ndarray
    anchor_local: Optional[int]
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    edge_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def num_nodes(self) -> int:
        return len(self.local_to_global)

    @property
    def anchor_global(self) -> Optional[int]:
        if self.anchor_local is None:
            return None
        return int(self.local_to_global[self.anchor_local])

    def edge_index(self) -> Tuple[np.ndarray, np.ndarray]:
        src = np.repeat(np.arange(self.num_nodes, dtype=np.int64), np.diff(self.csr_offsets))
        return src, self.csr_targets


def build_graph(
    node_texts: Sequence[str],
    edges: Iterable[Tuple[int, int]],
    edge_text_map: Optional[Mapping[Tuple[int, int], str]] = None,
    labels: Optional[Dict[int, str]] = None,
    splits: Optional[Dict[str, Tuple[int, ...]]] = None,
    original_ids: Optional[np.ndarray] = None,
    edge_splits: Optional[Dict[str, Tuple[Tuple[int, int], ...]]] = None,
) -> TextAttributedGraph:
    """Build a symmetrized graph from dense-id edges.

    Edge directions are deduplicated before symmetrization; an edge text given
    on either direction is replicated to both CSR entries. Self-loops are dropped.
    """
    n = len(node_texts)
    pairs: Dict[Tuple[int, int], Optional[str]] = {}
    dropped = 0
    for u, v in edges:
        if u == v:
            dropped += 1
            continue
        key = (min(u, v), max(u, v))
        if key not in pairs:
            pairs[key] = None
        if edge_text_map is not None and pairs[key] is None:
            pairs[key] = edge_text_map.get((u, v), edge_text_map.get((v, u)))
    if dropped:
        LOGGER.warning("Dropped %s self-loop edge(s)", dropped)

    keys = sorted(pairs)
    src = np.array([a for a, b in keys] + [b for a, b in keys], dtype=np.int64)
    dst = np.array([b for a, b in keys] + [a for a, b in keys], dtype=np.int64)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    if len(src):
        offsets[1:] = np.cumsum(np.bincount(src, minlength=n))

    edge_texts = None
    if edge_text_map is not None:
        texts = [pairs[(min(a, b), max(a, b))] or "" for a, b in zip(src.tolist(), dst.tolist())]
        edge_texts = tuple(texts)

    return TextAttributedGraph(
        csr_offsets=offsets,
        csr_targets=dst,
        node_texts=tuple(node_texts),
        edge_texts=edge_texts,
        labels=labels,
        splits=splits,
        original_ids=original_ids,
        edge_splits=edge_splits,
    )


def read_jsonl(path: Path) -> List[Tuple[int, dict]]:
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise GraphFormatError(f"malformed record: {exc.msg}", path, line_number) from exc
            if not isinstance(record, dict):
                raise GraphFormatError("malformed record: expected a JSON object", path, line_number)
            records.append((line_number, record))
    return records


def _require_int(record: dict, key: str, path: Path, line: int) -> int:
    value = record.get(key)
    if isinstance(value, bool) or not isinstance(value, int):
        raise GraphFormatError(f"malformed record: '{key}' must be an integer", path, line)
    return value


def load_tag(
    nodes_path: Path,
    edges_path: Path,
    splits_path: Optional[Path] = None,
) -> TextAttributedGraph:
    """Load and validate a graph from nodes/edges JSON Lines and optional splits JSON."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)

    node_records: Dict[int, Tuple[str, Optional[str]]] = {}
    for line, record in read_jsonl(nodes_path):
        node_id = _require_int(record, "id", nodes_path, line)
        text = record.get("text")
        if not isinstance(text, str):
            raise GraphFormatError("malformed record: 'text' must be a string", nodes_path, line)
        label = record.get("label")
        if label is not None and not isinstance(label, str):
            raise GraphFormatError("malformed record: 'label' must be a string", nodes_path, line)
        if node_id in node_records:
            raise GraphFormatError(f"duplicate node id {node_id}", nodes_path, line)
        node_records[node_id] = (text, label)

    original_ids = np.array(sorted(node_records), dtype=np.int64)
    dense = {int(orig): i for i, orig in enumerate(original_ids.tolist())}
    node_texts = [node_records[orig][0] for orig in original_ids.tolist()]
    labels = {
        dense[orig]: label for orig, (_, label) in node_records.items() if label is not None
    }

    edges: List[Tuple[int, int]] = []
    edge_text_map: Dict[Tuple[int, int], str] = {}
    for line, record in read_jsonl(edges_path):
        src = _require_int(record, "src", edges_path, line)
        dst = _require_int(record, "dst", edges_path, line)
        for endpoint in (src, dst):
            if endpoint not in dense:
                raise GraphFormatError(f"dangling endpoint {endpoint}", edges_path, line)
        text = record.get("text")
        if text is not None:
            if not isinstance(text, str):
                raise GraphFormatError("malformed record: 'text' must be a string", edges_path, line)
            edge_text_map.setdefault((dense[src], dense[dst]), text)
        edges.append((dense[src], dense[dst]))

    splits = edge_splits = None
    if splits_path is not None:
        splits, edge_splits = _load_splits(Path(splits_path), dense)

    graph = build_graph(
        node_texts,
        edges,
        edge_text_map=edge_text_map or None,
        labels=labels or None,
        splits=splits,
        original_ids=original_ids,
        edge_splits=edge_splits,
    )
    LOGGER.info(
        "Loaded graph with %s nodes and %s undirected edges from %s",
        graph.num_nodes, graph.num_entries // 2, nodes_path.parent,
    )
    return graph


def _is_node_id(value: object) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _load_splits(
    path: Path, dense: Mapping[int, int]
) -> Tuple[Optional[Dict[str, Tuple[int, ...]]], Optional[Dict[str, Tuple[Tuple[int, int], ...]]]]:
    """Node-id splits and edge-pair splits; a single split holds one kind only."""
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise GraphFormatError(f"malformed splits file: {exc.msg}", path, exc.lineno) from exc
    if not isinstance(raw, dict):
        raise GraphFormatError("splits file must hold a JSON object", path)
    splits: Dict[str, Tuple[int, ...]] = {}
    edge_splits: Dict[str, Tuple[Tuple[int, int], ...]] = {}
    for name, entries in raw.items():
        if name not in SPLIT_NAMES:
            raise GraphFormatError(f"unknown split '{name}'", path)
        if not isinstance(entries, list):
            raise GraphFormatError(f"split '{name}' must be a list", path)
        nodes, pairs = [], []
        for entry in entries:
            if _is_node_id(entry):
                if entry not in dense:
                    raise GraphFormatError(f"split '{name}' references unknown node {entry}", path)
                nodes.append(dense[entry])
            elif isinstance(entry, list) and len(entry) == 2 and all(_is_node_id(x) for x in entry):
                for node in entry:
                    if node not in dense:
                        raise GraphFormatError(f"split '{name}' references unknown node {node}", path)
                u, v = dense[entry[0]], dense[entry[1]]
                pairs.append((min(u, v), max(u, v)))
            else:
                raise GraphFormatError(
                    f"split '{name}' entry {json.dumps(entry)} is neither a node id nor a [src, dst] pair", path
                )
        if nodes and pairs:
            raise GraphFormatError(f"split '{name}' mixes node ids and edge pairs", path)
        if pairs:
            edge_splits[name] = tuple(sorted(set(pairs)))
        else:
            splits[name] = tuple(sorted(nodes))
    return splits or None, edge_splits or None


def save_tag(
    graph: TextAttributedGraph,
    nodes_path: Path,
    edges_path: Path,
    splits_path: Optional[Path] = None,
) -> None:
    """Write a graph in the JSON Lines layout read by `load_tag` (one record per undirected edge)."""
    nodes_path, edges_path = Path(nodes_path), Path(edges_path)
    nodes_path.parent.mkdir(parents=True, exist_ok=True)
    ids = graph.original_ids.tolist()

    with open(nodes_path, "w", encoding="utf-8") as f:
        for v, text in enumerate(graph.node_texts):
            record = {"id": ids[v], "text": text}
            label = graph.label_of(v)
            if label is not None:
                record["label"] = label
            f.write(json.dumps(record, ensure_ascii=False) + "\n")

    src, dst = graph.edge_index()
    with open(edges_path, "w", encoding="utf-8") as f:
        for entry, (u, v) in enumerate(zip(src.tolist(), dst.tolist())):
            if u >= v:
                continue
            record = {"src": ids[u], "dst": ids[v]}
            if graph.edge_texts is not None:
                record["text"] = graph.edge_texts[entry]
            f.write(json.dumps(record, ensure_ascii=False) + "\n")

    if splits_path is not None and (graph.splits or graph.edge_splits):
        payload = {name: [ids[v] for v in members] for name, members in (graph.splits or {}).items()}
        for name, pairs in (graph.edge_splits or {}).items():
            payload[name] = [[ids[u], ids[v]] for u, v in pairs]
        with open(splits_path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2)


def induced_subgraph(
    graph: TextAttributedGraph,
    node_set: Iterable[int],
    anchor: Optional[int],
) -> ContextSubgraph:
    """Subgraph with exactly the edges of `graph` whose endpoints are both in `node_set`.

    Pass anchor=None to build a subgraph in which every node is an anchor.
    """
    nodes = np.array(sorted(set(int(v) for v in node_set)), dtype=np.int64)
    if len(nodes) and (nodes[0] < 0 or nodes[-1] >= graph.num_nodes):
        raise IndexError("node_set contains an out-of-range node id")
    anchor_local = None
    if anchor is not None:
        position = int(np.searchsorted(nodes, anchor))
        if position >= len(nodes) or nodes[position] != anchor:
            raise ValueError(f"anchor {anchor} is not in the node set")
        anchor_local = position

    local = np.full(graph.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes), dtype=np.int64)
    offsets = np.zeros(len(nodes) + 1, dtype=np.int64)
    targets: List[np.ndarray] = []
    edge_ids: List[np.ndarray] = []
    for i, u in enumerate(nodes.tolist()):
        start, stop = graph.csr_offsets[u], graph.csr_offsets[u + 1]
        mapped = local[graph.csr_targets[start:stop]]
        keep = mapped >= 0
        targets.append(mapped[keep])
        edge_ids.append(np.arange(start, stop, dtype=np.int64)[keep])
        offsets[i + 1] = offsets[i] + int(keep.sum())

    empty = np.zeros(0, dtype=np.int64)
    return ContextSubgraph(
        local_to_global=nodes,
        anchor_local=anchor_local,
        csr_offsets=offsets,
        csr_targets=np.concatenate(targets) if targets else empty,
        edge_ids=np.concatenate(edge_ids) if edge_ids else empty,
    )


def whole_graph_subgraph(graph: TextAttributedGraph) -> ContextSubgraph:
    return ContextSubgraph(
        local_to_global=np.arange(graph.num_nodes, dtype=np.int64),
        anchor_local=None,
        csr_offsets=graph.csr_offsets.copy(),
        csr_targets=graph.csr_targets.copy(),
        edge_ids=np.arange(graph.num_entries, dtype=np.int64),
    )


def default_vocab_words(num_classes: int, words_per_class: int = 20, noise_words: int = 20) -> List[str]:
    """Synthetic word list: `num_classes` class blocks followed by a shared noise block."""
    words = [f"c{c}w{i:02d}" for c in range(num_classes) for i in range(words_per_class)]
    words += [f"noise{i:02d}" for i in range(noise_words)]
    return words


def generate_synthetic_tag(
    num_classes: int,
    nodes_per_class: int,
    intra_p: float,
    inter_p: float,
    vocab_words: Optional[Sequence[str]] = None,
    seed: int = 0,
    words_per_node: int = 12,
    noise_ratio: float = 0.25,
) -> TextAttributedGraph:
    """Stochastic block model graph whose node texts are class-specific word bags.

    The last block of `vocab_words` (one share of num_classes + 1) is shared
    noise; the rest is split evenly across classes. Labels are the class index
    as a string; splits are a per-class 60/20/20 partition.
    """
    if num_classes < 1 or nodes_per_class < 1:
        raise ValueError("num_classes and nodes_per_class must be positive")
    intra_p = float(np.clip(intra_p, 0.0, 1.0))
    inter_p = float(np.clip(inter_p, 0.0, 1.0))
    noise_ratio = float(np.clip(noise_ratio, 0.0, 1.0))
    if vocab_words is None:
        vocab_words = default_vocab_words(num_classes)
    block = len(vocab_words) // (num_classes + 1)
    if block < 1:
        raise ValueError(f"need at least {num_classes + 1} vocab words to partition across classes")
    class_words = [list(vocab_words[c * block:(c + 1) * block]) for c in range(num_classes)]
    noise_pool = list(vocab_words[num_classes * block:])

    rng = np.random.default_rng(seed)
    n = num_classes * nodes_per_class
    classes = np.repeat(np.arange(num_classes), nodes_per_class)

    same = classes[:, None] == classes[None, :]
    probs = np.where(same, intra_p, inter_p)
    draws = rng.random((n, n))
    upper = np.triu(draws < probs, k=1)
    rows, cols = np.nonzero(upper)

    texts = []
    num_noise = int(round(words_per_node * noise_ratio))
    for v in range(n):
        words = list(rng.choice(class_words[classes[v]], size=words_per_node - num_noise))
        words += list(rng.choice(noise_pool, size=num_noise))
        rng.shuffle(words)
        texts.append(" ".join(words))

    splits: Dict[str, List[int]] = {name: [] for name in SPLIT_NAMES}
    for c in range(num_classes):
        members = rng.permutation(np.nonzero(classes == c)[0]).tolist()
        n_train = int(round(0.6 * len(members)))
        n_valid = int(round(0.2 * len(members)))
        splits["train"] += members[:n_train]
        splits["valid"] += members[n_train:n_train + n_valid]
        splits["test"] += members[n_train + n_valid:]

    return build_graph(
        texts,
        zip(rows.tolist(), cols.tolist()),
        labels={v: str(int(classes[v])) for v in range(n)},
        splits={name: tuple(sorted(ids)) for name, ids in splits.items()},
    )
