#!/usr/bin/env python3
"""
Transfer evaluation over frozen embeddings.

Few-shot: N-way K-shot tasks with support drawn from the train split and
queries from the test split, classified by cosine similarity to per-class
mean prototypes. Linear probe: a full-batch linear classifier trained with
Adam and early-stopped on validation accuracy.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from embedder import EmbeddingMatrix, read_embeddings_tsv
from graph_store import SPLIT_NAMES, TextAttributedGraph, read_jsonl


LOGGER = logging.getLogger("eval_harness")


@dataclass
class LabeledEmbeddings:
    """Labeled vectors with split membership given as row indices."""

    vectors: np.ndarray
    labels: List[str]
    node_ids: np.ndarray
    splits: Dict[str, np.ndarray] = field(default_factory=dict)

    def split(self, name: str) -> Tuple[np.ndarray, List[str]]:
        rows = self.splits.get(name, np.zeros(0, dtype=np.int64))
        return self.vectors[rows], [self.labels[i] for i in rows.tolist()]


def labeled_from_graph(embeddings: EmbeddingMatrix, graph: TextAttributedGraph) -> LabeledEmbeddings:
    """Join dense-id embeddings with the graph's labels and splits (unlabeled rows dropped)."""
    if graph.labels is None:
        raise ValueError("graph has no labels")
    keep = [i for i, v in enumerate(embeddings.node_ids.tolist()) if v in graph.labels]
    node_ids = embeddings.node_ids[keep]
    position = {int(v): i for i, v in enumerate(node_ids.tolist())}
    splits = {
        name: np.array([position[v] for v in ids if v in position], dtype=np.int64)
        for name, ids in (graph.splits or {}).items()
    }
    return LabeledEmbeddings(
        vectors=embeddings.rows[keep],
        labels=[graph.labels[int(v)] for v in node_ids.tolist()],
        node_ids=node_ids,
        splits=splits,
    )


def load_labeled_embeddings(tsv_path: Path, nodes_path: Path, splits_path: Path) -> LabeledEmbeddings:
    """Join an embedding TSV with labels from a nodes JSONL file and a splits JSON file (input ids)."""
    embeddings = read_embeddings_tsv(tsv_path)
    labels: Dict[int, str] = {}
    for _, record in read_jsonl(Path(nodes_path)):
        if record.get("label") is not None:
            labels[int(record["id"])] = str(record["label"])
    with open(splits_path, "r", encoding="utf-8") as f:
        raw_splits = json.load(f)

    keep = [i for i, v in enumerate(embeddings.node_ids.tolist()) if v in labels]
    node_ids = embeddings.node_ids[keep]
    position = {int(v): i for i, v in enumerate(node_ids.tolist())}
    splits = {
        name: np.array([position[v] for v in raw_splits.get(name, []) if v in position], dtype=np.int64)
        for name in SPLIT_NAMES
    }
    LOGGER.info("Loaded %s labeled embedding(s) of width %s", len(keep), embeddings.dim)
    return LabeledEmbeddings(
        vectors=embeddings.rows[keep],
        labels=[labels[int(v)] for v in node_ids.tolist()],
        node_ids=node_ids,
        splits=splits,
    )


@dataclass
class FewShotTask:
    ways: int
    shots: int
    classes: List[str]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_rows: np.ndarray
    query_rows: np.ndarray


def sample_fewshot_tasks(
    dataset: LabeledEmbeddings,
    ways: int,
    shots: int = 3,
    num_tasks: int = 500,
    seed: int = 0,
    max_query: int = 50,
    support_split: str = "train",
    query_split: str = "test",
) -> List[FewShotTask]:
    """N classes per task, K support rows each from `support_split`, queries from `query_split`.

    Queries are every `query_split` row of the sampled classes, capped at
    `max_query` by seeded subsampling.
    """
    if ways < 1 or shots < 1 or num_tasks < 1:
        raise ValueError("ways, shots and num_tasks must be positive")
    support_pool: Dict[str, List[int]] = {}
    for row in dataset.splits.get(support_split, np.zeros(0, dtype=np.int64)).tolist():
        support_pool.setdefault(dataset.labels[row], []).append(row)
    query_pool: Dict[str, List[int]] = {}
    for row in dataset.splits.get(query_split, np.zeros(0, dtype=np.int64)).tolist():
        query_pool.setdefault(dataset.labels[row], []).append(row)
    if not query_pool:
        raise ValueError(f"the '{query_split}' split has no labeled examples")

    eligible = sorted(c for c, rows in support_pool.items() if len(rows) >= shots and c in query_pool)
    if ways > len(eligible):
        raise ValueError(
            f"{ways}-way tasks need {ways} classes with >= {shots} '{support_split}' examples "
            f"and a '{query_split}' example; only {len(eligible)} available"
        )

    rng = np.random.default_rng(seed)
    tasks = []
    for _ in range(num_tasks):
        chosen = [eligible[i] for i in rng.choice(len(eligible), size=ways, replace=False)]
        support_rows, support_y, query_rows, query_y = [], [], [], []
        for index, label in enumerate(chosen):
            picks = rng.choice(support_pool[label], size=shots, replace=False)
            support_rows += picks.tolist()
            support_y += [index] * shots
            query_rows += query_pool[label]
            query_y += [index] * len(query_pool[label])
        query_rows_arr = np.asarray(query_rows, dtype=np.int64)
        query_y_arr = np.asarray(query_y, dtype=np.int64)
        if len(query_rows_arr) > max_query:
            keep = np.sort(rng.choice(len(query_rows_arr), size=max_query, replace=False))
            query_rows_arr, query_y_arr = query_rows_arr[keep], query_y_arr[keep]
        support_rows_arr = np.asarray(support_rows, dtype=np.int64)
        if np.intersect1d(support_rows_arr, query_rows_arr).size:
            raise ValueError("support and query sets overlap; splits must be disjoint")
        tasks.append(
            FewShotTask(
                ways=ways,
                shots=shots,
                classes=chosen,
                support_x=dataset.vectors[support_rows_arr],
                support_y=np.asarray(support_y, dtype=np.int64),
                query_x=dataset.vectors[query_rows_arr],
                query_y=query_y_arr,
                support_rows=support_rows_arr,
                query_rows=query_rows_arr,
            )
        )
    return tasks


def prototype_classify(task: FewShotTask) -> Tuple[np.ndarray, float]:
    """Assign each query to the prototype with the highest cosine (lowest class index on ties)."""
    prototypes = np.stack([task.support_x[task.support_y == c].mean(axis=0) for c in range(task.ways)])
    proto_norms = np.linalg.norm(prototypes, axis=1)
    query_norms = np.linalg.norm(task.query_x, axis=1)
    dots = task.query_x @ prototypes.T
    valid = (query_norms[:, None] > 0) & (proto_norms[None, :] > 0)
    if not valid.all():
        LOGGER.warning("prototype classification: %s zero-norm pair(s) scored as -inf", int((~valid).sum()))
    with np.errstate(divide="ignore", invalid="ignore"):
        cosines = np.where(valid, dots / (query_norms[:, None] * proto_norms[None, :]), -np.inf)
    predictions = np.argmax(cosines, axis=1) if len(cosines) else np.zeros(0, dtype=np.int64)
    accuracy = float(np.mean(predictions == task.query_y)) if len(predictions) else 0.0
    return predictions, accuracy


@dataclass
class FewShotReport:
    mean: float
    std: float
    ways: int
    shots: int
    num_tasks: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "N": self.ways, "K": self.shots, "num_tasks": self.num_tasks}


def summarize_accuracies(accuracies: Sequence[float], ways: int, shots: int) -> FewShotReport:
    if not accuracies:
        raise ValueError("no task accuracies to summarize")
    values = np.asarray(accuracies, dtype=np.float64)
    std = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return FewShotReport(mean=float(values.mean()), std=std, ways=ways, shots=shots, num_tasks=len(values))


def fewshot_report(tasks: Sequence[FewShotTask]) -> FewShotReport:
    """Mean and sample standard deviation of per-task prototype accuracy."""
    if not tasks:
        raise ValueError("no few-shot tasks to evaluate")
    accuracies = [prototype_classify(task)[1] for task in tasks]
    return summarize_accuracies(accuracies, tasks[0].ways, tasks[0].shots)


@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 0.01
    epochs: int = 5000
    patience: int = 200
    eval_every: int = 10
    bias: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("lr", "epochs", "patience", "eval_every"):
            if not getattr(self, name) > 0:
                raise ValueError(f"probe {name} must be positive")


@dataclass
class ProbeResult:
    test_accuracy: float
    best_valid_accuracy: float
    best_epoch: int
    epochs_run: int
    classes: List[str]
    weight: np.ndarray
    bias: Optional[np.ndarray]
    train_losses: List[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["weight"] = self.weight.tolist()
        payload["bias"] = self.bias.tolist() if self.bias is not None else None
        payload.pop("train_losses")
        payload["final_train_loss"] = self.train_losses[-1] if self.train_losses else None
        return payload


def _encode_labels(labels: Sequence[str], index: Dict[str, int]) -> torch.Tensor:
    return torch.tensor([index.get(label, -1) for label in labels], dtype=torch.long)


def _accuracy(model: nn.Module, x: torch.Tensor, y: torch.Tensor) -> float:
    if len(y) == 0:
        return 0.0
    with torch.no_grad():
        return float((model(x).argmax(dim=1) == y).double().mean())


def linear_probe(
    train: Tuple[np.ndarray, Sequence[str]],
    valid: Tuple[np.ndarray, Sequence[str]],
    test: Tuple[np.ndarray, Sequence[str]],
    cfg: ProbeConfig = ProbeConfig(),
) -> ProbeResult:
    """Full-batch softmax regression; returns test accuracy of the best-validation weights.

    Validation is checked every `eval_every` epochs; training stops after
    `patience` checks without improvement. Ties keep the later weights.
    """
    x_train, y_train = train
    dims = {np.asarray(x).shape[1] for x, _ in (train, valid, test) if len(x)}
    if len(dims) != 1:
        raise ValueError(f"dimension mismatch across splits: {sorted(dims)}")
    classes = sorted(set(y_train))
    if len(classes) < 2:
        raise ValueError("linear probe needs at least two classes in the train split")
    index = {label: i for i, label in enumerate(classes)}
    dim = dims.pop()

    def tensors(split):
        x, y = split
        x = torch.as_tensor(np.asarray(x, dtype=np.float32).reshape(-1, dim))
        return x, _encode_labels(y, index)

    xt, yt = tensors(train)
    xv, yv = tensors(valid)
    xs, ys = tensors(test)
    if len(yv) == 0:
        xv, yv = xt, yt

    torch.manual_seed(cfg.seed)
    model = nn.Linear(dim, len(classes), bias=cfg.bias)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)

    best_acc, best_epoch = -1.0, 0
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    stale_checks = 0
    losses: List[float] = []
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        optimizer.zero_grad()
        loss = F.cross_entropy(model(xt), yt)
        loss.backward()
        optimizer.step()
        losses.append(float(loss))
        if epoch % cfg.eval_every and epoch != cfg.epochs:
            continue
        acc = _accuracy(model, xv, yv)
        if acc >= best_acc:
            best_state = {k: v.clone() for k, v in model.state_dict().items()}
            best_epoch = epoch
        if acc > best_acc:
            best_acc = acc
            stale_checks = 0
        else:
            stale_checks += 1
            if stale_checks >= cfg.patience:
                LOGGER.debug("Early stop at epoch %s (best valid %.4f at %s)", epoch, best_acc, best_epoch)
                break

    model.load_state_dict(best_state)
    test_acc = _accuracy(model, xs, ys)
    LOGGER.info("Linear probe: test accuracy %.4f (best valid %.4f at epoch %s)", test_acc, best_acc, best_epoch)
    return ProbeResult(
        test_accuracy=test_acc,
        best_valid_accuracy=best_acc,
        best_epoch=best_epoch,
        epochs_run=epoch,
        classes=classes,
        weight=model.weight.detach().numpy().copy(),
        bias=model.bias.detach().numpy().copy() if model.bias is not None else None,
        train_losses=losses,
    )


def chance_accuracy(labels: Sequence[str]) -> float:
    """Majority-class baseline."""
    if not labels:
        return 0.0
    _, counts = np.unique(np.asarray(labels), return_counts=True)
    return float(counts.max() / len(labels))


def write_report(payload: dict, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
