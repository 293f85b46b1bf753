"""Shared pytest fixtures; also puts the flat top-level modules on sys.path."""

import json
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from graph_store import build_graph, generate_synthetic_tag  # noqa: E402


def write_jsonl(path: Path, records) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


@pytest.fixture
def path_graph():
    """0 - 1 - 2"""
    return build_graph(["zero", "one", "two"], [(0, 1), (1, 2)])


@pytest.fixture
def triangle_graph():
    return build_graph(["a", "b", "c"], [(0, 1), (1, 2), (0, 2)])


@pytest.fixture
def star_graph():
    return build_graph(["hub", "x", "y", "z"], [(0, 1), (0, 2), (0, 3)])


@pytest.fixture(scope="session")
def synthetic_graph():
    return generate_synthetic_tag(3, 50, 0.1, 0.01, seed=7)


@pytest.fixture
def graph_files(tmp_path):
    """Writer for nodes/edges/splits files under tmp_path."""

    def write(nodes, edges, splits=None):
        nodes_path = write_jsonl(tmp_path / "nodes.jsonl", nodes)
        edges_path = write_jsonl(tmp_path / "edges.jsonl", edges)
        splits_path = None
        if splits is not None:
            splits_path = tmp_path / "splits.json"
            splits_path.write_text(json.dumps(splits), encoding="utf-8")
        return nodes_path, edges_path, splits_path

    return write
