import numpy as np
import pytest

from graph_store import (
    GraphFormatError,
    TextAttributedGraph,
    build_graph,
    generate_synthetic_tag,
    induced_subgraph,
    load_tag,
    save_tag,
    whole_graph_subgraph,
)


def edge_set(src, dst, local_to_global=None):
    if local_to_global is not None:
        src, dst = local_to_global[src], local_to_global[dst]
    return sorted(zip(np.asarray(src).tolist(), np.asarray(dst).tolist()))


class TestLoadTag:
    def test_single_edge_is_symmetrized(self, graph_files):
        paths = graph_files([{"id": 0, "text": "a"}, {"id": 1, "text": "b"}], [{"src": 0, "dst": 1}])
        graph = load_tag(*paths)
        assert graph.csr_targets.tolist() == [1, 0]
        assert graph.csr_offsets.tolist() == [0, 1, 2]

    def test_single_node_without_edges(self, graph_files):
        graph = load_tag(*graph_files([{"id": 0, "text": "a"}], []))
        assert graph.num_nodes == 1
        assert graph.csr_offsets.tolist() == [0, 0]
        assert len(graph.csr_targets) == 0

    def test_dangling_endpoint(self, graph_files):
        nodes = [{"id": i, "text": str(i)} for i in range(3)]
        paths = graph_files(nodes, [{"src": 0, "dst": 5}])
        with pytest.raises(GraphFormatError, match="dangling endpoint") as info:
            load_tag(*paths)
        assert info.value.line == 1

    def test_duplicate_node_id(self, graph_files):
        paths = graph_files([{"id": 0, "text": "a"}, {"id": 0, "text": "b"}], [])
        with pytest.raises(GraphFormatError, match="duplicate node id"):
            load_tag(*paths)

    def test_malformed_record_reports_line(self, graph_files, tmp_path):
        nodes_path, edges_path, _ = graph_files([{"id": 0, "text": "a"}], [])
        with open(nodes_path, "a", encoding="utf-8") as f:
            f.write("{not json\n")
        with pytest.raises(GraphFormatError, match=r"nodes\.jsonl:2"):
            load_tag(nodes_path, edges_path)

    def test_sparse_ids_are_remapped(self, graph_files):
        nodes = [{"id": 40, "text": "x", "label": "p"}, {"id": 7, "text": "y", "label": "q"}]
        paths = graph_files(nodes, [{"src": 40, "dst": 7, "text": "rel"}], {"train": [40], "test": [7]})
        graph = load_tag(*paths)
        assert graph.original_ids.tolist() == [7, 40]
        assert graph.node_texts == ("y", "x")
        assert graph.labels == {0: "q", 1: "p"}
        assert graph.splits == {"train": (1,), "test": (0,)}
        assert graph.edge_texts == ("rel", "rel")
        assert graph.dense_id(40) == 1

    def test_both_directions_deduplicated(self, graph_files):
        nodes = [{"id": i, "text": str(i)} for i in range(2)]
        paths = graph_files(nodes, [{"src": 0, "dst": 1}, {"src": 1, "dst": 0}])
        assert load_tag(*paths).num_entries == 2

    def test_overlapping_splits_rejected(self, graph_files):
        nodes = [{"id": i, "text": str(i)} for i in range(2)]
        paths = graph_files(nodes, [], {"train": [0, 1], "test": [1]})
        with pytest.raises(GraphFormatError, match="both"):
            load_tag(*paths)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_tag(tmp_path / "nodes.jsonl", tmp_path / "edges.jsonl")


class TestEdgeSplits:
    NODES = [{"id": 10, "text": "a"}, {"id": 20, "text": "b"}, {"id": 30, "text": "c"}]
    EDGES = [{"src": 10, "dst": 20, "text": "r"}, {"src": 20, "dst": 30, "text": "s"}]

    def test_pairs_map_to_dense_ids(self, graph_files):
        graph = load_tag(*graph_files(self.NODES, self.EDGES, {"train": [[10, 20]], "valid": [], "test": [[30, 20]]}))
        assert graph.edge_splits == {"train": ((0, 1),), "test": ((1, 2),)}
        assert graph.splits == {"valid": ()}

    def test_entry_that_is_neither_node_nor_pair(self, graph_files):
        paths = graph_files(self.NODES, self.EDGES, {"train": [[10, 20, 30]]})
        with pytest.raises(GraphFormatError, match=r"split 'train' entry \[10, 20, 30\]"):
            load_tag(*paths)
        paths = graph_files(self.NODES, self.EDGES, {"test": ["10"]})
        with pytest.raises(GraphFormatError, match="split 'test' entry"):
            load_tag(*paths)

    def test_mixed_split(self, graph_files):
        paths = graph_files(self.NODES, self.EDGES, {"train": [10, [20, 30]]})
        with pytest.raises(GraphFormatError, match="mixes"):
            load_tag(*paths)

    def test_pair_must_be_an_edge(self, graph_files):
        paths = graph_files(self.NODES, self.EDGES, {"train": [[10, 30]]})
        with pytest.raises(GraphFormatError, match="not an edge"):
            load_tag(*paths)

    def test_pair_with_unknown_node(self, graph_files):
        paths = graph_files(self.NODES, self.EDGES, {"train": [[10, 99]]})
        with pytest.raises(GraphFormatError, match="unknown node 99"):
            load_tag(*paths)

    def test_overlapping_edge_splits(self, graph_files):
        paths = graph_files(self.NODES, self.EDGES, {"train": [[10, 20]], "test": [[20, 10]]})
        with pytest.raises(GraphFormatError, match="both"):
            load_tag(*paths)

    def test_round_trip(self, graph_files, tmp_path):
        graph = load_tag(*graph_files(self.NODES, self.EDGES, {"train": [[20, 30]], "valid": [], "test": [[10, 20]]}))
        paths = (tmp_path / "out_n.jsonl", tmp_path / "out_e.jsonl", tmp_path / "out_s.json")
        save_tag(graph, *paths)
        loaded = load_tag(*paths)
        assert loaded.edge_splits == graph.edge_splits
        assert loaded.splits == graph.splits


class TestGraphInvariants:
    def test_asymmetric_csr_rejected(self):
        with pytest.raises(GraphFormatError, match="symmetric"):
            TextAttributedGraph(np.array([0, 1, 1]), np.array([1]), ("a", "b"))

    def test_offsets_must_cover_targets(self):
        with pytest.raises(GraphFormatError):
            TextAttributedGraph(np.array([0, 1, 1]), np.array([1, 0]), ("a", "b"))

    def test_self_loops_dropped(self):
        graph = build_graph(["a", "b"], [(0, 0), (0, 1)])
        assert graph.num_entries == 2

    def test_arrays_are_read_only(self, path_graph):
        with pytest.raises(ValueError):
            path_graph.csr_targets[0] = 2


class TestNeighbors:
    def test_path_middle(self, path_graph):
        assert path_graph.neighbors(1).tolist() == [0, 2]

    def test_isolated_node(self):
        graph = build_graph(["a", "b", "c"], [(0, 1)])
        assert graph.neighbors(2).tolist() == []

    def test_star_center(self, star_graph):
        assert star_graph.neighbors(0).tolist() == [1, 2, 3]

    def test_out_of_range(self, path_graph):
        with pytest.raises(IndexError):
            path_graph.neighbors(3)


class TestInducedSubgraph:
    def test_triangle_pair(self, triangle_graph):
        sub = induced_subgraph(triangle_graph, {0, 1}, 0)
        assert sub.num_nodes == 2
        assert len(sub.csr_targets) == 2

    def test_full_node_set_is_identity(self, triangle_graph):
        for anchor in range(3):
            sub = induced_subgraph(triangle_graph, range(3), anchor)
            src, dst = sub.edge_index()
            assert edge_set(src, dst, sub.local_to_global) == edge_set(*triangle_graph.edge_index())
            assert sub.anchor_global == anchor

    def test_path_endpoints_have_no_edges(self, path_graph):
        sub = induced_subgraph(path_graph, {0, 2}, 2)
        assert sub.local_to_global.tolist() == [0, 2]
        assert len(sub.csr_targets) == 0
        assert sub.anchor_local == 1

    def test_anchor_must_be_in_set(self, path_graph):
        with pytest.raises(ValueError, match="anchor"):
            induced_subgraph(path_graph, {0, 1}, 2)

    def test_edges_map_to_parent(self, synthetic_graph):
        nodes = set(range(0, 150, 3))
        sub = induced_subgraph(synthetic_graph, nodes, 0)
        parent = set(edge_set(*synthetic_graph.edge_index()))
        src, dst = sub.edge_index()
        local = edge_set(src, dst, sub.local_to_global)
        assert set(local) <= parent
        expected = [e for e in sorted(parent) if e[0] in nodes and e[1] in nodes]
        assert local == expected
        parent_src, parent_dst = synthetic_graph.edge_index()
        assert np.array_equal(parent_dst[sub.edge_ids], sub.local_to_global[dst])

    def test_whole_graph(self, path_graph):
        sub = whole_graph_subgraph(path_graph)
        assert sub.anchor_local is None
        assert sub.csr_targets.tolist() == path_graph.csr_targets.tolist()
        assert sub.csr_targets.flags.writeable


class TestSyntheticTag:
    def test_shape(self):
        graph = generate_synthetic_tag(3, 50, 0.1, 0.01, seed=7)
        assert graph.num_nodes == 150
        assert set(graph.labels.values()) == {"0", "1", "2"}
        sizes = {name: len(ids) for name, ids in graph.splits.items()}
        assert sizes == {"train": 90, "valid": 30, "test": 30}

    def test_same_seed_same_graph(self):
        first = generate_synthetic_tag(3, 20, 0.2, 0.02, seed=3)
        second = generate_synthetic_tag(3, 20, 0.2, 0.02, seed=3)
        assert first.csr_offsets.tobytes() == second.csr_offsets.tobytes()
        assert first.csr_targets.tobytes() == second.csr_targets.tobytes()
        assert first.node_texts == second.node_texts
        assert first.splits == second.splits

    def test_edgeless(self):
        graph = generate_synthetic_tag(2, 10, 0.0, 0.0, seed=1)
        assert graph.num_entries == 0

    def test_probabilities_clamped(self):
        graph = generate_synthetic_tag(2, 5, 3.0, -1.0, seed=1)
        # complete within classes, nothing across
        assert graph.num_entries == 2 * 2 * (5 * 4 // 2)

    def test_texts_carry_class_words(self, synthetic_graph):
        for v in range(0, 150, 17):
            label = synthetic_graph.labels[v]
            assert any(word.startswith(f"c{label}w") for word in synthetic_graph.node_texts[v].split())


def test_round_trip(tmp_path, synthetic_graph):
    paths = (tmp_path / "n.jsonl", tmp_path / "e.jsonl", tmp_path / "s.json")
    save_tag(synthetic_graph, *paths)
    loaded = load_tag(*paths)
    assert np.array_equal(loaded.csr_offsets, synthetic_graph.csr_offsets)
    assert np.array_equal(loaded.csr_targets, synthetic_graph.csr_targets)
    assert loaded.node_texts == synthetic_graph.node_texts
    assert loaded.labels == synthetic_graph.labels
    assert loaded.splits == synthetic_graph.splits


def test_adjacency_matches_csr(star_graph):
    dense = star_graph.adjacency().toarray()
    assert np.array_equal(dense, dense.T)
    assert dense.sum() == star_graph.num_entries
