import numpy as np
import pytest

from embedder import (
    AnchorSpec,
    EmbeddingMatrix,
    embed_all_nodes,
    embed_nodes,
    parameter_checksum,
    read_embeddings_tsv,
    readout,
    unified_embedding,
    write_embeddings_tsv,
)
from graph_store import build_graph, generate_synthetic_tag, whole_graph_subgraph
from ppr_sampler import PprParams
from pretrainer import PretrainConfig, init_state
from text_encoder import build_vocab


PPR = PprParams(topk=8)


@pytest.fixture(scope="module")
def graph():
    return generate_synthetic_tag(3, 8, 0.4, 0.05, seed=2)


@pytest.fixture(scope="module")
def state(graph):
    cfg = PretrainConfig(hidden_size=16, lm_layers=1, lm_heads=2, gnn_heads=2, num_gnn_layers=2, max_len=16, vocab_size=80)
    return init_state(build_vocab(list(graph.node_texts), cfg.vocab_size), cfg)


class TestReadout:
    def matrix(self):
        return EmbeddingMatrix(rows=np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]), node_ids=np.array([4, 7, 9]))

    def test_node(self):
        assert readout("node", [self.matrix()], AnchorSpec("node", (7,))).tolist() == [3.0, 4.0]

    def test_edge_concatenates_in_anchor_order(self):
        m = self.matrix()
        assert readout("edge", [m, m], AnchorSpec("edge", (9, 4))).tolist() == [5.0, 6.0, 1.0, 2.0]

    def test_graph_mean(self):
        assert readout("graph", [self.matrix()], AnchorSpec("graph")).tolist() == [3.0, 4.0]

    def test_level_mismatch(self):
        with pytest.raises(ValueError):
            readout("edge", [self.matrix()], AnchorSpec("node", (4,)))

    def test_missing_node(self):
        with pytest.raises(KeyError):
            readout("node", [self.matrix()], AnchorSpec("node", (5,)))

    def test_anchor_arity(self):
        with pytest.raises(ValueError):
            AnchorSpec("edge", (1,))
        with pytest.raises(ValueError):
            AnchorSpec("cluster")

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            EmbeddingMatrix(rows=np.array([[np.nan]]), node_ids=np.array([0]))


class TestUnifiedEmbedding:
    def test_lengths(self, graph, state):
        assert unified_embedding(state, graph, AnchorSpec("node", (3,)), PPR).shape == (16,)
        assert unified_embedding(state, graph, AnchorSpec("edge", (3, 11)), PPR).shape == (32,)
        assert unified_embedding(state, graph, AnchorSpec("graph"), PPR).shape == (16,)

    def test_graph_is_mean_of_whole_graph_rows(self, graph, state):
        vector = unified_embedding(state, graph, AnchorSpec("graph"), PPR)
        rows = embed_nodes(state, whole_graph_subgraph(graph), graph).rows
        np.testing.assert_allclose(vector, rows.mean(axis=0), rtol=0, atol=1e-6)

    def test_edge_swap_swaps_halves(self, graph, state):
        forward = unified_embedding(state, graph, AnchorSpec("edge", (2, 20)), PPR)
        backward = unified_embedding(state, graph, AnchorSpec("edge", (20, 2)), PPR)
        np.testing.assert_allclose(forward[:16], backward[16:], rtol=0, atol=1e-6)
        np.testing.assert_allclose(forward[16:], backward[:16], rtol=0, atol=1e-6)
        assert not np.allclose(forward, backward)

    def test_node_matches_batch_embedding(self, graph, state):
        batch = embed_all_nodes(state, graph, PPR, nodes=[0, 5, 17])
        for v in (0, 5, 17):
            single = unified_embedding(state, graph, AnchorSpec("node", (v,)), PPR)
            np.testing.assert_allclose(batch.row_of(v), single, rtol=0, atol=1e-5)

    def test_inference_leaves_parameters_untouched(self, graph, state):
        before = parameter_checksum(state)
        state.model.train()
        unified_embedding(state, graph, AnchorSpec("graph"), PPR)
        embed_all_nodes(state, graph, PPR, nodes=[1, 2])
        assert parameter_checksum(state) == before
        assert state.model.training

    def test_deterministic(self, graph, state):
        first = embed_all_nodes(state, graph, PPR)
        second = embed_all_nodes(state, graph, PPR)
        assert np.array_equal(first.rows, second.rows)
        assert first.node_ids.tolist() == list(range(graph.num_nodes))

    def test_pre_gnn_rows_skip_propagation(self, graph, state):
        pre = embed_all_nodes(state, graph, PPR, pre_gnn=True)
        direct = embed_nodes(state, whole_graph_subgraph(graph), graph, pre_gnn=True)
        np.testing.assert_allclose(pre.rows, direct.rows, rtol=0, atol=1e-6)

    def test_graph_readout_ignores_node_order(self, graph, state):
        perm = np.random.default_rng(4).permutation(graph.num_nodes)
        position = np.argsort(perm)
        src, dst = graph.edge_index()
        relabeled = build_graph(
            [graph.node_texts[v] for v in perm.tolist()],
            [(int(position[u]), int(position[v])) for u, v in zip(src.tolist(), dst.tolist())],
        )
        original = unified_embedding(state, graph, AnchorSpec("graph"), PPR)
        shuffled = unified_embedding(state, relabeled, AnchorSpec("graph"), PPR)
        np.testing.assert_allclose(original, shuffled, rtol=0, atol=1e-5)

    def test_model_without_gnn_exports_lm_rows(self, graph):
        cfg = PretrainConfig(
            hidden_size=16, lm_layers=1, lm_heads=2, gnn_heads=2, num_gnn_layers=2, max_len=16, vocab_size=80,
            use_gnn=False,
        )
        plain = init_state(build_vocab(list(graph.node_texts), cfg.vocab_size), cfg)
        rows = embed_all_nodes(plain, graph, PPR)
        pre = embed_all_nodes(plain, graph, PPR, pre_gnn=True)
        np.testing.assert_array_equal(rows.rows, pre.rows)
        single = unified_embedding(plain, graph, AnchorSpec("node", (4,)), PPR)
        np.testing.assert_allclose(single, pre.row_of(4), rtol=0, atol=1e-5)

    def test_neighbor_sampler_from_config(self, graph):
        cfg = PretrainConfig(
            hidden_size=16, lm_layers=1, lm_heads=2, gnn_heads=2, num_gnn_layers=2, max_len=16, vocab_size=80,
            sampler="neighbor", sampler_hops=1,
        )
        walked = init_state(build_vocab(list(graph.node_texts), cfg.vocab_size), cfg)
        batch = embed_all_nodes(walked, graph, PPR, nodes=[0, 9])
        for v in (0, 9):
            single = unified_embedding(walked, graph, AnchorSpec("node", (v,)), PPR)
            np.testing.assert_allclose(batch.row_of(v), single, rtol=0, atol=1e-5)

    def test_isolated_node(self, state):
        lonely = build_graph(["c0w1 c0w2", "c1w1 c1w2"], [])
        vector = unified_embedding(state, lonely, AnchorSpec("node", (1,)), PPR)
        assert np.all(np.isfinite(vector))


class TestEmbeddingsTsv:
    def test_write_then_read(self, tmp_path):
        matrix = EmbeddingMatrix(rows=np.array([[0.5, -1.25], [1e-3, 2.0]]), node_ids=np.array([0, 1]))
        path = tmp_path / "emb.tsv"
        write_embeddings_tsv(matrix, path, id_map=np.array([40, 7]))
        lines = path.read_text().splitlines()
        assert lines[0] == "#dim=2"
        assert lines[1] == "40\t0.5 -1.25"
        loaded = read_embeddings_tsv(path)
        assert loaded.node_ids.tolist() == [40, 7]
        np.testing.assert_allclose(loaded.rows, matrix.rows)

    def test_wrong_width(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("#dim=3\n0\t1 2\n")
        with pytest.raises(ValueError, match="expected 3 values"):
            read_embeddings_tsv(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "bad.tsv"
        path.write_text("0\t1 2\n")
        with pytest.raises(ValueError, match="#dim="):
            read_embeddings_tsv(path)
