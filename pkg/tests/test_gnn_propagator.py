import math

import numpy as np
import pytest
import torch

from gnn_propagator import GatConfig, GnnPropagator, encode_edge_features, segment_softmax
from graph_store import build_graph, whole_graph_subgraph
from text_encoder import LmConfig, TextEncoder, build_vocab


def make_gnn(**overrides):
    torch.manual_seed(0)
    config = GatConfig(**{"num_layers": 2, "d": 8, "num_heads": 2, **overrides})
    return GnnPropagator(config).eval()


def random_graph(n, p, seed):
    rng = np.random.default_rng(seed)
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return build_graph([str(v) for v in range(n)], edges)


class TestSegmentSoftmax:
    def test_groups_sum_to_one(self):
        scores = torch.randn(7, 3)
        index = torch.tensor([0, 0, 1, 2, 2, 2, 1])
        weights = segment_softmax(scores, index, 3)
        totals = torch.zeros(3, 3).index_add_(0, index, weights)
        torch.testing.assert_close(totals, torch.ones(3, 3))

    def test_large_scores_are_stable(self):
        weights = segment_softmax(torch.tensor([[1000.0], [999.0]]), torch.tensor([0, 0]), 1)
        assert torch.isfinite(weights).all()
        assert weights[0, 0] > weights[1, 0]


class TestGnnForward:
    def test_edgeless_rows_are_independent(self):
        graph = build_graph(["a", "b", "c"], [])
        sub = whole_graph_subgraph(graph)
        gnn = make_gnn()
        x = torch.randn(3, 8)
        out = gnn(x, sub)
        x_changed = x.clone()
        x_changed[1:] = torch.randn(2, 8)
        torch.testing.assert_close(gnn(x_changed, sub)[0], out[0])

    def test_edgeless_single_layer_formula(self):
        graph = build_graph(["a", "b"], [])
        gnn = make_gnn(num_layers=1, residual=False)
        layer = gnn.layers[0]
        x = torch.randn(2, 8)
        transformed = layer.linear(x).view(2, 2, 8)
        expected = torch.nn.functional.elu(transformed.mean(dim=1) + layer.bias)
        torch.testing.assert_close(gnn(x, whole_graph_subgraph(graph)), expected)

    def test_permutation_equivariance(self):
        graph = random_graph(9, 0.35, seed=4)
        perm = np.random.default_rng(5).permutation(9)
        src, dst = graph.edge_index()
        permuted = build_graph([str(v) for v in range(9)], zip(perm[src].tolist(), perm[dst].tolist()))
        gnn = make_gnn()
        x = torch.randn(9, 8)
        x_permuted = torch.empty_like(x)
        x_permuted[torch.as_tensor(perm)] = x
        out = gnn(x, whole_graph_subgraph(graph))
        out_permuted = gnn(x_permuted, whole_graph_subgraph(permuted))
        assert (out_permuted[torch.as_tensor(perm)] - out).abs().max().item() <= 1e-5

    def test_attention_sums_to_one(self):
        graph = random_graph(10, 0.3, seed=1)
        gnn = make_gnn(num_heads=4)
        _, attentions = gnn(torch.randn(10, 8), whole_graph_subgraph(graph), return_attention=True)
        for _, dst, weights in attentions:
            totals = torch.zeros(10, 4).index_add_(0, dst, weights)
            assert (totals - 1).abs().max().item() <= 1e-6

    def test_two_node_hand_oracle(self):
        """One attention layer, one head, d=2, identity weights."""
        graph = build_graph(["a", "b"], [(0, 1)])
        gnn = make_gnn(num_layers=1, d=2, num_heads=1, nonlinearity="identity", residual=False)
        layer = gnn.layers[0]
        with torch.no_grad():
            layer.linear.weight.copy_(torch.eye(2))
            layer.attn_src.copy_(torch.tensor([[1.0, 1.0]]))
            layer.attn_dst.copy_(torch.tensor([[0.0, 1.0]]))
            layer.bias.zero_()
        h = torch.tensor([[1.0, 0.0], [0.0, 2.0]])
        out = gnn(h, whole_graph_subgraph(graph))

        # source scores a_s.h = [1, 2]; target scores a_d.h = [0, 2]; all sums positive
        w_self0, w_nb0 = math.exp(1 + 0), math.exp(2 + 0)
        w_self1, w_nb1 = math.exp(2 + 2), math.exp(1 + 2)
        row0 = [(w_self0 * 1 + w_nb0 * 0) / (w_self0 + w_nb0), (w_self0 * 0 + w_nb0 * 2) / (w_self0 + w_nb0)]
        row1 = [(w_self1 * 0 + w_nb1 * 1) / (w_self1 + w_nb1), (w_self1 * 2 + w_nb1 * 0) / (w_self1 + w_nb1)]
        torch.testing.assert_close(out, torch.tensor([row0, row1]))

    def test_unit_edge_features_are_neutral(self):
        graph = random_graph(6, 0.5, seed=2)
        sub = whole_graph_subgraph(graph)
        gnn = make_gnn()
        x = torch.randn(6, 8)
        ones = torch.ones(len(sub.csr_targets), 8)
        torch.testing.assert_close(gnn(x, sub, ones), gnn(x, sub))

    def test_shape_mismatch(self):
        graph = build_graph(["a", "b"], [(0, 1)])
        gnn = make_gnn()
        with pytest.raises(ValueError):
            gnn(torch.randn(3, 8), whole_graph_subgraph(graph))
        with pytest.raises(ValueError):
            gnn(torch.randn(2, 8), whole_graph_subgraph(graph), torch.ones(5, 8))

    def test_finite(self, synthetic_graph):
        gnn = make_gnn(num_layers=3)
        out = gnn(torch.randn(150, 8), whole_graph_subgraph(synthetic_graph))
        assert torch.isfinite(out).all()

    def test_config_validation(self):
        with pytest.raises(ValueError):
            GatConfig(num_layers=0)
        with pytest.raises(ValueError):
            GatConfig(d=10, num_heads=4)
        with pytest.raises(ValueError):
            GatConfig(nonlinearity="swish")


class TestEncodeEdgeFeatures:
    @pytest.fixture
    def lm(self):
        texts = ["cites", "cites", "extends", "cites"]
        vocab = build_vocab(texts + ["paper node"], 12)
        torch.manual_seed(0)
        encoder = TextEncoder(LmConfig(vocab_size=vocab.size, d=8, num_layers=1, num_heads=2, max_len=6))
        return encoder, vocab

    def test_rows_follow_entries(self, lm):
        encoder, vocab = lm
        edge_texts = {(0, 1): "cites", (1, 2): "extends"}
        graph = build_graph(["p", "q", "r"], list(edge_texts), edge_text_map=edge_texts)
        table = encode_edge_features(encoder, vocab, graph)
        assert table.num_rows == 4
        by_text = {}
        for row, text in zip(table.vectors, graph.edge_texts):
            if text in by_text:
                assert torch.equal(by_text[text], row)
            by_text[text] = row
        assert not torch.equal(by_text["cites"], by_text["extends"])
        assert not table.vectors.requires_grad
        assert encoder.training

    def test_missing_edge_texts(self, lm, path_graph):
        encoder, vocab = lm
        with pytest.raises(ValueError, match="no edge texts"):
            encode_edge_features(encoder, vocab, path_graph)
