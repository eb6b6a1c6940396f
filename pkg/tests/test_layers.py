import math

import numpy as np
import pytest

from hyperseg import autograd as ag
from hyperseg.errors import ShapeMismatchError
from hyperseg.graphs import (build_hypergraph, build_knn_graph,
                             hypergraph_propagator, normalized_graph_operator,
                             normalized_hypergraph_operator)
from hyperseg.layers import (ConvLayerParams, HeadParams, StageModel,
                             conv_layer_forward, dropout, mlp_head_forward,
                             propagate)
from hyperseg.sparse import SparseMatrix

from conftest import check_gradients
from test_graphs import graph_from_edges


def identity_layer(n_features):
    p = ConvLayerParams.create(np.random.default_rng(0), n_features, n_features)
    p.weight.value[...] = np.eye(n_features)
    p.bias.value[...] = 0.0
    return p


class TestConvLayer:
    def test_identity_composition(self, rng):
        # op = I, P = I, bias 0, batchnorm bypassed, X >= 0, eval mode -> Y = X
        x = rng.random((5, 4)) + 0.1
        p = identity_layer(4)
        out = conv_layer_forward(SparseMatrix.identity(5), ag.constant(x), p,
                                 "eval", rng, dropout_rate=0.5, bn=False)
        assert np.array_equal(out.value, x)

    def test_zero_operator_gives_constant_columns(self, rng):
        x = rng.random((4, 3))
        p = ConvLayerParams.create(rng, 3, 2)
        p.bias.value[...] = [0.5, -0.25]
        zero_op = SparseMatrix.from_triplets(4, 4, [], [], [])
        out = conv_layer_forward(zero_op, ag.constant(x), p, "eval", rng, bn=False)
        assert np.allclose(out.value, np.broadcast_to(
            np.where([0.5, -0.25] > np.zeros(2), [0.5, -0.25],
                     np.expm1([0.5, -0.25])), (4, 2)))
        assert (np.ptp(out.value, axis=0) == 0).all()

    def test_two_node_path_raw_propagation(self):
        g = graph_from_edges(2, [[0, 1]])
        op = normalized_graph_operator(g)
        out = propagate(op, ag.constant(np.eye(2)))
        assert np.allclose(out.value, [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)

    def test_residual_requires_matching_widths(self, rng):
        with pytest.raises(ShapeMismatchError):
            ConvLayerParams.create(rng, 3, 4, residual=True)

    def test_eval_forward_deterministic(self, rng):
        g = build_knn_graph(rng.standard_normal((6, 3)), 2)
        op = normalized_graph_operator(g)
        p = ConvLayerParams.create(rng, 3, 4)
        x = rng.standard_normal((6, 3))
        a = conv_layer_forward(op, ag.constant(x), p, "eval", rng).value
        b = conv_layer_forward(op, ag.constant(x), p, "eval", rng).value
        assert np.array_equal(a, b)

    def test_preactivation_linear_in_x(self, rng):
        # with batchnorm bypassed and zero bias the pre-activation is linear
        g = build_knn_graph(rng.standard_normal((5, 3)), 2)
        op = normalized_graph_operator(g)
        w = ag.parameter(rng.standard_normal((3, 4)))
        x1, x2 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        a, b = 1.7, -0.3

        def pre(x):
            return ag.matmul(propagate(op, ag.constant(x)), w).value

        combined = pre(a * x1 + b * x2)
        assert np.abs(combined - (a * pre(x1) + b * pre(x2))).max() < 1e-10

    def test_gradient_check_train_mode(self, rng):
        g = build_knn_graph(rng.standard_normal((7, 3)), 2)
        op = normalized_graph_operator(g)
        p = ConvLayerParams.create(rng, 3, 5)
        x = ag.parameter(rng.standard_normal((7, 3)))
        labels = rng.integers(0, 5, 7)

        def build():
            local = np.random.default_rng(99)  # frozen dropout mask
            out = conv_layer_forward(op, x, p, "train", local, dropout_rate=0.3)
            return ag.nll_loss(ag.log_softmax_rows(out), labels)[0]

        check_gradients(build, p.trainable() + [x], rng=rng)


class TestHypergraphLayer:
    def test_singleton_hypergraph_matches_identity_graph(self, rng):
        hg_identity = build_hypergraph(graph_from_edges(5, np.zeros((0, 2))), None)
        prop = hypergraph_propagator(hg_identity)
        p = ConvLayerParams.create(rng, 3, 4)
        x = rng.standard_normal((5, 3))
        via_hyper = conv_layer_forward(prop, ag.constant(x), p, "eval", rng).value
        via_graph = conv_layer_forward(SparseMatrix.identity(5), ag.constant(x),
                                       p, "eval", rng).value
        assert np.array_equal(via_hyper, via_graph)

    def test_pairwise_reduction_propagation(self, rng):
        # pairwise hypergraph propagation equals the (A+D)/2 graph operator
        emb = rng.standard_normal((10, 3))
        spatial = build_knn_graph(emb, 2)
        knn = build_knn_graph(emb + 0.1 * rng.standard_normal((10, 3)), 2)
        hg = build_hypergraph(spatial, knn, style="pairwise")
        x = rng.standard_normal((10, 4))
        via_fact = propagate(hypergraph_propagator(hg), ag.constant(x)).value
        via_mat = normalized_hypergraph_operator(hg).matmul_dense(x)
        assert np.abs(via_fact - via_mat).max() < 1e-12

    def test_gradient_through_hypergraph_layer(self, rng):
        emb = rng.standard_normal((8, 3))
        hg = build_hypergraph(build_knn_graph(emb, 2),
                              build_knn_graph(emb + 0.1, 2))
        prop = hypergraph_propagator(hg)
        p = ConvLayerParams.create(rng, 3, 4)
        x = ag.parameter(rng.standard_normal((8, 3)))
        labels = rng.integers(0, 4, 8)

        def build():
            local = np.random.default_rng(7)
            out = conv_layer_forward(prop, x, p, "train", local)
            return ag.nll_loss(ag.log_softmax_rows(out), labels)[0]

        check_gradients(build, p.trainable() + [x], rng=rng)


class TestBatchnorm:
    def test_zero_variance_column(self, rng):
        x = ag.constant(np.full((4, 2), 3.0))
        gain = ag.constant(np.array([2.0, 1.0]))
        shift = ag.constant(np.array([0.5, 0.0]))
        y, mean, var = ag.batchnorm_train(x, gain, shift)
        assert np.allclose(y.value[:, 0], 0.5)  # normalized to 0, shifted
        assert np.array_equal(mean, [3.0, 3.0])
        assert np.array_equal(var, [0.0, 0.0])

    def test_normalizes_batch(self, rng):
        x = ag.constant(rng.standard_normal((50, 4)) * 10 + 1)
        gain = ag.constant(np.ones(4))
        shift = ag.constant(np.zeros(4))
        y, _, _ = ag.batchnorm_train(x, gain, shift)
        assert np.abs(y.value.mean(axis=0)).max() < 1e-9
        assert np.abs(y.value.var(axis=0) - 1.0).max() < 1e-6

    def test_running_stats_update(self, rng):
        p = ConvLayerParams.create(rng, 3, 2)
        op = SparseMatrix.identity(6)
        x = rng.standard_normal((6, 3))
        pre = ag.add_row_vector(ag.matmul(ag.spmm(op, ag.constant(x)), p.weight),
                                p.bias).value
        conv_layer_forward(op, ag.constant(x), p, "train", rng, dropout_rate=0.0)
        assert np.allclose(p.running_mean, 0.1 * pre.mean(axis=0), atol=1e-12)
        assert np.allclose(p.running_var, 0.9 * 1.0 + 0.1 * pre.var(axis=0),
                           atol=1e-12)

    def test_train_mode_needs_two_rows(self):
        x = ag.constant(np.ones((1, 2)))
        with pytest.raises(ShapeMismatchError):
            ag.batchnorm_train(x, ag.constant(np.ones(2)), ag.constant(np.zeros(2)))


class TestDropout:
    def test_eval_mode_identity(self, rng):
        x = ag.constant(rng.random((5, 5)))
        assert dropout(x, 0.5, "eval", rng) is x

    def test_rate_zero_identity(self, rng):
        x = ag.constant(rng.random((5, 5)))
        assert dropout(x, 0.0, "train", rng) is x

    def test_fixed_seed_reproducible_mask(self, rng):
        x = ag.constant(np.ones((20, 20)))
        a = dropout(x, 0.5, "train", np.random.default_rng(3)).value
        b = dropout(x, 0.5, "train", np.random.default_rng(3)).value
        assert np.array_equal(a, b)

    def test_drop_fraction_binomial_bound(self):
        n = 100_000
        x = ag.constant(np.ones((n // 100, 100)))
        out = dropout(x, 0.5, "train", np.random.default_rng(11)).value
        dropped = (out == 0).mean()
        assert abs(dropped - 0.5) < 3 * math.sqrt(0.25 / n)
        survivors = out[out != 0]
        assert np.allclose(survivors, 2.0)

    def test_bad_rate_rejected(self, rng):
        with pytest.raises(ValueError):
            dropout(ag.constant(np.ones((2, 2))), 1.0, "train", rng)


class TestMlpHead:
    def test_rows_normalized(self, rng):
        head = HeadParams.create(rng, 8, 5)
        out = mlp_head_forward(ag.constant(rng.standard_normal((6, 8))), head)
        lse = np.log(np.exp(out.value).sum(axis=1))
        assert np.abs(lse).max() < 1e-12

    def test_zero_parameters_give_uniform(self, rng):
        head = HeadParams.create(rng, 8, 21)
        for p in head.trainable():
            p.value[...] = 0.0
        out = mlp_head_forward(ag.constant(rng.standard_normal((4, 8))), head)
        assert np.allclose(out.value, -math.log(21.0), atol=1e-15)

    def test_gradient_check(self, rng):
        head = HeadParams.create(rng, 6, 4)
        x = ag.parameter(rng.standard_normal((5, 6)))
        labels = rng.integers(0, 4, 5)

        def build():
            return ag.nll_loss(mlp_head_forward(x, head), labels)[0]

        check_gradients(build, head.trainable() + [x], rng=rng)


class TestStageModel:
    def test_snapshot_round_trip(self, rng):
        model = StageModel.create(rng, 5, 8, 3, 2)
        snap = model.snapshot()
        model.convs[0].weight.value += 1.0
        model.load_snapshot(snap)
        assert np.array_equal(model.convs[0].weight.value, snap["conv0.weight"])

    def test_full_stack_gradient(self, rng):
        g = build_knn_graph(rng.standard_normal((9, 4)), 3)
        op = normalized_graph_operator(g)
        model = StageModel.create(rng, 4, 6, 3, 2, dropout_rate=0.5)
        x = rng.standard_normal((9, 4))
        labels = rng.integers(0, 3, 9)

        def build():
            local = np.random.default_rng(5)
            logp, _ = model.forward(op, x, "train", local)
            return ag.nll_loss(logp, labels)[0]

        check_gradients(build, model.trainable(), n_samples=2, rng=rng)
