import math

import numpy as np
import pytest

import sfda.autodiff as ad
from sfda.errors import ContractError, ShapeError
from sfda.relation import (
    EdgeMatrix,
    RelationGraph,
    compute_edges,
    gcn_forward,
    graph_distillation_loss,
    graph_distillation_terms,
    init_relation_graph,
    pairwise_labels,
)


def _identity_graph(d, epsilon=0.25):
    return RelationGraph(
        f_w=ad.param(np.eye(d)),
        g_w=ad.param(np.eye(d)),
        gcn_w=ad.param(np.eye(d)),
        epsilon=epsilon,
    )


def test_identical_rows_give_uniform_edges():
    graph = init_relation_graph(seed=0, d=4, epsilon=0.25)
    feats = ad.const(np.tile([[0.3, -1.2, 0.7, 0.1]], (5, 1)))
    edges = compute_edges(graph, feats)
    np.testing.assert_allclose(edges.values, 0.2, atol=1e-12)


def test_identity_projections_on_identity_features():
    graph = _identity_graph(2)
    edges = compute_edges(graph, ad.const(np.eye(2)))
    e = math.e
    hi, lo = e / (e + 1.0), 1.0 / (e + 1.0)
    np.testing.assert_allclose(edges.values, [[hi, lo], [lo, hi]], rtol=1e-12)
    np.testing.assert_allclose(edges.values[0], [0.7311, 0.2689], atol=5e-5)


def test_edges_rows_sum_to_one_on_random_inputs():
    rng = np.random.default_rng(1)
    for _ in range(100):
        m, d = int(rng.integers(2, 8)), int(rng.integers(2, 6))
        graph = init_relation_graph(seed=int(rng.integers(1 << 30)), d=d, epsilon=0.3)
        feats = ad.const(rng.normal(size=(m, d)))
        edges = compute_edges(graph, feats)
        np.testing.assert_allclose(edges.values.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(edges.values > 0.0) and np.all(edges.values < 1.0)


def test_compute_edges_rejects_single_proposal():
    graph = init_relation_graph(seed=0, d=3, epsilon=0.2)
    with pytest.raises(ContractError):
        compute_edges(graph, ad.const(np.ones((1, 3))))


def test_gcn_identity_case():
    graph = _identity_graph(3)
    feats = ad.const(np.abs(np.random.default_rng(2).normal(size=(4, 3))))
    edges = EdgeMatrix(tensor=ad.const(np.eye(4)))
    out = gcn_forward(graph, edges, feats)
    np.testing.assert_allclose(out.data, feats.data, rtol=1e-12)


def test_gcn_uniform_edges_give_identical_rows():
    graph = _identity_graph(3)
    feats = ad.const(np.random.default_rng(3).normal(size=(5, 3)))
    edges = EdgeMatrix(tensor=ad.const(np.full((5, 5), 0.2)))
    out = gcn_forward(graph, edges, feats)
    for i in range(1, 5):
        np.testing.assert_allclose(out.data[i], out.data[0], rtol=1e-12)


def test_gcn_gradient_to_weight_matches_finite_differences():
    rng = np.random.default_rng(4)
    feats = ad.const(rng.normal(size=(4, 3)))
    graph = init_relation_graph(seed=5, d=3, epsilon=0.3)
    edges = compute_edges(graph, feats)
    probe = ad.const(rng.normal(size=(4, 3)))

    def f(w):
        trial = RelationGraph(f_w=graph.f_w, g_w=graph.g_w, gcn_w=w, epsilon=0.3)
        e = compute_edges(trial, feats)
        return ad.sum_all(ad.mul(gcn_forward(trial, e, feats), probe))

    assert ad.finite_diff_check(f, graph.gcn_w) < 1e-4
    del edges


def test_distillation_zero_for_identical_logits():
    z = ad.const(np.random.default_rng(6).normal(size=(5, 4)))
    loss = graph_distillation_loss(z, ad.const(z.data.copy()), ad.const(z.data.copy()), ad.const(z.data.copy()))
    assert loss.item() == 0.0


def test_distillation_hand_value_for_third_term():
    # student uniform vs teacher [0.25, 0.75]; the aggregated logits equal the
    # raw ones so only the student-teacher term remains:
    # KL([.5,.5],[.25,.75]) = .5 ln 2 + .5 ln(2/3)
    z_st = ad.const([[0.0, 0.0]])
    z_te = ad.const([[0.0, math.log(3.0)]])
    loss = graph_distillation_loss(z_st, ad.const(z_st.data.copy()), z_te, ad.const(z_te.data.copy()))
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert loss.item() == pytest.approx(0.14384103622589046, abs=1e-12)


def test_distillation_nonnegative_on_random_logits():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m, k = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        args = [ad.const(rng.normal(scale=2.0, size=(m, k))) for _ in range(4)]
        assert graph_distillation_loss(*args).item() >= 0.0


def test_distillation_positive_when_student_teacher_differ():
    z_st = ad.const([[2.0, 0.0, 0.0]])
    z_te = ad.const([[0.0, 2.0, 0.0]])
    loss = graph_distillation_loss(z_st, ad.const(z_st.data.copy()), z_te, ad.const(z_te.data.copy()))
    assert loss.item() > 1e-3


def test_distillation_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        graph_distillation_loss(
            ad.const(np.zeros((2, 3))),
            ad.const(np.zeros((2, 3))),
            ad.const(np.zeros((2, 4))),
            ad.const(np.zeros((2, 4))),
        )


def test_distillation_grads_flow_to_student_and_graph_only():
    rng = np.random.default_rng(8)
    m, d, k = 4, 3, 4
    graph = init_relation_graph(seed=9, d=d, epsilon=0.3)
    v_student = ad.param(rng.normal(size=(m, d)))
    v_teacher_const = ad.const(rng.normal(size=(m, d)))
    w_cls_student = ad.param(rng.normal(size=(d, k)))
    w_cls_teacher = ad.const(rng.normal(size=(d, k)))

    with ad.Tape() as tape:
        z_st = ad.matmul(v_student, w_cls_student)
        e_st = compute_edges(graph, v_student)
        z_st_agg = ad.matmul(gcn_forward(graph, e_st, v_student), w_cls_student)
        z_te = ad.matmul(v_teacher_const, w_cls_teacher)
        e_te = compute_edges(graph, v_teacher_const)
        z_te_agg = ad.matmul(gcn_forward(graph, e_te, v_teacher_const), w_cls_teacher)
        loss = graph_distillation_loss(z_st, z_st_agg, z_te.detach(), z_te_agg)
    ad.backward(loss, tape)

    assert v_student.grad is not None
    assert w_cls_student.grad is not None
    for t in graph.tensors():
        assert t.grad is not None
    assert v_teacher_const.grad is None
    assert w_cls_teacher.grad is None


def test_terms_sum_to_loss():
    rng = np.random.default_rng(10)
    args = [ad.const(rng.normal(size=(3, 4))) for _ in range(4)]
    terms = graph_distillation_terms(*args)
    total = graph_distillation_loss(*args)
    assert total.item() == pytest.approx(sum(t.item() for t in terms), rel=1e-12)


def test_pairwise_labels_thresholding():
    edges = EdgeMatrix(tensor=ad.const([[0.6, 0.3, 0.1], [0.3, 0.5, 0.2], [0.25, 0.25, 0.5]]))
    labels = pairwise_labels(edges, epsilon=0.25)
    np.testing.assert_array_equal(labels.matrix[0], [1, 1, 0])


def test_pairwise_labels_all_zero_when_threshold_above_max():
    edges = EdgeMatrix(tensor=ad.const(np.full((4, 4), 0.25)))
    labels = pairwise_labels(edges, epsilon=0.9)
    assert labels.matrix.sum() == 0


def test_pairwise_labels_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(100):
        m = int(rng.integers(2, 7))
        raw = rng.random((m, m))
        e = raw / raw.sum(axis=1, keepdims=True)
        eps = float(rng.uniform(0.05, 0.95))
        labels = pairwise_labels(EdgeMatrix(tensor=ad.const(e)), eps)
        for i in range(m):
            for j in range(m):
                assert labels.matrix[i, j] == (1 if e[i, j] >= eps else 0)


def test_pairwise_labels_epsilon_bounds():
    edges = EdgeMatrix(tensor=ad.const(np.full((2, 2), 0.5)))
    with pytest.raises(ContractError):
        pairwise_labels(edges, epsilon=0.0)
    with pytest.raises(ContractError):
        pairwise_labels(edges, epsilon=1.0)
