"""Learnable relations between proposal RoI features.

Edges are learned dot-product affinities between projected feature rows,
row-softmaxed so every proposal's outgoing relations form a distribution.
A single graph-convolution layer aggregates features along the edges, and a
distillation loss ties raw and aggregated class logits together within and
across the student/teacher pipelines.  Thresholding an edge matrix yields the
binary pairwise labels consumed by the contrastive loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError


@dataclass
class RelationGraph:
    f_w: Tensor          # d x d projection for edge sources
    g_w: Tensor          # d x d projection for edge targets
    gcn_w: Tensor        # d x d aggregation weight
    epsilon: float       # pairwise-label threshold on edge weights
    layers: int = 1

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ContractError(f"epsilon {self.epsilon} outside (0, 1)")
        if self.layers < 1:
            raise ContractError("at least one aggregation layer required")

    def tensors(self) -> list[Tensor]:
        return [self.f_w, self.g_w, self.gcn_w]

    def names(self) -> list[str]:
        return ["f_w", "g_w", "gcn_w"]


def init_relation_graph(seed: int, d: int, epsilon: float, layers: int = 1) -> RelationGraph:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(d)
    return RelationGraph(
        f_w=ad.param(rng.normal(0.0, scale, size=(d, d))),
        g_w=ad.param(rng.normal(0.0, scale, size=(d, d))),
        # near-identity start: aggregation begins as an edge-weighted mean
        gcn_w=ad.param(np.eye(d) + rng.normal(0.0, 0.05, size=(d, d))),
        epsilon=epsilon,
        layers=layers,
    )


@dataclass
class EdgeMatrix:
    """Row-stochastic m x m relation weights."""

    tensor: Tensor

    @property
    def values(self) -> np.ndarray:
        return self.tensor.data


@dataclass
class PairwiseLabels:
    """Binary positive/negative pair labels; the diagonal is never consumed."""

    matrix: np.ndarray


def compute_edges(graph: RelationGraph, features: Tensor) -> EdgeMatrix:
    """Row-softmax of (F f_w) (F g_w)^T; differentiable in F and both maps."""
    if features.data.ndim != 2:
        raise ShapeError(f"expected m x d features, got shape {features.data.shape}")
    if features.data.shape[0] < 2:
        raise ContractError("relation edges need at least two proposals")
    src = ad.matmul(features, graph.f_w)
    dst = ad.matmul(features, graph.g_w)
    scores = ad.matmul(src, ad.transpose(dst))
    return EdgeMatrix(tensor=ad.softmax_rows(scores))


def gcn_forward(graph: RelationGraph, edges: EdgeMatrix, features: Tensor) -> Tensor:
    """relu(E F W), repeated ``graph.layers`` times with the same weight."""
    e = edges.tensor
    if e.data.shape != (features.data.shape[0],) * 2:
        raise ShapeError(f"edges {e.data.shape} do not match features {features.data.shape}")
    out = features
    for _ in range(graph.layers):
        out = ad.relu(ad.matmul(ad.matmul(e, out), graph.gcn_w))
    return out


def graph_distillation_terms(
    z_student: Tensor,
    z_student_agg: Tensor,
    z_teacher: Tensor,
    z_teacher_agg: Tensor,
) -> tuple[Tensor, Tensor, Tensor]:
    """The three KL terms: raw-vs-aggregated per pipeline, then student-vs-teacher."""
    shapes = {t.data.shape for t in (z_student, z_student_agg, z_teacher, z_teacher_agg)}
    if len(shapes) != 1:
        raise ShapeError(f"logit shapes differ: {sorted(shapes)}")
    p_st = ad.softmax_rows(z_student)
    p_st_agg = ad.softmax_rows(z_student_agg)
    p_te = ad.softmax_rows(z_teacher)
    p_te_agg = ad.softmax_rows(z_teacher_agg)
    return (
        ad.kl_divergence_rows(p_st, p_st_agg),
        ad.kl_divergence_rows(p_te, p_te_agg),
        ad.kl_divergence_rows(p_st, p_te),
    )


def graph_distillation_loss(
    z_student: Tensor,
    z_student_agg: Tensor,
    z_teacher: Tensor,
    z_teacher_agg: Tensor,
) -> Tensor:
    a, b, c = graph_distillation_terms(z_student, z_student_agg, z_teacher, z_teacher_agg)
    return ad.add(ad.add(a, b), c)


def pairwise_labels(edges: EdgeMatrix, epsilon: float) -> PairwiseLabels:
    """Threshold edges into binary labels; discrete, so no gradient flows."""
    if not 0.0 < epsilon < 1.0:
        raise ContractError(f"epsilon {epsilon} outside (0, 1)")
    return PairwiseLabels(matrix=(edges.values >= epsilon).astype(np.int8))
