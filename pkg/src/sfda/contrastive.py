"""Contrastive losses over proposal features.

The graph-guided loss projects RoI features into keys and queries, forms the
m x m dot-product logits, and contrasts each anchor's thresholded positive set
against all other proposals.  A brute-force enumeration oracle mirrors the
same quantity at full precision for verification, and a classic augmented-view
contrastive loss over feature pairs is provided as a reference baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError
from .relation import PairwiseLabels


@dataclass
class ProjectionHead:
    w_k: Tensor  # d x d, no bias
    w_q: Tensor  # d x d, no bias

    def tensors(self) -> list[Tensor]:
        return [self.w_k, self.w_q]

    def names(self) -> list[str]:
        return ["w_k", "w_q"]


def init_projection_head(seed: int, d: int) -> ProjectionHead:
    rng = np.random.default_rng(seed)
    scale = 0.4 / np.sqrt(d)
    return ProjectionHead(
        w_k=ad.param(rng.normal(0.0, scale, size=(d, d))),
        w_q=ad.param(rng.normal(0.0, scale, size=(d, d))),
    )


def project(head: ProjectionHead, features: Tensor) -> tuple[Tensor, Tensor]:
    """Keys and queries: K = V W_k^T, Q = V W_q^T."""
    keys = ad.matmul(features, ad.transpose(head.w_k))
    queries = ad.matmul(features, ad.transpose(head.w_q))
    return keys, queries


def pairwise_logits(queries: Tensor, keys: Tensor) -> Tensor:
    """R = Q K^T, so R[i, j] is the query-key dot product of proposals i, j."""
    if queries.data.shape != keys.data.shape:
        raise ShapeError(f"query/key shapes differ: {queries.data.shape} vs {keys.data.shape}")
    return ad.matmul(queries, ad.transpose(keys))


def graph_contrastive_loss(
    logits: Tensor, labels: PairwiseLabels, temperature: float = 1.0
) -> Tensor:
    """Sum over anchors of -log of the mean positive-to-all exponential ratio.

    Per anchor i the candidate set is everyone but i; the positive set is the
    label row with the diagonal removed.  Anchors with an empty positive set
    contribute nothing.  Stabilized with per-row log-sum-exp.
    """
    r = logits
    m = r.data.shape[0]
    if r.data.ndim != 2 or r.data.shape[1] != m:
        raise ShapeError(f"pairwise logits must be square, got {r.data.shape}")
    if m < 2:
        raise ContractError("contrastive loss needs at least two proposals")
    if labels.matrix.shape != (m, m):
        raise ShapeError(f"labels {labels.matrix.shape} do not match logits {r.data.shape}")
    if temperature != 1.0:
        r = ad.scale(r, 1.0 / temperature)

    offdiag = ~np.eye(m, dtype=bool)
    pos_mask = (labels.matrix != 0) & offdiag
    pos_counts = pos_mask.sum(axis=1)
    valid = pos_counts > 0

    lse_all = ad.masked_logsumexp_rows(r, offdiag)
    lse_pos = ad.masked_logsumexp_rows(r, pos_mask)
    per_anchor = ad.mul(ad.sub(lse_all, lse_pos), ad.const(valid.astype(np.float64)))
    log_counts = float(np.log(pos_counts[valid]).sum()) if valid.any() else 0.0
    return ad.add_scalar(ad.sum_all(per_anchor), log_counts)


def gcl_oracle(logits: np.ndarray, labels: np.ndarray, temperature: float = 1.0) -> float:
    """Literal set-enumeration evaluation of the graph contrastive loss.

    Uses naive exponentials with no stabilization, so it is only trustworthy
    for moderate |logits| (tests keep them within +/-50).
    """
    r = np.asarray(logits, dtype=np.float64) / temperature
    m = r.shape[0]
    if m < 2:
        raise ContractError("contrastive loss needs at least two proposals")
    total = 0.0
    for i in range(m):
        candidates = [a for a in range(m) if a != i]
        positives = [p for p in candidates if labels[i, p]]
        if not positives:
            continue
        mean_pos = sum(math.exp(r[i, p]) for p in positives) / len(positives)
        denom = sum(math.exp(r[i, a]) for a in candidates)
        total += -math.log(mean_pos / denom)
    return total


def simclr_loss(features: Tensor, pair_index) -> Tensor:
    """Reference augmented-view contrastive loss with cosine similarity.

    ``pair_index`` maps each of the 2N rows to its positive partner; it must
    be a fixed-point-free involution.  The per-anchor terms are averaged.
    """
    n2 = features.data.shape[0]
    if features.data.ndim != 2 or n2 < 4 or n2 % 2 != 0:
        raise ContractError(f"need an even batch of at least 4 features, got shape {features.data.shape}")
    pairs = np.asarray(pair_index, dtype=np.int64)
    if pairs.shape != (n2,):
        raise ShapeError(f"pair_index length {pairs.shape} does not match {n2} features")
    if np.any(pairs == np.arange(n2)) or np.any(pairs[pairs] != np.arange(n2)):
        raise ContractError("pair_index must be an involution without fixed points")

    unit = ad.normalize_rows(features)  # raises on zero-norm rows
    sims = ad.matmul(unit, ad.transpose(unit))
    offdiag = ~np.eye(n2, dtype=bool)
    lse = ad.masked_logsumexp_rows(sims, offdiag)
    pos_select = np.zeros((n2, n2))
    pos_select[np.arange(n2), pairs] = 1.0
    pos = ad.sum_all(ad.mul(sims, ad.const(pos_select)))
    return ad.scale(ad.sub(ad.sum_all(lse), pos), 1.0 / n2)
