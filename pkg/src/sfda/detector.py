"""Toy two-stage detector: patch-embedding backbone, anchor scorer, RoI heads.

The backbone embeds the 8x8 grid of 8x8-pixel patches of a 64x64 image into a
64 x d feature matrix.  Proposals are class-agnostic anchors (3 scales per
grid cell, deterministically jittered) ranked by a sigmoid objectness score;
there is no learned box regression at the proposal stage.  RoI features are
mean-pooled grid cells, fed to linear classification and box-delta heads.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, ShapeError
from .scenes import IMAGE_SIZE, NUM_CLASSES, BoxLabel

GRID = 8                       # 8x8 feature cells
PATCH = IMAGE_SIZE // GRID     # 8x8 pixels per cell
PATCH_DIM = 3 * PATCH * PATCH  # flattened patch vector length
FEATURE_DIM = 16
ANCHOR_SCALES = (8.0, 16.0, 32.0)
NUM_ANCHORS = GRID * GRID * len(ANCHOR_SCALES)
BACKGROUND = NUM_CLASSES       # RoI head models background as class K

_ANCHOR_JITTER_SEED = 17
# per scale: max center offset in pixels, and log-uniform size-factor range;
# the factors spread each scale across its object-size band
_ANCHOR_OFFSETS = (1.0, 1.5, 2.0)
_ANCHOR_FACTORS = ((1.00, 1.30), (0.88, 1.15), (0.85, 1.10))


def _build_anchor_table() -> np.ndarray:
    """Fixed table of jittered anchor boxes, identical for every model.

    Each grid cell carries one anchor per scale.  A deterministic jitter
    (center offset plus a log-uniform size factor) spreads the anchors off
    the exact grid so objects of in-between sizes and positions still find a
    well-overlapping box.
    """
    rng = np.random.default_rng(_ANCHOR_JITTER_SEED)
    boxes = np.empty((NUM_ANCHORS, 4))
    i = 0
    for gy in range(GRID):
        for gx in range(GRID):
            cx = PATCH * gx + PATCH / 2.0
            cy = PATCH * gy + PATCH / 2.0
            for scale, off, (flo, fhi) in zip(ANCHOR_SCALES, _ANCHOR_OFFSETS, _ANCHOR_FACTORS):
                dx, dy = rng.uniform(-off, off, size=2)
                factor = np.exp(rng.uniform(np.log(flo), np.log(fhi)))
                half = scale * factor / 2.0
                x1 = np.clip(cx + dx - half, 0.0, IMAGE_SIZE)
                y1 = np.clip(cy + dy - half, 0.0, IMAGE_SIZE)
                x2 = np.clip(cx + dx + half, 0.0, IMAGE_SIZE)
                y2 = np.clip(cy + dy + half, 0.0, IMAGE_SIZE)
                boxes[i] = (x1, y1, x2, y2)
                i += 1
    return boxes


ANCHORS = _build_anchor_table()

# grid-cell centers in pixel coordinates, row-major
_CELL_CENTERS = np.array(
    [
        (PATCH * gx + PATCH / 2.0, PATCH * gy + PATCH / 2.0)
        for gy in range(GRID)
        for gx in range(GRID)
    ]
)


@dataclass
class DetectorParams:
    """All learnable weights of the detector."""

    feat_w: Tensor  # PATCH_DIM x d
    feat_b: Tensor  # d
    obj_w: Tensor   # 3d x num_scales over (mean, raw, context) anchor pools
    obj_b: Tensor   # num_scales
    cls_w: Tensor   # d x (K+1)
    cls_b: Tensor   # K+1
    reg_w: Tensor   # d x 4
    reg_b: Tensor   # 4

    def tensors(self) -> list[Tensor]:
        return [
            self.feat_w, self.feat_b,
            self.obj_w, self.obj_b,
            self.cls_w, self.cls_b,
            self.reg_w, self.reg_b,
        ]

    def names(self) -> list[str]:
        return ["feat_w", "feat_b", "obj_w", "obj_b", "cls_w", "cls_b", "reg_w", "reg_b"]

    def clone(self, requires_grad: bool) -> "DetectorParams":
        return DetectorParams(
            *[Tensor(t.data.copy(), requires_grad=requires_grad) for t in self.tensors()]
        )


def init_detector_params(seed: int, d: int = FEATURE_DIM) -> DetectorParams:
    """Random heads over a patch embedding whose first four channels start as
    color-contrast and brightness statistics.

    The structured channels make per-cell object coverage and class color
    linearly readable from step one, which the short training budget needs;
    the remaining channels are free random projections.
    """
    rng = np.random.default_rng(seed)
    n_scales = len(ANCHOR_SCALES)

    def w(shape, fan_in):
        return ad.param(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape))

    feat_w = w((PATCH_DIM, d), PATCH_DIM)
    pixels_per_channel = PATCH * PATCH
    if d >= 4:
        feat_w.data[:, :4] = 0.0
        for c in range(3):
            for c2 in range(3):
                weight = 1.0 if c2 == c else -0.5  # channel contrast, relu-gated
                feat_w.data[c2 * pixels_per_channel : (c2 + 1) * pixels_per_channel, c] = (
                    weight / pixels_per_channel
                )
        feat_w.data[:, 3] = 1.0 / PATCH_DIM  # brightness

    return DetectorParams(
        feat_w=feat_w,
        feat_b=ad.param(np.zeros(d)),
        obj_w=w((3 * d, n_scales), 3 * d),
        obj_b=ad.param(np.zeros(n_scales)),
        cls_w=w((d, NUM_CLASSES + 1), d),
        cls_b=ad.param(np.zeros(NUM_CLASSES + 1)),
        reg_w=w((d, 4), d),
        reg_b=ad.param(np.zeros(4)),
    )


@dataclass
class ProposalSet:
    """Top-m anchors by objectness, sorted descending."""

    boxes: np.ndarray        # m x 4
    objectness: Tensor       # m scores in (0, 1)
    anchor_indices: np.ndarray
    m: int


@dataclass
class DetectionOutput:
    boxes: np.ndarray        # n x 4
    class_ids: np.ndarray    # n
    confidences: np.ndarray  # n values in (0, 1]


# ---------------------------------------------------------------------------
# geometry helpers


def iou(a, b) -> float:
    """Intersection over union of two (x1, y1, x2, y2) boxes."""
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of a (n x 4) and b (k x 4)."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix = np.maximum(
        0.0,
        np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]),
    )
    iy = np.maximum(
        0.0,
        np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]),
    )
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-12), 0.0)


def box_deltas(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Standard (dx, dy, dw, dh) offsets mapping src boxes onto dst boxes."""
    sw = src[:, 2] - src[:, 0]
    sh = src[:, 3] - src[:, 1]
    scx = src[:, 0] + sw / 2.0
    scy = src[:, 1] + sh / 2.0
    dw = dst[:, 2] - dst[:, 0]
    dh = dst[:, 3] - dst[:, 1]
    dcx = dst[:, 0] + dw / 2.0
    dcy = dst[:, 1] + dh / 2.0
    sw = np.maximum(sw, 1e-6)
    sh = np.maximum(sh, 1e-6)
    return np.stack(
        [
            (dcx - scx) / sw,
            (dcy - scy) / sh,
            np.log(np.maximum(dw, 1e-6) / sw),
            np.log(np.maximum(dh, 1e-6) / sh),
        ],
        axis=1,
    )


def apply_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    cx = boxes[:, 0] + w / 2.0
    cy = boxes[:, 1] + h / 2.0
    d = np.clip(deltas, -2.0, 2.0)
    ncx = cx + d[:, 0] * w
    ncy = cy + d[:, 1] * h
    nw = w * np.exp(d[:, 2])
    nh = h * np.exp(d[:, 3])
    out = np.stack([ncx - nw / 2.0, ncy - nh / 2.0, ncx + nw / 2.0, ncy + nh / 2.0], axis=1)
    return np.clip(out, 0.0, IMAGE_SIZE)


def _boxes_sort_order(boxes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Descending by score; ties broken lexicographically by box coordinates."""
    return np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thr: float = 0.5) -> np.ndarray:
    """Greedy non-max suppression; returns kept indices in rank order."""
    order = _boxes_sort_order(boxes, scores)
    kept: list[int] = []
    for idx in order:
        if all(iou(boxes[idx], boxes[k]) < iou_thr for k in kept):
            kept.append(int(idx))
    return np.asarray(kept, dtype=np.int64)


# ---------------------------------------------------------------------------
# forward stages


def image_to_patches(image: np.ndarray) -> np.ndarray:
    """3 x 64 x 64 image -> 64 x PATCH_DIM matrix of flattened patches."""
    if image.shape != (3, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected image of shape (3, {IMAGE_SIZE}, {IMAGE_SIZE}), got {image.shape}")
    p = image.reshape(3, GRID, PATCH, GRID, PATCH)
    p = p.transpose(1, 3, 0, 2, 4)  # gy, gx, c, u, v
    return p.reshape(GRID * GRID, PATCH_DIM)


def _pool_matrix(boxes: np.ndarray) -> np.ndarray:
    """Rows average the grid cells whose centers fall inside each box; a box
    containing no cell center falls back to the single nearest cell."""
    m = boxes.shape[0]
    pool = np.zeros((m, GRID * GRID))
    cx, cy = _CELL_CENTERS[:, 0], _CELL_CENTERS[:, 1]
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        inside = (cx >= x1) & (cx <= x2) & (cy >= y1) & (cy <= y2)
        count = int(inside.sum())
        if count == 0:
            bx, by = (x1 + x2) / 2.0, (y1 + y2) / 2.0
            nearest = int(np.argmin((cx - bx) ** 2 + (cy - by) ** 2))
            pool[i, nearest] = 1.0
        else:
            pool[i, inside] = 1.0 / count
    return pool


def _scaled_boxes(boxes: np.ndarray, factor: float) -> np.ndarray:
    cx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    cy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    hw = (boxes[:, 2] - boxes[:, 0]) * factor / 2.0
    hh = (boxes[:, 3] - boxes[:, 1]) * factor / 2.0
    out = np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)
    return np.clip(out, 0.0, IMAGE_SIZE)


def _overlap_areas(boxes: np.ndarray) -> np.ndarray:
    x1 = _CELL_CENTERS[:, 0] - PATCH / 2.0
    y1 = _CELL_CENTERS[:, 1] - PATCH / 2.0
    ox = np.maximum(
        0.0,
        np.minimum(boxes[:, None, 2], x1[None, :] + PATCH) - np.maximum(boxes[:, None, 0], x1[None, :]),
    )
    oy = np.maximum(
        0.0,
        np.minimum(boxes[:, None, 3], y1[None, :] + PATCH) - np.maximum(boxes[:, None, 1], y1[None, :]),
    )
    return ox * oy


def _area_pool_matrix(boxes: np.ndarray) -> np.ndarray:
    """Rows weight the grid cells by their overlap area with each box.

    Unlike the center-containment rule, area weights vary continuously with
    the box coordinates, which the anchor scorer needs to rank boxes that
    cover the same cell set.
    """
    weights = _overlap_areas(boxes)
    sums = weights.sum(axis=1, keepdims=True)
    return weights / np.maximum(sums, 1e-9)


def _raw_area_pool_matrix(boxes: np.ndarray) -> np.ndarray:
    """Overlap-area weights in cell-area units, deliberately unnormalized so
    pooled features keep absolute mass (the IoU test is linear in raw
    intersection and object masses at fixed anchor area)."""
    return _overlap_areas(boxes) / (PATCH * PATCH)


# anchors are fixed, so their pooling matrices and per-anchor scale-head index
# can be precomputed once; the context pool covers a 2x enlarged box so the
# scorer can contrast an anchor's interior against its surround
_CONTEXT_FACTOR = 2.0
_ANCHOR_POOLS = None
_ANCHOR_SCORE_INDEX = np.arange(NUM_ANCHORS) * len(ANCHOR_SCALES) + (
    np.arange(NUM_ANCHORS) % len(ANCHOR_SCALES)
)


def _anchor_pools() -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    global _ANCHOR_POOLS
    if _ANCHOR_POOLS is None:
        _ANCHOR_POOLS = (
            _area_pool_matrix(ANCHORS),
            _raw_area_pool_matrix(ANCHORS),
            _raw_area_pool_matrix(_scaled_boxes(ANCHORS, _CONTEXT_FACTOR)),
        )
    return _ANCHOR_POOLS


def extract_features(params: DetectorParams, image: np.ndarray) -> Tensor:
    """Per-cell patch embeddings followed by relu; output 64 x d."""
    patches = ad.const(image_to_patches(np.asarray(image, dtype=np.float64)))
    return ad.relu(ad.add_rowvec(ad.matmul(patches, params.feat_w), params.feat_b))


def anchor_scores(params: DetectorParams, features: Tensor) -> Tensor:
    """Sigmoid objectness for all anchors, flattened to (NUM_ANCHORS,).

    Each anchor is scored through the linear head of its scale from three
    area-weighted pools of the cell features: the normalized interior mean,
    the raw (mass-preserving) interior, and a raw 2x-context pool, so the
    scorer can contrast an anchor's content against its surround and its own
    absolute extent.
    """
    pool_mean, pool_raw, pool_ctx = _anchor_pools()
    stacked = ad.hstack(
        [
            ad.matmul(ad.const(pool_mean), features),
            ad.matmul(ad.const(pool_raw), features),
            ad.matmul(ad.const(pool_ctx), features),
        ]
    )
    raw = ad.add_rowvec(ad.matmul(stacked, params.obj_w), params.obj_b)
    flat = ad.reshape(raw, (NUM_ANCHORS * len(ANCHOR_SCALES),))
    return ad.sigmoid(ad.take(flat, _ANCHOR_SCORE_INDEX))


def full_anchor_set(params: DetectorParams, features: Tensor) -> ProposalSet:
    """Every anchor with its objectness score, in grid order."""
    probs = anchor_scores(params, features)
    return ProposalSet(
        boxes=ANCHORS.copy(),
        objectness=probs,
        anchor_indices=np.arange(NUM_ANCHORS, dtype=np.int64),
        m=NUM_ANCHORS,
    )


def top_proposals(full: ProposalSet, m: int) -> ProposalSet:
    if not 1 <= m <= full.m:
        raise ConfigError(f"proposal count {m} outside [1, {full.m}]")
    order = np.argsort(-full.objectness.data, kind="stable")[:m]
    return ProposalSet(
        boxes=full.boxes[order].copy(),
        objectness=ad.take(full.objectness, order),
        anchor_indices=full.anchor_indices[order],
        m=m,
    )


def propose(params: DetectorParams, features: Tensor, m: int) -> ProposalSet:
    if not 1 <= m <= NUM_ANCHORS:
        raise ConfigError(f"proposal count {m} outside [1, {NUM_ANCHORS}]")
    return top_proposals(full_anchor_set(params, features), m)


def roi_pool(features: Tensor, boxes: np.ndarray) -> Tensor:
    """Mean of the feature cells whose centers fall inside each box.

    A box containing no cell center falls back to the single nearest cell, so
    degenerate boxes still pool exactly one feature vector.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4:
        raise ShapeError(f"roi_pool expects m x 4 boxes, got {boxes.shape}")
    if np.any(boxes < -1e-6) or np.any(boxes > IMAGE_SIZE + 1e-6):
        raise ContractError("roi_pool boxes must lie within image bounds")
    return ad.matmul(ad.const(_pool_matrix(boxes)), features)


def classify_rois(params: DetectorParams, rois: Tensor) -> tuple[Tensor, Tensor]:
    """Linear heads: (K+1)-way class logits and 4 box-delta outputs per RoI."""
    logits = ad.add_rowvec(ad.matmul(rois, params.cls_w), params.cls_b)
    deltas = ad.add_rowvec(ad.matmul(rois, params.reg_w), params.reg_b)
    return logits, deltas


# ---------------------------------------------------------------------------
# training loss


def _match_boxes(boxes: np.ndarray, labels: list[BoxLabel], thr: float = 0.5):
    """Per box: index of the best ground-truth match at IoU >= thr, else -1."""
    if not labels:
        return np.full(boxes.shape[0], -1, dtype=np.int64), np.zeros(boxes.shape[0])
    gt = np.array([label.box for label in labels])
    ious = iou_matrix(boxes, gt)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(boxes.shape[0]), best]
    matched = np.where(best_iou >= thr, best, -1)
    return matched.astype(np.int64), best_iou


def detection_loss(
    proposals: ProposalSet,
    logits: Tensor,
    deltas: Tensor,
    labels: list[BoxLabel],
    rpn_set: ProposalSet | None = None,
) -> Tensor:
    """Unweighted sum of objectness BCE, anchor-offset and RoI box regression
    (smooth-L1, matched boxes only), and (K+1)-way RoI cross-entropy where
    unmatched proposals train as background.

    The objectness terms run over ``rpn_set`` when given (training passes the
    full scored anchor grid there, so anchors outside the current top-m still
    receive signal) and over ``proposals`` otherwise.  With no labels the
    regression terms vanish and the classification terms reduce to
    background-only supervision.
    """
    m = proposals.m
    matched, _ = _match_boxes(proposals.boxes, labels)
    is_pos = matched >= 0

    rpn = rpn_set if rpn_set is not None else proposals
    rpn_matched, _ = _match_boxes(rpn.boxes, labels) if rpn_set is not None else (matched, None)
    rpn_pos = rpn_matched >= 0

    # objectness BCE against the IoU>=0.5 assignment, class-balanced so the
    # few positive anchors are not drowned out by the background
    t = ad.const(rpn_pos.astype(np.float64))
    n_pos = int(rpn_pos.sum())
    n_neg = rpn.m - n_pos
    if n_pos and n_neg:
        weights = np.where(rpn_pos, 0.5 / n_pos, 0.5 / n_neg)
    else:
        weights = np.full(rpn.m, 1.0 / rpn.m)
    p = rpn.objectness
    log_p = ad.log(p)
    log_not_p = ad.log(ad.sub(ad.const(np.ones(rpn.m)), p))
    bce_terms = ad.add(ad.mul(t, log_p), ad.mul(ad.sub(ad.const(np.ones(rpn.m)), t), log_not_p))
    rpn_cls = ad.scale(ad.sum_all(ad.mul(bce_terms, ad.const(weights))), -1.0)

    # anchor-offset misalignment; the proposal stage has no regression weights,
    # so this term is constant in the parameters
    if rpn_pos.any():
        gt = np.array([labels[j].box for j in rpn_matched[rpn_pos]])
        offs = box_deltas(rpn.boxes[rpn_pos], gt)
        sl = np.where(np.abs(offs) < 1.0, 0.5 * offs * offs, np.abs(offs) - 0.5)
        rpn_reg = ad.const(sl.sum() / rpn_pos.sum())
    else:
        rpn_reg = ad.const(0.0)

    # RoI cross-entropy with background as class K
    targets = np.full(m, BACKGROUND, dtype=np.int64)
    for i in np.flatnonzero(is_pos):
        targets[i] = labels[matched[i]].class_id
    onehot = np.zeros((m, NUM_CLASSES + 1))
    onehot[np.arange(m), targets] = 1.0
    probs = ad.softmax_rows(logits)
    roi_cls = ad.scale(ad.sum_all(ad.mul(ad.log(probs), ad.const(onehot))), -1.0 / m)

    # RoI box regression on matched proposals only
    if is_pos.any():
        rows = np.flatnonzero(is_pos)
        flat_idx = (rows[:, None] * 4 + np.arange(4)[None, :]).reshape(-1)
        pred = ad.take(ad.reshape(deltas, (m * 4,)), flat_idx)
        gt = np.array([labels[j].box for j in matched[rows]])
        target = box_deltas(proposals.boxes[rows], gt).reshape(-1)
        roi_reg = ad.scale(
            ad.sum_all(ad.smooth_l1(ad.sub(pred, ad.const(target)))), 1.0 / rows.size
        )
    else:
        roi_reg = ad.const(0.0)

    return ad.add(ad.add(rpn_cls, rpn_reg), ad.add(roi_cls, roi_reg))


# ---------------------------------------------------------------------------
# inference


def detect_on_features(
    params: DetectorParams,
    features: Tensor,
    proposals: ProposalSet,
    conf_floor: float = 0.05,
    nms_iou: float = 0.5,
) -> DetectionOutput:
    rois = roi_pool(features, proposals.boxes)
    logits, deltas = classify_rois(params, rois)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    fg = probs[:, :NUM_CLASSES]
    class_ids = fg.argmax(axis=1)
    confidences = fg.max(axis=1)
    boxes = apply_deltas(proposals.boxes, deltas.data)

    keep = confidences >= conf_floor
    boxes, class_ids, confidences = boxes[keep], class_ids[keep], confidences[keep]

    out_boxes, out_cls, out_conf = [], [], []
    for c in np.unique(class_ids):
        sel = class_ids == c
        kept = nms(boxes[sel], confidences[sel], iou_thr=nms_iou)
        out_boxes.append(boxes[sel][kept])
        out_cls.append(np.full(kept.size, c, dtype=np.int64))
        out_conf.append(confidences[sel][kept])
    if out_boxes:
        boxes = np.concatenate(out_boxes)
        class_ids = np.concatenate(out_cls)
        confidences = np.concatenate(out_conf)
    else:
        boxes = np.zeros((0, 4))
        class_ids = np.zeros(0, dtype=np.int64)
        confidences = np.zeros(0)

    order = _boxes_sort_order(boxes, confidences) if boxes.size else np.zeros(0, dtype=np.int64)
    return DetectionOutput(
        boxes=boxes[order], class_ids=class_ids[order], confidences=confidences[order]
    )


def detect(
    params: DetectorParams,
    image: np.ndarray,
    m: int = 16,
    conf_floor: float = 0.05,
    nms_iou: float = 0.5,
) -> DetectionOutput:
    features = extract_features(params, image)
    proposals = propose(params, features, m)
    return detect_on_features(params, features, proposals, conf_floor, nms_iou)
