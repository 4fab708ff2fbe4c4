"""Source-free adaptation loop: mean teacher plus graph-guided losses.

Each step runs the teacher on a weakly augmented view to produce confidence-
filtered pseudo labels and a single proposal set, extracts RoI features for
those same boxes from the strongly augmented student view, and optimizes the
sum of pseudo-label detection loss, graph distillation loss, and graph
contrastive loss.  Only the student (plus the shared relation graph and
projection head) takes gradient steps; the teacher follows by exponential
moving average and is the network that gets evaluated.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .contrastive import (
    ProjectionHead,
    graph_contrastive_loss,
    init_projection_head,
    pairwise_logits,
    project,
)
from .detector import (
    FEATURE_DIM,
    DetectionOutput,
    DetectorParams,
    ProposalSet,
    classify_rois,
    detect,
    detect_on_features,
    detection_loss,
    extract_features,
    full_anchor_set,
    init_detector_params,
    iou_matrix,
    propose,
    roi_pool,
    top_proposals,
)
from .errors import ConfigError, ContractError
from .evaluation import evaluate_map
from .relation import (
    RelationGraph,
    compute_edges,
    gcn_forward,
    graph_distillation_terms,
    init_relation_graph,
    pairwise_labels,
)
from .scenes import BoxLabel, SyntheticScene


def derive_seed(*parts: int) -> int:
    """Stable child seed from a tuple of integers."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationPolicy:
    """Photometric-only view perturbation; box geometry is never touched."""

    kind: str  # "weak" | "strong"
    noise_sigma: float = 0.0
    brightness: float = 0.0          # jitter drawn from [-brightness, brightness]
    contrast: tuple[float, float] = (1.0, 1.0)
    cutout_max: int = 0              # side bound of the gray cutout rectangle


def weak_policy(noise_sigma: float = 0.01) -> AugmentationPolicy:
    return AugmentationPolicy(kind="weak", noise_sigma=noise_sigma)


def strong_policy() -> AugmentationPolicy:
    return AugmentationPolicy(
        kind="strong",
        noise_sigma=0.05,
        brightness=0.3,
        contrast=(0.6, 1.4),
        cutout_max=16,
    )


def augment(image: np.ndarray, policy: AugmentationPolicy, seed: int) -> np.ndarray:
    """Deterministic in (image, policy, seed); output stays in [0, 1]."""
    rng = np.random.default_rng(seed)
    out = image
    if policy.brightness > 0.0 or policy.contrast != (1.0, 1.0):
        gain = rng.uniform(*policy.contrast)
        shift = rng.uniform(-policy.brightness, policy.brightness)
        out = np.clip(gain * (out - 0.5) + 0.5 + shift, 0.0, 1.0)
    if policy.noise_sigma > 0.0:
        out = np.clip(out + rng.normal(0.0, policy.noise_sigma, out.shape), 0.0, 1.0)
    if policy.cutout_max > 0:
        side = out.shape[-1]
        w = int(rng.integers(4, policy.cutout_max + 1))
        h = int(rng.integers(4, policy.cutout_max + 1))
        x0 = int(rng.integers(0, side - w + 1))
        y0 = int(rng.integers(0, side - h + 1))
        out = out.copy()
        out[:, y0 : y0 + h, x0 : x0 + w] = 0.5
    if out is image:
        out = image.copy()
    return out


# ---------------------------------------------------------------------------
# pseudo labels


@dataclass
class PseudoLabelSet:
    labels: list[BoxLabel]
    confidences: np.ndarray


def filter_pseudo_labels(detections: DetectionOutput, threshold: float) -> PseudoLabelSet:
    """Keep detections at or above the confidence threshold, sorted canonically."""
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"confidence threshold {threshold} outside (0, 1)")
    entries = []
    for box, cid, conf in zip(detections.boxes, detections.class_ids, detections.confidences):
        if conf < threshold:
            continue
        x1, y1, x2, y2 = (float(v) for v in box)
        if x2 - x1 <= 0 or y2 - y1 <= 0 or (x2 - x1) * (y2 - y1) < 16.0:
            continue  # too degenerate to be a usable box label
        entries.append((float(conf), (x1, y1, x2, y2), int(cid)))
    entries.sort(key=lambda e: (-e[0], e[1]))
    return PseudoLabelSet(
        labels=[BoxLabel(box=box, class_id=cid) for _, box, cid in entries],
        confidences=np.array([conf for conf, _, _ in entries]),
    )


# ---------------------------------------------------------------------------
# configuration and state


_PAIRINGS = ("SW", "WW", "SS")


@dataclass(frozen=True)
class AdaptConfig:
    lr: float = 0.001
    momentum: float = 0.9
    alpha: float = 0.99
    threshold: float = 0.9
    proposals: int = 16
    epsilon: float | None = None  # defaults to 2/proposals
    epochs: int = 10
    seed: int = 0
    pairing: str = "SW"
    w_sl: float = 1.0
    w_gdl: float = 1.0
    w_gcl: float = 1.0
    conf_floor: float = 0.05

    def __post_init__(self):
        if self.lr <= 0.0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold must lie in (0, 1)")
        if self.proposals < 2:
            raise ConfigError("need at least two proposals")
        if self.pairing not in _PAIRINGS:
            raise ConfigError(f"pairing must be one of {_PAIRINGS}")
        if self.epsilon is None:
            object.__setattr__(self, "epsilon", 2.0 / self.proposals)
        if not 0.0 < self.epsilon < 1.0:
            raise ConfigError("epsilon must lie in (0, 1)")

    def policies(self) -> tuple[AugmentationPolicy, AugmentationPolicy]:
        """(student policy, teacher policy) for the configured pairing."""
        strong, weak = strong_policy(), weak_policy()
        if self.pairing == "SW":
            return strong, weak
        if self.pairing == "WW":
            return weak, weak
        return strong, strong


@dataclass
class StudentTeacherState:
    student: DetectorParams
    teacher: DetectorParams
    graph: RelationGraph
    head: ProjectionHead
    alpha: float
    step_count: int = 0
    velocity: dict = field(default_factory=dict)

    def validate(self) -> None:
        for s, t in zip(self.student.tensors(), self.teacher.tensors()):
            if s.data.shape != t.data.shape:
                raise ContractError("student/teacher parameter shapes differ")
            if t.requires_grad:
                raise ContractError("teacher parameters must not carry gradients")
        if not 0.0 <= self.alpha < 1.0:
            raise ContractError("alpha outside [0, 1)")

    def trainable_tensors(self) -> list[Tensor]:
        return self.student.tensors() + self.graph.tensors() + self.head.tensors()


def init_adaptation_state(source_params: DetectorParams, cfg: AdaptConfig) -> StudentTeacherState:
    d = source_params.feat_w.data.shape[1]
    state = StudentTeacherState(
        student=source_params.clone(requires_grad=True),
        teacher=source_params.clone(requires_grad=False),
        graph=init_relation_graph(derive_seed(cfg.seed, 101), d, cfg.epsilon),
        head=init_projection_head(derive_seed(cfg.seed, 102), d),
        alpha=cfg.alpha,
    )
    state.validate()
    return state


def ema_update(state: StudentTeacherState) -> None:
    """teacher <- alpha * teacher + (1 - alpha) * student, elementwise."""
    a = state.alpha
    for t, s in zip(state.teacher.tensors(), state.student.tensors()):
        t.data *= a
        t.data += (1.0 - a) * s.data


# ---------------------------------------------------------------------------
# one adaptation step


@dataclass
class StepReport:
    l_sl: float
    l_gdl: float
    l_gcl: float
    l_total: float
    gdl_terms: tuple[float, float, float]
    pseudo: PseudoLabelSet


def adapt_step(
    state: StudentTeacherState,
    scene: SyntheticScene,
    cfg: AdaptConfig,
    apply_ema: bool = True,
    student_policy: AugmentationPolicy | None = None,
    teacher_policy: AugmentationPolicy | None = None,
) -> StepReport:
    state.validate()
    default_student, default_teacher = cfg.policies()
    student_policy = student_policy if student_policy is not None else default_student
    teacher_policy = teacher_policy if teacher_policy is not None else default_teacher

    step = state.step_count
    view_teacher = augment(scene.image, teacher_policy, derive_seed(cfg.seed, step, 0))
    view_student = augment(scene.image, student_policy, derive_seed(cfg.seed, step, 1))

    # teacher pipeline on its view: pseudo labels plus the shared proposals
    feats_te = extract_features(state.teacher, view_teacher)
    proposals = propose(state.teacher, feats_te, cfg.proposals)
    detections = detect_on_features(state.teacher, feats_te, proposals, cfg.conf_floor)
    pseudo = filter_pseudo_labels(detections, cfg.threshold)
    rois_te = roi_pool(feats_te, proposals.boxes)
    z_te, _ = classify_rois(state.teacher, rois_te)  # constant: teacher is EMA-only

    with ad.Tape() as tape:
        # student pipeline on its view, RoI features for the teacher's boxes;
        # the objectness term runs over the student's full anchor grid
        feats_st = extract_features(state.student, view_student)
        student_anchors = full_anchor_set(state.student, feats_st)
        rois_st = roi_pool(feats_st, proposals.boxes)
        z_st, deltas_st = classify_rois(state.student, rois_st)
        l_sl = detection_loss(proposals, z_st, deltas_st, pseudo.labels, rpn_set=student_anchors)

        # relation graph on both pipelines; teacher features are constants but
        # the shared graph weights stay live through the teacher branch
        edges_st = compute_edges(state.graph, rois_st)
        z_st_agg, _ = classify_rois(state.student, gcn_forward(state.graph, edges_st, rois_st))
        edges_te = compute_edges(state.graph, rois_te)
        z_te_agg, _ = classify_rois(state.teacher, gcn_forward(state.graph, edges_te, rois_te))
        gdl_a, gdl_b, gdl_c = graph_distillation_terms(z_st, z_st_agg, z_te, z_te_agg)
        l_gdl = ad.add(ad.add(gdl_a, gdl_b), gdl_c)

        # contrastive loss on student keys/queries, labels from teacher edges
        labels = pairwise_labels(edges_te, cfg.epsilon)
        keys, queries = project(state.head, rois_st)
        l_gcl = graph_contrastive_loss(pairwise_logits(queries, keys), labels)

        total = ad.add(
            ad.add(ad.scale(l_sl, cfg.w_sl), ad.scale(l_gdl, cfg.w_gdl)),
            ad.scale(l_gcl, cfg.w_gcl),
        )

    ad.backward(total, tape)
    ad.fill_missing_grads(state.trainable_tensors())
    ad.sgd_step(state.trainable_tensors(), cfg.lr, cfg.momentum, state.velocity)
    if apply_ema:
        ema_update(state)
    state.step_count += 1

    return StepReport(
        l_sl=l_sl.item(),
        l_gdl=l_gdl.item(),
        l_gcl=l_gcl.item(),
        l_total=total.item(),
        gdl_terms=(gdl_a.item(), gdl_b.item(), gdl_c.item()),
        pseudo=pseudo,
    )


# ---------------------------------------------------------------------------
# source training


def train_source(
    cfg: AdaptConfig,
    scenes: list[SyntheticScene],
    d: int = FEATURE_DIM,
) -> DetectorParams:
    """Supervised training on ground-truth labels; returns the trained weights."""
    params = init_detector_params(seed=derive_seed(cfg.seed, 100), d=d)
    velocity: dict = {}
    for epoch in range(cfg.epochs):
        order = np.random.default_rng(derive_seed(cfg.seed, 200, epoch)).permutation(len(scenes))
        for idx in order:
            scene = scenes[idx]
            with ad.Tape() as tape:
                feats = extract_features(params, scene.image)
                anchors_all = full_anchor_set(params, feats)
                proposals = top_proposals(anchors_all, cfg.proposals)
                rois = roi_pool(feats, proposals.boxes)
                logits, deltas = classify_rois(params, rois)
                loss = detection_loss(
                    proposals, logits, deltas, scene.objects, rpn_set=anchors_all
                )
            ad.backward(loss, tape)
            ad.fill_missing_grads(params.tensors())
            ad.sgd_step(params.tensors(), cfg.lr, cfg.momentum, velocity)
    return params


# ---------------------------------------------------------------------------
# full adaptation loop


@dataclass
class EpochMetrics:
    epoch: int
    l_sl: float
    l_gdl: float
    l_gcl: float
    teacher_map: float
    min_confidence: float | None
    num_pseudo_labels: int


def teacher_detector(state: StudentTeacherState, cfg: AdaptConfig):
    def fn(scene: SyntheticScene) -> DetectionOutput:
        return detect(state.teacher, scene.image, m=cfg.proposals, conf_floor=cfg.conf_floor)

    return fn


def adapt_loop(
    cfg: AdaptConfig,
    source_params: DetectorParams,
    target_scenes: list[SyntheticScene],
    eval_scenes: list[SyntheticScene],
    on_epoch=None,
) -> tuple[StudentTeacherState, list[EpochMetrics]]:
    """Adapt over the target scenes; per-epoch teacher mAP on the eval split."""
    state = init_adaptation_state(source_params, cfg)
    history: list[EpochMetrics] = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(derive_seed(cfg.seed, 300, epoch)).permutation(
            len(target_scenes)
        )
        sums = np.zeros(3)
        min_conf: float | None = None
        n_labels = 0
        for idx in order:
            report = adapt_step(state, target_scenes[idx], cfg)
            sums += (report.l_sl, report.l_gdl, report.l_gcl)
            if report.pseudo.confidences.size:
                low = float(report.pseudo.confidences.min())
                min_conf = low if min_conf is None else min(min_conf, low)
                n_labels += report.pseudo.confidences.size
        steps = max(len(target_scenes), 1)
        _, teacher_map = evaluate_map(teacher_detector(state, cfg), eval_scenes)
        metrics = EpochMetrics(
            epoch=epoch,
            l_sl=sums[0] / steps,
            l_gdl=sums[1] / steps,
            l_gcl=sums[2] / steps,
            teacher_map=teacher_map,
            min_confidence=min_conf,
            num_pseudo_labels=n_labels,
        )
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return state, history


# ---------------------------------------------------------------------------
# relation-structure measurement


def edge_separation(
    state: StudentTeacherState,
    scenes: list[SyntheticScene],
    cfg: AdaptConfig,
    iou_assign: float = 0.7,
) -> tuple[float, float, int, int]:
    """Mean edge weight between proposals on the same object vs across objects.

    Proposals are assigned to a ground-truth object when their IoU reaches
    ``iou_assign``; unassigned proposals are ignored.  Returns
    (mean_same, mean_cross, n_same_pairs, n_cross_pairs) pooled over scenes.
    """
    same_sum = cross_sum = 0.0
    same_n = cross_n = 0
    for scene in scenes:
        feats = extract_features(state.teacher, scene.image)
        proposals = propose(state.teacher, feats, cfg.proposals)
        if not scene.objects:
            continue
        gt = np.array([label.box for label in scene.objects])
        ious = iou_matrix(proposals.boxes, gt)
        best = ious.argmax(axis=1)
        assigned = np.where(ious.max(axis=1) >= iou_assign, best, -1)
        if (assigned >= 0).sum() < 2:
            continue
        rois = roi_pool(feats, proposals.boxes)
        edges = compute_edges(state.graph, rois).values
        for i in range(proposals.m):
            if assigned[i] < 0:
                continue
            for j in range(proposals.m):
                if i == j or assigned[j] < 0:
                    continue
                if assigned[i] == assigned[j]:
                    same_sum += edges[i, j]
                    same_n += 1
                else:
                    cross_sum += edges[i, j]
                    cross_n += 1
    mean_same = same_sum / same_n if same_n else 0.0
    mean_cross = cross_sum / cross_n if cross_n else 0.0
    return mean_same, mean_cross, same_n, cross_n
