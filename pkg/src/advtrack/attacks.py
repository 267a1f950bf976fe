"""White-box (RTAA, SPARK) and black-box (IoU, cooling-shrinking) attacks.

White-box attacks and CSA perturb the tracker's search crop; the IoU attack
perturbs the whole frame.  Everything operates on float64 pixel values in
[0, 255].  ``np.sign`` is used for gradient signs, so a vanishing gradient
entry contributes no step.

Per-sequence carried state (previous perturbation, SPARK history, CSA
surrogate, IoU carry-over) lives in :class:`AttackSession`, which also derives
the per-frame RNG streams from ``(seed, sequence name, frame index)``.
"""

from __future__ import annotations

import dataclasses
import functools
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from advtrack import grad as G
from advtrack.evaluation import bbox_iou, boxes_iou
from advtrack.metrics import PerturbDiagnostics, l1_norm, ssim
from advtrack.trackers import UnknownAttackError, applicable
from advtrack.trackers.base import BBox, Candidate, CandidateSet, CropMapping, TrackerOutput, TrackerState
from advtrack.trackers.siamcorr import SiamCorrTracker

EPSILON_LEVELS = (2.55, 5.1, 10.2, 20.4, 40.8)
ZETA_LEVELS = (8000.0, 10000.0, 12000.0)
POS_IOU = 0.6
NEG_IOU = 0.3


class ApplicabilityError(ValueError):
    """The attack cannot be mounted on this tracker (see the applicability table)."""


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 10.2
    alpha: float = 1.0
    iters: int = 10
    history_window: int = 30
    reg_lambda: float = 0.002
    zeta: float = 10000.0
    iou_lambda: float = 0.5
    normal_steps: int = 10
    seed: int = 0
    erase_every: int = 30
    offset_range: tuple[float, float] = (-5.0, 5.0)
    scale_range: tuple[float, float] = (0.5, 2.0)
    spark_shift: float = 0.5  # displacement of the SPARK target box, in box extents
    csa_margins: tuple[float, float, float] = (-5.0, -5.0, -5.0)
    csa_top_n: int = 20
    csa_template: bool = True
    tangential_probes: int = 3
    normal_probes: int = 25
    iou_carry: float = 0.5

    def __post_init__(self):
        if not self.epsilon > 0:
            raise G.ConfigurationError("epsilon must be positive")
        if self.iters < 1:
            raise G.ConfigurationError("iters must be at least 1")
        if self.history_window < 1:
            raise G.ConfigurationError("history_window must be at least 1")
        if not 0.0 <= self.iou_lambda <= 1.0:
            raise G.ConfigurationError("iou_lambda must lie in [0, 1]")
        if not self.zeta > 0:
            raise G.ConfigurationError("zeta must be positive")
        if self.normal_steps < 0 or self.csa_top_n < 1:
            raise G.ConfigurationError("normal_steps must be >= 0 and csa_top_n >= 1")

    def replace(self, **kw) -> "AttackConfig":
        return dataclasses.replace(self, **kw)


@dataclass
class PerturbationMap:
    values: np.ndarray
    frame_index: int = 0

    @classmethod
    def zeros(cls, shape, frame_index: int = 0) -> "PerturbationMap":
        return cls(np.zeros(shape), frame_index)


@dataclass
class AttackResult:
    adversarial: np.ndarray
    perturbation: PerturbationMap
    ssim: float
    l1: float
    loss_trace: list[float] = field(default_factory=list)
    mapping: CropMapping | None = None  # set for search-region attacks
    info: dict = field(default_factory=dict)

    @property
    def diagnostics(self) -> PerturbDiagnostics:
        return PerturbDiagnostics(self.ssim, self.l1)


def _require(attack_id: str, tracker) -> None:
    if not applicable(attack_id, tracker.capabilities):
        raise ApplicabilityError(
            f"{attack_id.upper()} is not applicable to tracker {getattr(tracker, 'name', tracker)!r}: "
            "Table 1 marks it N/A because the attack needs "
            + ("candidate classification/regression outputs and a search region"
               if attack_id.lower() in ("rtaa", "spark") else "template and search regions")
        )


def frame_rng(seed: int, sequence: str, frame_index: int, salt: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sequence.encode("utf-8")), int(frame_index), int(salt)])


def epsilon_project(p, epsilon: float):
    """Clamp every entry to ``[-epsilon, epsilon]``."""
    if not epsilon > 0:
        raise G.ConfigurationError("epsilon must be positive")
    if isinstance(p, PerturbationMap):
        return PerturbationMap(np.clip(p.values, -epsilon, epsilon), p.frame_index)
    return np.clip(np.asarray(p, dtype=np.float64), -epsilon, epsilon)


def _clamp(x: np.ndarray) -> np.ndarray:
    return np.clip(x, 0.0, 255.0)


# ---------------------------------------------------------------------------
# labels


def _xywh(anchors_cxcywh: np.ndarray) -> np.ndarray:
    a = anchors_cxcywh
    return np.stack([a[:, 0] - a[:, 2] / 2, a[:, 1] - a[:, 3] / 2, a[:, 2], a[:, 3]], axis=1)


def anchor_labels(anchors_cxcywh: np.ndarray, box: BBox) -> np.ndarray:
    """1 for IoU > 0.6, 0 below 0.3, -1 (ignored) in between."""
    iou = boxes_iou(_xywh(anchors_cxcywh), box)
    lab = np.full(iou.shape, -1.0)
    lab[iou > POS_IOU] = 1.0
    lab[iou < NEG_IOU] = 0.0
    if not np.any(lab == 1.0):
        lab[int(np.argmax(iou))] = 1.0
    return lab


def regression_targets(anchors_cxcywh: np.ndarray, box: BBox) -> np.ndarray:
    a = anchors_cxcywh
    cx, cy = box.center
    return np.stack([(cx - a[:, 0]) / a[:, 2], (cy - a[:, 1]) / a[:, 3],
                     np.log(max(box.w, 1e-6) / a[:, 2]) * np.ones(len(a)),
                     np.log(max(box.h, 1e-6) / a[:, 3]) * np.ones(len(a))], axis=1)


def rtaa_manipulate_labels(candidates, delta_offset: float, delta_scale: float) -> list[Candidate]:
    """Reverse binary labels and shift/scale every box by the given offsets."""
    cands = list(candidates)
    if not cands:
        raise DegenerateInputError("no candidates to manipulate")
    out = []
    for c in cands:
        b = c.bbox
        label = c.label if c.label is not None else int(c.cls_score > 0)
        new_label = label if label not in (0, 1) else 1 - label
        nb = BBox(b.x + delta_offset, b.y + delta_offset, b.w * delta_scale, b.h * delta_scale)
        out.append(Candidate(nb, c.cls_score, c.reg, new_label))
    return out


@dataclass(frozen=True)
class LabelSet:
    """Classification labels (1/0/-1) and regression targets over the anchor grid."""

    labels: np.ndarray
    targets: np.ndarray

    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        pos = self.labels == 1
        neg = self.labels == 0
        w = np.zeros(self.labels.shape)
        w[pos] = 1.0 / max(pos.sum(), 1)
        w[neg] = 1.0 / max(neg.sum(), 1)
        return w, pos


def label_set(anchors, box: BBox) -> LabelSet:
    return LabelSet(anchor_labels(anchors, box), regression_targets(anchors, box))


def tracking_loss(cls, reg, ls: LabelSet, reg_mask=None):
    """Class-balanced BCE plus smooth-L1 on positives; returns ``(value, g_cls, g_reg)``."""
    w, pos = ls.weights()
    y = np.clip(ls.labels, 0.0, 1.0)
    v_cls, g_cls = G.bce_with_logits(cls, y, w)
    mask = pos if reg_mask is None else reg_mask
    rw = np.zeros(reg.shape)
    rw[mask] = 1.0 / max(mask.sum(), 1)
    v_reg, g_reg = G.smooth_l1(reg, ls.targets, rw)
    return v_cls + v_reg, g_cls, g_reg


def rtaa_loss(cls, reg, truth: LabelSet, manipulated: LabelSet):
    """Loss on the true labels minus loss on the manipulated ones (to be ascended)."""
    _, pos = truth.weights()
    v1, gc1, gr1 = tracking_loss(cls, reg, truth)
    v2, gc2, gr2 = tracking_loss(cls, reg, manipulated, reg_mask=pos)
    return v1 - v2, gc1 - gc2, gr1 - gr2


def _crop_box(out_box: BBox, mapping: CropMapping) -> BBox:
    return mapping.box_to_crop(out_box)


# ---------------------------------------------------------------------------
# RTAA


def rtaa_attack(tracker, state: TrackerState, frame, prev_pert: PerturbationMap | None, cfg: AttackConfig,
                *, rng: np.random.Generator | None = None, frame_index: int = 0) -> AttackResult:
    """Iterative gradient-sign ascent on the search crop, warm-started from the last map.

    Each iteration adds ``clip_eps(P + alpha * sign(grad))`` to the current
    adversarial crop, clamps to [0, 255] and sets ``P = I_adv - I``.  The
    increment is bounded by epsilon but the iterate compounds, so the total
    perturbation can grow to ``iters * epsilon``.  Only the final map is
    carried to the next frame.
    """
    _require("rtaa", tracker)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    region, mapping = tracker.search_region(state, frame)
    P = np.zeros_like(region) if prev_pert is None else np.asarray(prev_pert.values, dtype=np.float64).copy()
    if P.shape != region.shape:
        raise G.DimensionError(f"previous perturbation {P.shape} does not match search region {region.shape}")
    kern = state.template_features
    anchors = tracker.anchors(kern)
    clean = tracker.predict_region(state, region, mapping)
    gt_crop = _crop_box(clean.bbox, mapping)
    d_off = float(rng.uniform(*cfg.offset_range)) * mapping.scale
    d_scale = float(rng.uniform(*cfg.scale_range))
    manip_box = BBox(gt_crop.x + d_off, gt_crop.y + d_off, gt_crop.w * d_scale, gt_crop.h * d_scale)
    truth = label_set(anchors, gt_crop)
    flipped = np.where(truth.labels >= 0, 1.0 - truth.labels, -1.0)
    manipulated = LabelSet(flipped, regression_targets(anchors, manip_box))

    adv = region.copy()
    trace, step_norms = [], []
    for _ in range(cfg.iters):
        heads = tracker.forward_region(state, adv)
        value, gc, gr = rtaa_loss(heads.cls, heads.reg, truth, manipulated)
        trace.append(value)
        g = tracker.backward_region(heads, gc, gr)
        step = epsilon_project(P + cfg.alpha * np.sign(g), cfg.epsilon)
        step_norms.append(float(np.max(np.abs(step))))
        adv = _clamp(adv + step)
        P = adv - region
    return AttackResult(adv, PerturbationMap(P, frame_index), ssim(region, adv), l1_norm(P), trace, mapping,
                        {"clean_region": region, "step_max_norm": step_norms,
                         "delta_offset": d_off, "delta_scale": d_scale})


# ---------------------------------------------------------------------------
# SPARK


def spark_regularizer(gamma: Sequence, reg_lambda: float) -> float:
    """``reg_lambda`` times the sum over frames of each incremental map's L2 norm."""
    total = 0.0
    for g in gamma:
        v = np.asarray(getattr(g, "values", g), dtype=np.float64)
        total += float(np.sqrt(np.sum(v * v)))
    return reg_lambda * total


def spark_target_box(box: BBox, direction: np.ndarray, shift: float) -> BBox:
    return BBox(box.x + direction[0] * shift * box.w, box.y + direction[1] * shift * box.h, box.w, box.h)


def spark_attack(tracker, state: TrackerState, frame, history: Sequence[PerturbationMap], cfg: AttackConfig,
                 *, direction: np.ndarray | None = None, frame_index: int = 0,
                 record: bool = False) -> AttackResult:
    """Online incremental attack with a running sum of the last K per-frame maps.

    Per iteration, with ``I'`` the clean search crop and the gradient taken at
    the current ``I_adv``: ``I_adv = clamp(I' + clip_eps(P - alpha * sign(grad)) + S)``,
    then ``P = I_adv - I' - S``.  The returned region is ``clamp(I + S_new)`` where
    ``S_new`` sums the updated window including this frame's ``P``.  The loss
    pulls the classification/regression outputs toward a displaced box and
    adds the group-sparse penalty on the incremental maps.  With ``record``
    the per-iteration ``(I', I_adv, P)`` triples and ``S`` are kept in ``info``.
    """
    _require("spark", tracker)
    region, mapping = tracker.search_region(state, frame)
    hist = list(history)[-cfg.history_window:]
    for h in hist:
        if h.values.shape != region.shape:
            raise G.DimensionError("history perturbation extents do not match the search region")
    P = hist[-1].values.copy() if hist else np.zeros_like(region)
    S = np.sum([h.values for h in hist], axis=0) if hist else np.zeros_like(region)
    direction = np.array([1.0, 0.0]) if direction is None else np.asarray(direction, dtype=np.float64)

    kern = state.template_features
    anchors = tracker.anchors(kern)
    clean = tracker.predict_region(state, region, mapping)
    target = spark_target_box(_crop_box(clean.bbox, mapping), direction, cfg.spark_shift)
    wanted = label_set(anchors, target)
    older = hist[-(cfg.history_window - 1):] if cfg.history_window > 1 else []
    base_reg = spark_regularizer(older, cfg.reg_lambda) if older else 0.0

    adv = _clamp(region + S + P)
    trace, step_norms, iterations = [], [], []
    for _ in range(cfg.iters):
        I_prime = region
        heads = tracker.forward_region(state, adv)
        value, gc, gr = tracking_loss(heads.cls, heads.reg, wanted)
        g = tracker.backward_region(heads, gc, gr)
        norm = float(np.sqrt(np.sum(P * P)))
        reg_value = base_reg + cfg.reg_lambda * norm
        if norm > 0:
            g = g + cfg.reg_lambda * P / norm
        trace.append(value + reg_value)
        step = epsilon_project(P - cfg.alpha * np.sign(g), cfg.epsilon)
        step_norms.append(float(np.max(np.abs(step))))
        adv = _clamp(I_prime + step + S)
        P = adv - I_prime - S
        if record:
            iterations.append((I_prime, adv.copy(), P.copy()))
    new_hist = (hist + [PerturbationMap(P, frame_index)])[-cfg.history_window:]
    S_new = np.sum([h.values for h in new_hist], axis=0)
    out = _clamp(region + S_new)
    return AttackResult(out, PerturbationMap(P, frame_index), ssim(region, out), l1_norm(out - region), trace,
                        mapping, {"clean_region": region, "history": new_hist, "step_max_norm": step_norms,
                                  "iterations": iterations, "running_sum": S})


# ---------------------------------------------------------------------------
# IoU (black-box, whole frame)


def iou_score(pred_noisy: BBox, pred_init: BBox, pred_prev: BBox, iou_lambda: float) -> float:
    if not 0.0 <= iou_lambda <= 1.0:
        raise G.ConfigurationError("iou_lambda must lie in [0, 1]")
    spatial = bbox_iou(pred_noisy, pred_init)
    temporal = bbox_iou(pred_noisy, pred_prev)
    if iou_lambda == 1.0:
        return spatial
    if iou_lambda == 0.0:
        return temporal
    return iou_lambda * spatial + (1.0 - iou_lambda) * temporal


def _l1_project(p: np.ndarray, zeta: float) -> np.ndarray:
    n = float(np.sum(np.abs(p)))
    if n <= zeta:
        return p
    scale = zeta / n
    q = p * scale
    while float(np.sum(np.abs(q))) > zeta:  # rounding can leave the sum a few ulps over
        scale = np.nextafter(scale, 0.0)
        q = p * scale
    return q


def _apply_bounded(clean: np.ndarray, cand: np.ndarray, zeta: float) -> tuple[np.ndarray, np.ndarray]:
    """``(adversarial frame, perturbation)`` for a candidate field, clamped to the
    pixel range with the perturbation's L1 kept at or below ``zeta`` exactly."""
    x = _clamp(clean + cand)
    E = x - clean
    if float(np.sum(np.abs(E))) > zeta:
        E = _l1_project(E, zeta)
        x = clean + E
    return x, E


def _noise_window(shape, around: BBox, rng: np.random.Generator, budget: float, block: int = 2):
    """Seeded uniform blocky noise inside a random sub-window near ``around``, scaled to L1 ``budget``."""
    H, W = shape[:2]
    C = shape[2] if len(shape) == 3 else 1
    side = max(4, int(round(max(around.w, around.h) * rng.uniform(0.4, 0.8))))
    cx, cy = around.center
    span = max(around.w, around.h)
    x0 = int(np.clip(round(cx + rng.uniform(-0.75, 0.75) * span - side / 2), 0, max(W - side, 0)))
    y0 = int(np.clip(round(cy + rng.uniform(-0.75, 0.75) * span - side / 2), 0, max(H - side, 0)))
    side_x, side_y = min(side, W), min(side, H)
    nb = -(-side // block)
    coarse = rng.uniform(-1.0, 1.0, size=(nb, nb, C))
    field_ = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:side_y, :side_x]
    out = np.zeros((H, W, C))
    out[y0:y0 + side_y, x0:x0 + side_x] = field_
    n = np.sum(np.abs(out))
    if n > 0:
        out *= budget / n
    return out.reshape(shape)


def _probe(tracker, state, frame):
    try:
        return tracker.predict(state, frame)
    except Exception:  # a failing probe is skipped and counted
        return None


def iou_attack(tracker, state: TrackerState, frame, cfg: AttackConfig, *, prev_pert: PerturbationMap | None = None,
               rng: np.random.Generator | None = None, frame_index: int = 0) -> AttackResult:
    """Query-only attack driven by the spatial/temporal IoU score.

    Starts from a fraction of the previous frame's perturbation, then runs a
    tangential phase (random noise kept only while the prediction stays put,
    IoU > 0.9 with the initial prediction) and a normal phase of at most
    ``normal_steps`` accepted noise increments, each accepted only if the IoU
    score strictly decreases.  Step size grows with the current score.  The
    total L1 never exceeds ``zeta``.
    """
    _require("iou", tracker)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    clean = np.asarray(frame, dtype=np.float64)
    E = np.zeros_like(clean)
    if prev_pert is not None and prev_pert.values.shape == clean.shape:
        E = _l1_project(cfg.iou_carry * prev_pert.values, cfg.zeta)
    adv, E = _apply_bounded(clean, E, cfg.zeta)
    skipped = 0
    init = _probe(tracker, state, adv)
    if init is None:
        return AttackResult(clean.copy(), PerturbationMap(np.zeros_like(clean), frame_index), 1.0, 0.0, [], None,
                            {"skipped_probes": 1, "accepted": 0, "l1_trace": [0.0]})
    pred_init, pred_prev = init.bbox, state.last_bbox
    score = iou_score(pred_init, pred_init, pred_prev, cfg.iou_lambda)
    step_budget = cfg.zeta / max(cfg.normal_steps, 1)
    trace, l1_trace = [score], [l1_norm(E)]

    for _ in range(cfg.tangential_probes):
        cand = _l1_project(E + _noise_window(clean.shape, pred_prev, rng, 0.5 * step_budget), cfg.zeta)
        x, cand = _apply_bounded(clean, cand, cfg.zeta)
        out = _probe(tracker, state, x)
        if out is None:
            skipped += 1
            continue
        if bbox_iou(out.bbox, pred_init) > 0.9:
            E, adv = cand, x
            l1_trace.append(l1_norm(E))

    accepted = 0
    for _ in range(cfg.normal_probes):
        if accepted >= cfg.normal_steps:
            break
        level = step_budget * (0.5 + score)
        cand = _l1_project(E + _noise_window(clean.shape, pred_prev, rng, level), cfg.zeta)
        x, cand = _apply_bounded(clean, cand, cfg.zeta)
        out = _probe(tracker, state, x)
        if out is None:
            skipped += 1
            continue
        s = iou_score(out.bbox, pred_init, pred_prev, cfg.iou_lambda)
        if s < score:
            score = s
            E, adv = cand, x
            accepted += 1
            trace.append(s)
            l1_trace.append(l1_norm(E))
    return AttackResult(adv, PerturbationMap(E, frame_index), ssim(clean, adv), l1_norm(E), trace, None,
                        {"skipped_probes": skipped, "accepted": accepted, "l1_trace": l1_trace})


# ---------------------------------------------------------------------------
# cooling-shrinking losses and the transfer attack


def _as_arrays(candidates):
    if isinstance(candidates, CandidateSet):
        return candidates.scores, candidates.reg
    cands = list(candidates)
    return (np.array([c.cls_score for c in cands], dtype=np.float64),
            np.array([c.reg for c in cands], dtype=np.float64).reshape(-1, 4))


def _top(scores: np.ndarray, n: int) -> np.ndarray:
    if scores.size == 0:
        raise DegenerateInputError("no candidates left after filtering")
    n = min(n, scores.size)
    return np.argsort(-scores, kind="stable")[:n]


def csa_losses(candidates, margins=(-5.0, -5.0, -5.0), N: int = 20) -> tuple[float, float]:
    """Cooling and shrinking terms over the ``N`` highest-scoring candidates.

    The classification score is the foreground-minus-background logit; the
    width/height factors are the log-scale regression outputs.
    """
    scores, reg = _as_arrays(candidates)
    idx = _top(scores, N)
    m_c, m_w, m_h = margins
    n = len(idx)
    cool = float(np.sum(np.maximum(scores[idx], m_c))) / n
    shrink = float(np.sum(np.maximum(reg[idx, 2], m_w))) / n + float(np.sum(np.maximum(reg[idx, 3], m_h))) / n
    return cool, shrink


def csa_loss_grad(cls: np.ndarray, reg: np.ndarray, margins, N: int):
    """``(value, g_cls, g_reg)`` of cooling + shrinking on the current top-N."""
    idx = _top(cls, N)
    m_c, m_w, m_h = margins
    n = len(idx)
    g_cls = np.zeros_like(cls)
    g_reg = np.zeros_like(reg)
    g_cls[idx] = (cls[idx] > m_c) / n
    g_reg[idx, 2] = (reg[idx, 2] > m_w) / n
    g_reg[idx, 3] = (reg[idx, 3] > m_h) / n
    cool = float(np.sum(np.maximum(cls[idx], m_c))) / n
    shrink = float(np.sum(np.maximum(reg[idx, 2], m_w)) + np.sum(np.maximum(reg[idx, 3], m_h))) / n
    return cool + shrink, g_cls, g_reg


def csa_template_perturbation(surrogate: SiamCorrTracker, frame, bbox: BBox, cfg: AttackConfig,
                              iters: int | None = None):
    """Perturb the template crop so the surrogate's first search response cools and shrinks."""
    iters = cfg.iters if iters is None else iters
    template, _ = surrogate.template_region(frame, bbox)
    state = surrogate.init_from_template(template, bbox)
    region, _ = surrogate.search_region(state, frame)
    P = np.zeros_like(template)
    for _ in range(iters):
        kern = surrogate.kernels_from_template(_clamp(template + P), bbox)
        heads = surrogate.forward_region(state, region, kernels=kern)
        _, gc, gr = csa_loss_grad(heads.cls, heads.reg, cfg.csa_margins, cfg.csa_top_n)
        _, g_stack = surrogate.backward_region(heads, gc, gr, wrt_kernels=True)
        g = surrogate.kernel_stack_backward(_clamp(template + P), g_stack)
        P = epsilon_project(P - cfg.alpha * np.sign(g), cfg.epsilon)
        P = _clamp(template + P) - template
    return template, P


def csa_attack(surrogate: SiamCorrTracker, target, state: TrackerState, frame, cfg: AttackConfig,
               *, surrogate_state: TrackerState, iters: int | None = None, frame_index: int = 0) -> AttackResult:
    """Gradient descent of cooling + shrinking through the surrogate on the target's search crop.

    The surrogate scores the target's own crop with its own template, so the
    perturbation transfers to whatever tracker consumes that crop.
    """
    _require("csa", target)
    iters = cfg.iters if iters is None else iters
    region, mapping = target.search_region(state, frame)
    P = np.zeros_like(region)
    adv = region.copy()
    trace = []
    for _ in range(iters):
        heads = surrogate.forward_region(surrogate_state, adv)
        value, gc, gr = csa_loss_grad(heads.cls, heads.reg, cfg.csa_margins, cfg.csa_top_n)
        trace.append(value)
        g = surrogate.backward_region(heads, gc, gr)
        P = epsilon_project(P - cfg.alpha * np.sign(g), cfg.epsilon)
        adv = _clamp(region + P)
        P = adv - region
    return AttackResult(adv, PerturbationMap(P, frame_index), ssim(region, adv), l1_norm(P), trace, mapping,
                        {"clean_region": region})


# ---------------------------------------------------------------------------
# per-sequence sessions


class AttackSession:
    """Drives one tracker through one run of a sequence under one attack.

    Implements the runner protocol used by :mod:`advtrack.evaluation`.
    """

    def __init__(self, attack_id: str, tracker, cfg: AttackConfig, sequence: str = "", run: int = 0,
                 surrogate: SiamCorrTracker | None = None):
        self.attack = attack_id.lower()
        if self.attack not in ("rtaa", "spark", "iou", "csa"):
            raise UnknownAttackError(f"unknown attack id {attack_id!r}")
        _require(self.attack, tracker)
        self.tracker = tracker
        self.cfg = cfg
        self.sequence = sequence
        self.run = run
        self.surrogate = surrogate or (tracker if isinstance(tracker, SiamCorrTracker) else SiamCorrTracker())
        self.prev: PerturbationMap | None = None
        self.history: list[PerturbationMap] = []
        self.erasures: list[int] = []
        self.results: list[AttackResult] = []
        self.surrogate_state = None
        self.direction = None

    def _rng(self, frame_index, salt=0):
        return frame_rng(self.cfg.seed, self.sequence, frame_index, salt + 7919 * self.run)

    def init(self, frame, bbox: BBox, frame_index: int = 0) -> TrackerState:
        self.prev, self.history = None, []
        ang = self._rng(frame_index, salt=1).uniform(0, 2 * np.pi)
        self.direction = np.array([np.cos(ang), np.sin(ang)])
        if self.attack == "csa":
            self.surrogate_state = self.surrogate.init(frame, bbox)
            if self.cfg.csa_template:
                template, P = csa_template_perturbation(self.surrogate, frame, bbox, self.cfg)
                # the search-crop attack is crafted against the template the victim actually holds
                self.surrogate_state = self.surrogate.init_from_template(_clamp(template + P), bbox)
                return self.tracker.init_from_template(_clamp(template + P), bbox)
        return self.tracker.init(frame, bbox)

    def _erase(self, frame_index: int) -> None:
        if self.cfg.erase_every and frame_index % self.cfg.erase_every == 0:
            self.prev, self.history = None, []
            self.erasures.append(frame_index)

    def attack_frame(self, state: TrackerState, frame, frame_index: int) -> AttackResult:
        cfg = self.cfg
        if self.attack == "rtaa":
            self._erase(frame_index)
            res = rtaa_attack(self.tracker, state, frame, self.prev, cfg, rng=self._rng(frame_index),
                              frame_index=frame_index)
            self.prev = res.perturbation
        elif self.attack == "spark":
            self._erase(frame_index)
            res = spark_attack(self.tracker, state, frame, self.history, cfg, direction=self.direction,
                               frame_index=frame_index)
            self.history = res.info["history"]
        elif self.attack == "iou":
            res = iou_attack(self.tracker, state, frame, cfg, prev_pert=self.prev, rng=self._rng(frame_index),
                             frame_index=frame_index)
            self.prev = res.perturbation
        else:
            res = csa_attack(self.surrogate, self.tracker, state, frame, cfg,
                             surrogate_state=self.surrogate_state, frame_index=frame_index)
        return res

    def step(self, state: TrackerState, frame, frame_index: int):
        res = self.attack_frame(state, frame, frame_index)
        self.results.append(res)
        if res.mapping is not None:
            out: TrackerOutput = self.tracker.track_region(state, res.adversarial, res.mapping)
        else:
            out = self.tracker.track(state, res.adversarial)
        return out, res.diagnostics


# ---------------------------------------------------------------------------
# gradient-check registrations for the attack losses (through siamcorr)


@functools.lru_cache(maxsize=1)
def _loss_fixture():
    from advtrack.data import MotionSpec, synth_sequence

    seq = synth_sequence(MotionSpec(kind="linear", size=(18.0, 14.0), start=(60.0, 64.0), velocity=(1.5, 0.5)),
                         3, seed=11)
    tracker = SiamCorrTracker()
    state = tracker.init(seq.frames[0], seq.gt_boxes[0])
    region, mapping = tracker.search_region(state, seq.frames[1])
    anchors = tracker.anchors(state.template_features)
    box = _crop_box(tracker.predict_region(state, region, mapping).bbox, mapping)
    truth = label_set(anchors, box)
    flipped = np.where(truth.labels >= 0, 1.0 - truth.labels, -1.0)
    manip = LabelSet(flipped, regression_targets(anchors, BBox(box.x + 2.0, box.y + 2.0, box.w * 1.3, box.h * 1.3)))
    wanted = label_set(anchors, spark_target_box(box, np.array([0.6, 0.8]), 0.5))
    return tracker, state, region, truth, manip, wanted


def _fixture_point(r: np.random.Generator):
    region = _loss_fixture()[2]
    return (region + r.uniform(-8.0, 8.0, size=region.shape),)


def _rtaa_value_grad(x):
    tracker, state, _, truth, manip, _ = _loss_fixture()
    heads = tracker.forward_region(state, x)
    v, gc, gr = rtaa_loss(heads.cls, heads.reg, truth, manip)
    return v, tracker.backward_region(heads, gc, gr)


_SPARK_CHECK_LAMBDA = 0.01


def _spark_value_grad(x):
    tracker, state, region, _, _, wanted = _loss_fixture()
    heads = tracker.forward_region(state, x)
    v, gc, gr = tracking_loss(heads.cls, heads.reg, wanted)
    P = x - region
    n = float(np.sqrt(np.sum(P * P)))
    return v + _SPARK_CHECK_LAMBDA * n, tracker.backward_region(heads, gc, gr) + _SPARK_CHECK_LAMBDA * P / n


def _csa_value_grad(x):
    tracker, state = _loss_fixture()[:2]
    heads = tracker.forward_region(state, x)
    v, gc, gr = csa_loss_grad(heads.cls, heads.reg, (-5.0, -5.0, -5.0), 20)
    return v, tracker.backward_region(heads, gc, gr)


for _name, _fn in (("siamcorr_rtaa_loss", _rtaa_value_grad), ("siamcorr_spark_loss", _spark_value_grad),
                   ("siamcorr_csa_loss", _csa_value_grad)):
    G.register(G.Op(_name, lambda x, _fn=_fn: np.array(_fn(x)[0]),
                    lambda g, x, _fn=_fn: (g * _fn(x)[1],), _fixture_point, check_coords=24))
