"""Siamese correlation tracker with an anchor grid of classification/regression outputs.

Feature extractor: seeded 3x3 conv + ReLU, 2x2 average pooling, then a second
3x3 conv + ReLU.  The template features (zero-meaned per channel) are the correlation
kernel.  Five kernels derived from it are correlated with the search features
in one pass:

* the kernel itself (classification response),
* its horizontal and vertical central differences (sub-cell shift estimate),
* the differences weighted by the centred coordinate (log-scale estimate).

Each of the 17x17 response cells carries three anchors (aspect ratios 0.5, 1
and 2).  Everything from the search crop to the candidate outputs has an
analytic backward pass (:meth:`SiamCorrTracker.backward_region`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from advtrack import grad as G
from advtrack.trackers.base import (
    BBox,
    CandidateSet,
    Capabilities,
    CropMapping,
    DegenerateTargetError,
    TrackerOutput,
    TrackerState,
    TrackerStateError,
    crop_search_region,
)

SEARCH_SIZE = 64
TEMPLATE_SIZE = 32
SEARCH_SCALE = 4.0
TEMPLATE_SCALE = 2.0
STRIDE = 2.0
RATIOS = (0.5, 1.0, 2.0)

CLS_GAIN = 10.0
POS_WEIGHT = 1.5
POS_SIGMA = 4.0  # response cells
ASPECT_WEIGHT = 1.0
SCALE_RANGE = 0.2
SIZE_LR = 0.3


@dataclass(frozen=True)
class Kernels:
    """Per-sequence matching data computed from the template at init."""

    stack: np.ndarray  # 5 x C x 13 x 13
    r0: float
    curv: tuple[float, float]
    scale_norm: tuple[float, float]
    scale_base: tuple[float, float]
    anchor_wh: np.ndarray  # 3 x 2, crop pixels
    reg_bias: np.ndarray  # 3 x 2, log(target / anchor)
    aspect_prior: np.ndarray  # 3
    crop_scale: float


@dataclass
class Heads:
    """Raw outputs over the anchor grid (crop coordinates) plus the cache for backward."""

    cls: np.ndarray  # N
    reg: np.ndarray  # N x 4 (dx, dy, log w, log h)
    boxes: np.ndarray  # N x 4 decoded, crop coordinates
    cache: dict


def _weights(seed: int = 0):
    rng = np.random.default_rng(seed)
    w1 = rng.normal(0.0, 1.0, (8, 3, 3, 3))
    w1 -= w1.mean(axis=(1, 2, 3), keepdims=True)  # contrast filters
    w1 /= np.sqrt((w1**2).sum(axis=(1, 2, 3), keepdims=True))
    w1 *= 2.0
    b1 = rng.normal(0.0, 0.05, 8)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(72), (8, 8, 3, 3))
    b2 = np.full(8, 0.05)
    return w1, b1, w2, b2


def _features(region: np.ndarray, w):
    """Crop (H x W x 3, pixel values) to feature map; returns ``(feat, cache)``."""
    w1, b1, w2, b2 = w
    x = np.transpose(np.asarray(region, dtype=np.float64), (2, 0, 1)) / 255.0 - 0.5
    z1 = G.conv2d(x, w1, b1)
    p = G.avgpool2(G.relu(z1))
    z2 = G.conv2d(p, w2, b2)
    return G.relu(z2), (x, z1, p, z2)


def _features_backward(g_feat, cache, w):
    w1, _, w2, _ = w
    x, z1, p, z2 = cache
    g = G.relu_backward(g_feat, z2)
    g, _, _ = G.conv2d_backward(g, p, w2)
    g = G.relu_backward(G.avgpool2_backward(g), z1)
    g, _, _ = G.conv2d_backward(g, x, w1)
    return np.transpose(g, (1, 2, 0)) / 255.0


def _derived_kernels(K: np.ndarray) -> np.ndarray:
    pad = np.pad(K, ((0, 0), (1, 1), (1, 1)))
    dx = 0.5 * (pad[:, 1:-1, 2:] - pad[:, 1:-1, :-2])
    dy = 0.5 * (pad[:, 2:, 1:-1] - pad[:, :-2, 1:-1])
    h, w = K.shape[1:]
    u = np.arange(w) - (w - 1) / 2
    v = np.arange(h) - (h - 1) / 2
    derived = np.stack([dx, dy, dx * u[None, None, :], dy * v[None, :, None]])
    # zero mean per channel, so a constant feature offset does not move the estimates
    derived -= derived.mean(axis=(2, 3), keepdims=True)
    return np.concatenate([K[None], derived])


def _correlate(feat, stack):
    h, w = stack.shape[2:]
    win = sliding_window_view(feat, (h, w), axis=(1, 2))
    return np.einsum("cyxij,kcij->kyx", win, stack, optimize=True)


def _correlate_backward(g, feat, stack):
    """Gradient w.r.t. the search features and the kernel stack."""
    h, w = stack.shape[2:]
    g_feat = np.zeros_like(feat)
    g_stack = np.empty_like(stack)
    for m in range(stack.shape[0]):
        gf, gk = G.xcorr2d_backward(g[m], feat, stack[m])
        g_feat += gf
        g_stack[m] = gk
    return g_feat, g_stack


class SiamCorrTracker:
    """Correlation tracker exposing per-anchor classification and regression."""

    name = "siamcorr"
    capabilities = Capabilities(
        exposes_candidates=True, exposes_mask=False, has_search_region=True, has_template_region=True
    )

    def __init__(self, weight_seed: int = 0):
        self.weights = _weights(weight_seed)
        n_feat = ((SEARCH_SIZE - 2) // 2 - 2) - ((TEMPLATE_SIZE - 2) // 2 - 2) + 1
        self.grid = n_feat
        c = (n_feat - 1) / 2
        ys, xs = np.mgrid[0:n_feat, 0:n_feat]
        # crop-pixel centre of each response cell
        self.cell_x = STRIDE * (xs - c) + SEARCH_SIZE / 2
        self.cell_y = STRIDE * (ys - c) + SEARCH_SIZE / 2
        self.pos_prior = -POS_WEIGHT * ((xs - c) ** 2 + (ys - c) ** 2) / POS_SIGMA**2

    # -- template ---------------------------------------------------------
    def template_region(self, frame, bbox: BBox):
        return crop_search_region(frame, bbox, TEMPLATE_SCALE, TEMPLATE_SIZE)

    def kernels_from_template(self, template: np.ndarray, bbox: BBox) -> Kernels:
        feat, _ = _features(template, self.weights)
        K = feat - feat.mean(axis=(1, 2), keepdims=True)
        stack = _derived_kernels(K)
        r0 = float(np.sum(K * K)) + 1e-12
        curv = (float(np.sum(stack[1] ** 2)) + 1e-12, float(np.sum(stack[2] ** 2)) + 1e-12)
        scale_norm = (float(np.sum(stack[3] ** 2)) + 1e-12, float(np.sum(stack[4] ** 2)) + 1e-12)
        base = np.einsum("kcij,cij->k", stack[3:], K)
        crop_scale = TEMPLATE_SIZE / (TEMPLATE_SCALE * max(bbox.w, bbox.h))
        tw, th = bbox.w * crop_scale, bbox.h * crop_scale
        side = np.sqrt(tw * th)
        ratios = np.array(RATIOS)
        anchor_wh = np.stack([side * np.sqrt(ratios), side / np.sqrt(ratios)], axis=1)
        reg_bias = np.log(np.array([tw, th])[None, :] / anchor_wh)
        aspect_prior = -ASPECT_WEIGHT * np.abs(np.log(ratios) - np.log(tw / th))
        return Kernels(stack, r0, curv, scale_norm, (float(base[0]), float(base[1])),
                       anchor_wh, reg_bias, aspect_prior, crop_scale)

    def init_from_template(self, template: np.ndarray, bbox: BBox) -> TrackerState:
        if bbox.w * bbox.h <= 0:
            raise DegenerateTargetError(f"degenerate target box {bbox}")
        kern = self.kernels_from_template(template, bbox)
        return TrackerState(template_features=kern, last_bbox=bbox, frame_index=0, crop_size=(bbox.w, bbox.h))

    def init(self, frame, bbox: BBox) -> TrackerState:
        template, _ = self.template_region(frame, bbox)
        return self.init_from_template(template, bbox)

    # -- search region ----------------------------------------------------
    def search_region(self, state: TrackerState, frame):
        self._check(state)
        cx, cy = state.last_bbox.center
        w0, h0 = state.crop_size
        return crop_search_region(frame, BBox.from_center(cx, cy, w0, h0), SEARCH_SCALE, SEARCH_SIZE)

    @staticmethod
    def _check(state):
        if state is None or not isinstance(getattr(state, "template_features", None), Kernels):
            raise TrackerStateError("siamcorr: track called before init")

    def forward_region(self, state: TrackerState, region: np.ndarray, kernels: Kernels | None = None) -> Heads:
        """Anchor-grid outputs for a search crop; pure."""
        self._check(state)
        kern = kernels if kernels is not None else state.template_features
        feat, fcache = _features(region, self.weights)
        maps = _correlate(feat, kern.stack)
        r, cx, cy, sx, sy = maps
        na = len(RATIOS)
        cls = CLS_GAIN * (r / kern.r0 - 0.5)[..., None] + self.pos_prior[..., None] + kern.aspect_prior
        tx = np.tanh(-cx / kern.curv[0])
        ty = np.tanh(-cy / kern.curv[1])
        ax = np.tanh(-(sx - kern.scale_base[0]) / kern.scale_norm[0] / SCALE_RANGE)
        ay = np.tanh(-(sy - kern.scale_base[1]) / kern.scale_norm[1] / SCALE_RANGE)
        aw, ah = kern.anchor_wh[:, 0], kern.anchor_wh[:, 1]
        reg = np.empty(cls.shape + (4,))
        reg[..., 0] = STRIDE * tx[..., None] / aw
        reg[..., 1] = STRIDE * ty[..., None] / ah
        reg[..., 2] = kern.reg_bias[:, 0] + SCALE_RANGE * ax[..., None]
        reg[..., 3] = kern.reg_bias[:, 1] + SCALE_RANGE * ay[..., None]
        cls = cls.reshape(-1)
        reg = reg.reshape(-1, 4)
        boxes = self.decode(reg, kern)
        cache = dict(feat=feat, fcache=fcache, tanh=(tx, ty, ax, ay), kern=kern, na=na)
        return Heads(cls, reg, boxes, cache)

    def anchors(self, kern: Kernels) -> np.ndarray:
        """Anchor boxes ``N x 4`` (centre x, centre y, w, h) in crop coordinates."""
        na = len(RATIOS)
        cx = np.repeat(self.cell_x[..., None], na, axis=-1).reshape(-1)
        cy = np.repeat(self.cell_y[..., None], na, axis=-1).reshape(-1)
        w = np.broadcast_to(kern.anchor_wh[:, 0], self.cell_x.shape + (na,)).reshape(-1)
        h = np.broadcast_to(kern.anchor_wh[:, 1], self.cell_x.shape + (na,)).reshape(-1)
        return np.stack([cx, cy, w, h], axis=1)

    def decode(self, reg: np.ndarray, kern: Kernels) -> np.ndarray:
        """Regression offsets to ``x, y, w, h`` boxes (crop coordinates)."""
        a = self.anchors(kern)
        cx = a[:, 0] + reg[:, 0] * a[:, 2]
        cy = a[:, 1] + reg[:, 1] * a[:, 3]
        w = a[:, 2] * np.exp(reg[:, 2])
        h = a[:, 3] * np.exp(reg[:, 3])
        return np.stack([cx - w / 2, cy - h / 2, w, h], axis=1)

    def backward_region(self, heads: Heads, g_cls: np.ndarray, g_reg: np.ndarray | None = None,
                        wrt_kernels: bool = False):
        """Gradient of ``sum(g_cls * cls) + sum(g_reg * reg)`` w.r.t. the search crop.

        With ``wrt_kernels`` also returns the gradient w.r.t. the kernel stack
        (normalisers held fixed).
        """
        c = heads.cache
        kern: Kernels = c["kern"]
        n = self.grid
        na = c["na"]
        g_cls = np.asarray(g_cls, dtype=np.float64).reshape(n, n, na)
        g_reg = np.zeros((n, n, na, 4)) if g_reg is None else np.asarray(g_reg, dtype=np.float64).reshape(n, n, na, 4)
        tx, ty, ax, ay = c["tanh"]
        aw, ah = kern.anchor_wh[:, 0], kern.anchor_wh[:, 1]
        g_maps = np.empty((5, n, n))
        g_maps[0] = CLS_GAIN / kern.r0 * g_cls.sum(axis=-1)
        g_maps[1] = (g_reg[..., 0] * STRIDE / aw).sum(-1) * (1 - tx**2) * (-1.0 / kern.curv[0])
        g_maps[2] = (g_reg[..., 1] * STRIDE / ah).sum(-1) * (1 - ty**2) * (-1.0 / kern.curv[1])
        g_maps[3] = g_reg[..., 2].sum(-1) * (1 - ax**2) * (-1.0 / kern.scale_norm[0])
        g_maps[4] = g_reg[..., 3].sum(-1) * (1 - ay**2) * (-1.0 / kern.scale_norm[1])
        g_feat, g_stack = _correlate_backward(g_maps, c["feat"], kern.stack)
        g_region = _features_backward(g_feat, c["fcache"], self.weights)
        if wrt_kernels:
            return g_region, g_stack
        return g_region

    def kernel_stack_backward(self, template: np.ndarray, g_stack: np.ndarray) -> np.ndarray:
        """Pull a kernel-stack gradient back to template pixels."""
        feat, fcache = _features(template, self.weights)
        K = feat - feat.mean(axis=(1, 2), keepdims=True)
        h, w = K.shape[1:]
        u = np.arange(w) - (w - 1) / 2
        v = np.arange(h) - (h - 1) / 2
        g_der = g_stack[1:] - g_stack[1:].mean(axis=(2, 3), keepdims=True)
        gdx = g_der[0] + g_der[2] * u[None, None, :]
        gdy = g_der[1] + g_der[3] * v[None, :, None]
        gK = g_stack[0].copy()
        # adjoint of the central differences with zero padding
        gp = np.zeros((K.shape[0], h + 2, w + 2))
        gp[:, 1:-1, 2:] += 0.5 * gdx
        gp[:, 1:-1, :-2] -= 0.5 * gdx
        gp[:, 2:, 1:-1] += 0.5 * gdy
        gp[:, :-2, 1:-1] -= 0.5 * gdy
        gK += gp[:, 1:-1, 1:-1]
        g_feat = gK - gK.mean(axis=(1, 2), keepdims=True)
        return _features_backward(g_feat, fcache, self.weights)

    # -- tracking ---------------------------------------------------------
    def predict_region(self, state: TrackerState, region: np.ndarray, mapping: CropMapping,
                       heads: Heads | None = None) -> TrackerOutput:
        """Prediction for a (possibly perturbed) search crop without touching ``state``."""
        if heads is None:
            heads = self.forward_region(state, region)
        i = int(np.argmax(heads.cls))
        frame_boxes = np.empty_like(heads.boxes)
        frame_boxes[:, :2] = heads.boxes[:, :2] / mapping.scale + np.array([mapping.ox, mapping.oy])
        frame_boxes[:, 2:] = heads.boxes[:, 2:] / mapping.scale
        cands = CandidateSet(frame_boxes, heads.cls, heads.reg)
        bbox = BBox.from_array(frame_boxes[i])
        conf = float(1.0 / (1.0 + np.exp(-heads.cls[i])))
        return TrackerOutput(bbox=bbox, candidates=cands, confidence=conf,
                             aux={"heads": heads, "mapping": mapping, "argmax": i})

    def commit(self, state: TrackerState, out: TrackerOutput) -> None:
        state.last_bbox = out.bbox
        state.frame_index += 1
        # the crop follows a confidence-weighted running estimate of the target size
        lr = SIZE_LR * (out.confidence or 0.0)
        w0, h0 = state.crop_size
        state.crop_size = ((1 - lr) * w0 + lr * out.bbox.w, (1 - lr) * h0 + lr * out.bbox.h)

    def track_region(self, state, region, mapping) -> TrackerOutput:
        out = self.predict_region(state, region, mapping)
        self.commit(state, out)
        return out

    def predict(self, state: TrackerState, frame) -> TrackerOutput:
        region, mapping = self.search_region(state, frame)
        return self.predict_region(state, region, mapping)

    def track(self, state: TrackerState, frame) -> TrackerOutput:
        region, mapping = self.search_region(state, frame)
        return self.track_region(state, region, mapping)


_DEFAULT = None


def _default() -> SiamCorrTracker:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = SiamCorrTracker()
    return _DEFAULT


def siamcorr_init(frame, bbox: BBox) -> TrackerState:
    return _default().init(frame, bbox)


def siamcorr_track(state: TrackerState, frame) -> TrackerOutput:
    return _default().track(state, frame)
