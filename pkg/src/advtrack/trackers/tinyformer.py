"""Small transformer tracker that predicts a box and a mask directly.

Template (32x32) and search (64x64) crops are cut into 4x4 patches and
embedded to 16-d tokens with a fixed seeded projection.  One frame of
tracking runs:

1. self-attention over the search tokens (:func:`eca`),
2. cross-attention search<-template and online-template<-search (:func:`cfa`),
3. one asymmetric mixed-attention block,
4. the variation-token step, which prepends last frame's hybrid template,
5. the rearranged cross-attention over ``[vt, it, ht, sr]``.

The head scores every search token by its nearest foreground match minus its
nearest background match among the hybrid-template tokens, adds a centre
prior, and squashes the result into a saliency map.  Upsampled and thresholded it is the mask; its
weighted centroid and spread give the box.  The head is a stand-in, not a
learned localisation network.  No candidate list is exposed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from advtrack.grad import Projections
from advtrack.trackers import blocks
from advtrack.trackers.base import (
    BBox,
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
PATCH = 4
DIM = 16
HEADS = 2

MIX_GAIN = 0.1
SAL_GAIN = 8.0
PRIOR_SIGMA = 3.0  # tokens
SIZE_MOMENTUM = 0.6
UPDATE_EVERY = 10
UPDATE_CONF = 0.95


def _patches(region: np.ndarray) -> np.ndarray:
    x = np.asarray(region, dtype=np.float64) / 255.0 - 0.5
    H, W, C = x.shape
    n, m = H // PATCH, W // PATCH
    return x.reshape(n, PATCH, m, PATCH, C).transpose(0, 2, 1, 3, 4).reshape(n * m, PATCH * PATCH * C)


def _positions(n: int, crop_size: int) -> np.ndarray:
    """Sinusoidal codes of patch-centre offsets from the crop centre (crop pixels)."""
    c = (np.arange(n) + 0.5) * PATCH - crop_size / 2
    yy, xx = np.meshgrid(c, c, indexing="ij")
    freqs = 1.0 / (8.0 * 4.0 ** np.arange(DIM // 4))
    parts = []
    for coord in (xx.reshape(-1), yy.reshape(-1)):
        ang = coord[:, None] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return 0.1 * np.concatenate(parts, axis=1)


@dataclass(frozen=True)
class Params:
    embed: np.ndarray
    eca: Projections
    cfa_s: Projections
    cfa_t: Projections
    ffn_s: blocks.FFN
    ffn_t: blocks.FFN
    mix: Projections
    enc: blocks.FFN
    rom: Projections


def _params(seed: int) -> Params:
    rng = np.random.default_rng(seed)
    d = DIM
    return Params(
        embed=rng.normal(0, 3.0 / np.sqrt(PATCH * PATCH * 3), (PATCH * PATCH * 3, d)),
        eca=Projections.random(d, rng, out_gain=MIX_GAIN),
        cfa_s=Projections.random(d, rng, out_gain=MIX_GAIN),
        cfa_t=Projections.random(d, rng, out_gain=MIX_GAIN),
        ffn_s=blocks.FFN.random(d, rng, gain=0.1),
        ffn_t=blocks.FFN.random(d, rng, gain=0.1),
        mix=Projections.random(d, rng),
        enc=blocks.FFN.random(d, rng, gain=MIX_GAIN),
        rom=Projections.random(d, rng),
    )


def _nearest_cosine(x: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Per row of ``x``, the best cosine similarity to any row of ``refs``."""
    xn = x / (np.linalg.norm(x, axis=1, keepdims=True) + 1e-12)
    rn = refs / (np.linalg.norm(refs, axis=1, keepdims=True) + 1e-12)
    return (xn @ rn.T).max(axis=1)


def upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resampling of an ``n x n`` map onto a ``size x size`` pixel grid (cell centres aligned)."""
    n = grid.shape[0]
    c = (np.arange(size) + 0.5) * n / size - 0.5
    rr, cc = np.meshgrid(c, c, indexing="ij")
    return ndimage.map_coordinates(grid, [rr, cc], order=1, mode="nearest")


class TinyFormerTracker:
    name = "tinyformer"
    capabilities = Capabilities(
        exposes_candidates=False, exposes_mask=True, has_search_region=True, has_template_region=True
    )

    def __init__(self, weight_seed: int = 1):
        self.p = _params(weight_seed)
        self.n_s = SEARCH_SIZE // PATCH
        self.n_t = TEMPLATE_SIZE // PATCH
        self.pos_s = _positions(self.n_s, SEARCH_SIZE)
        self.pos_t = _positions(self.n_t, TEMPLATE_SIZE)
        c = (np.arange(self.n_s) + 0.5) * PATCH
        self.tok_y, self.tok_x = (a.reshape(-1) for a in np.meshgrid(c, c, indexing="ij"))
        off = (np.arange(self.n_s) - (self.n_s - 1) / 2) ** 2
        self.prior = -(off[:, None] + off[None, :]).reshape(-1) / (2 * PRIOR_SIGMA**2)

    def _embed(self, region):
        return _patches(region) @ self.p.embed

    # -- init ---------------------------------------------------------------
    def template_region(self, frame, bbox: BBox):
        return crop_search_region(frame, bbox, TEMPLATE_SCALE, TEMPLATE_SIZE)

    def init_from_template(self, template: np.ndarray, bbox: BBox) -> TrackerState:
        if bbox.w * bbox.h <= 0:
            raise DegenerateTargetError(f"degenerate target box {bbox}")
        it = blocks.eca(self._embed(template), self.pos_t, HEADS, self.p.eca)
        scale = TEMPLATE_SIZE / (TEMPLATE_SCALE * max(bbox.w, bbox.h))
        c = (np.arange(self.n_t) + 0.5) * PATCH - TEMPLATE_SIZE / 2
        yy, xx = np.meshgrid(c, c, indexing="ij")
        fg = ((np.abs(xx) < bbox.w * scale / 2) & (np.abs(yy) < bbox.h * scale / 2)).reshape(-1)
        return TrackerState(
            template_features=it,
            last_bbox=bbox,
            frame_index=0,
            crop_size=(bbox.w, bbox.h),
            online_template=it.copy(),
            extras={"fg": fg, "size": (bbox.w, bbox.h)},
        )

    def init(self, frame, bbox: BBox) -> TrackerState:
        template, _ = self.template_region(frame, bbox)
        return self.init_from_template(template, bbox)

    # -- tracking -------------------------------------------------------------
    def search_region(self, state: TrackerState, frame):
        self._check(state)
        cx, cy = state.last_bbox.center
        w0, h0 = state.crop_size
        return crop_search_region(frame, BBox.from_center(cx, cy, w0, h0), SEARCH_SCALE, SEARCH_SIZE)

    @staticmethod
    def _check(state):
        if state is None or not isinstance(getattr(state, "template_features", None), np.ndarray):
            raise TrackerStateError("tinyformer: track called before init")

    def tokens(self, state: TrackerState, region: np.ndarray):
        """Run the attention stack; returns ``(search tokens, hybrid template, new state)``."""
        self._check(state)
        p = self.p
        it = state.template_features
        s1 = blocks.eca(self._embed(region), self.pos_s, HEADS, p.eca)
        s2 = blocks.cfa(s1, self.pos_s, it, self.pos_t, HEADS, p.cfa_s, p.ffn_s)
        t2 = blocks.cfa(state.online_template, self.pos_t, s1, self.pos_s, HEADS, p.cfa_t, p.ffn_t)
        m = p.mix
        both = np.concatenate([t2, s2])
        at, as_ = blocks.asymmetric_mixed_attention(t2 @ m.wq, t2 @ m.wk, t2 @ m.wv,
                                                    s2 @ m.wq, both @ m.wk, both @ m.wv)
        t3 = t2 + MIX_GAIN * at @ m.wo
        s3 = s2 + MIX_GAIN * as_ @ m.wo
        n_t = it.shape[0]

        def encoder(x):
            return x + p.enc(x)

        F, new_state = blocks.variation_token_step(state, np.concatenate([t3, s3]), encoder, hybrid_rows=n_t)
        vt, ht, sr = F[:n_t], F[n_t:2 * n_t], F[2 * n_t:]
        A = blocks.rom_cross_attention(it, ht, sr, vt, p.rom)
        sr = sr + MIX_GAIN * A[n_t:] @ p.rom.wo
        return sr, ht, new_state

    def saliency(self, state: TrackerState, sr: np.ndarray, ht: np.ndarray) -> np.ndarray:
        fg = state.extras["fg"]
        s = _nearest_cosine(sr, ht[fg]) - _nearest_cosine(sr, ht[~fg])
        logits = SAL_GAIN * s + self.prior
        return 1.0 / (1.0 + np.exp(-logits))

    def predict_region(self, state: TrackerState, region: np.ndarray, mapping: CropMapping) -> TrackerOutput:
        sr, ht, new_state = self.tokens(state, region)
        prob = self.saliency(state, sr, ht)
        grid = prob.reshape(self.n_s, self.n_s)
        dense = upsample_bilinear(grid, SEARCH_SIZE)
        mask = dense > 0.5
        w_prev, h_prev = state.extras["size"]
        weights = np.where(prob > 0.5, prob, 0.0)
        if weights.sum() < 1e-9:
            i = int(np.argmax(prob))
            cx, cy = self.tok_x[i], self.tok_y[i]
            w, h = w_prev * mapping.scale, h_prev * mapping.scale
        else:
            wn = weights / weights.sum()
            cx, cy = float(wn @ self.tok_x), float(wn @ self.tok_y)
            sx = np.sqrt(wn @ (self.tok_x - cx) ** 2 + PATCH**2 / 12)
            sy = np.sqrt(wn @ (self.tok_y - cy) ** 2 + PATCH**2 / 12)
            w = SIZE_MOMENTUM * w_prev * mapping.scale + (1 - SIZE_MOMENTUM) * np.sqrt(12) * sx
            h = SIZE_MOMENTUM * h_prev * mapping.scale + (1 - SIZE_MOMENTUM) * np.sqrt(12) * sy
        bbox = mapping.box_to_frame(BBox.from_center(cx, cy, w, h))
        conf = float(prob.max())
        return TrackerOutput(bbox=bbox, candidates=None, mask=mask, confidence=conf,
                             aux={"mapping": mapping, "state": new_state, "hybrid": ht, "saliency": grid})

    def commit(self, state: TrackerState, out: TrackerOutput) -> None:
        new = out.aux["state"]
        state.variation_token = new.variation_token
        state.hybrid_template = new.hybrid_template
        state.last_bbox = out.bbox
        state.frame_index += 1
        state.extras["size"] = (out.bbox.w, out.bbox.h)
        if state.frame_index % UPDATE_EVERY == 0 and (out.confidence or 0.0) >= UPDATE_CONF:
            state.online_template = out.aux["hybrid"].copy()

    def track_region(self, state, region, mapping) -> TrackerOutput:
        out = self.predict_region(state, region, mapping)
        self.commit(state, out)
        return out

    def predict(self, state, frame) -> TrackerOutput:
        region, mapping = self.search_region(state, frame)
        return self.predict_region(state, region, mapping)

    def track(self, state, frame) -> TrackerOutput:
        region, mapping = self.search_region(state, frame)
        return self.track_region(state, region, mapping)


_DEFAULT = None


def _default() -> TinyFormerTracker:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = TinyFormerTracker()
    return _DEFAULT


def tinyformer_init(frame, bbox: BBox) -> TrackerState:
    return _default().init(frame, bbox)


def tinyformer_track(state: TrackerState, frame) -> TrackerOutput:
    return _default().track(state, frame)
