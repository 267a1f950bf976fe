"""Types shared by the toy trackers: boxes, candidates, capability flags, crops."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np
from scipy import ndimage


class DegenerateTargetError(ValueError):
    pass


class TrackerStateError(RuntimeError):
    pass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box, top-left corner plus extents, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box extent: {self}")

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BBox":
        return cls(float(cx - w / 2), float(cy - h / 2), float(w), float(h))

    @classmethod
    def from_array(cls, a) -> "BBox":
        x, y, w, h = (float(v) for v in a)
        return cls(x, y, w, h)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2, self.y + self.h / 2)

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class Candidate:
    """One anchor's proposal: decoded box, foreground logit and raw regression.

    ``label`` is only set on training-style label sets (e.g. attack targets).
    """

    bbox: BBox
    cls_score: float
    reg: tuple[float, float, float, float]
    label: int | None = None


class CandidateSet:
    """Array-backed candidate list (one entry per anchor).

    Iterating or indexing yields :class:`Candidate` objects; the arrays are
    kept for vectorised use by the attacks.
    """

    def __init__(self, boxes: np.ndarray, scores: np.ndarray, reg: np.ndarray):
        self.boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(scores, dtype=np.float64).reshape(-1)
        self.reg = np.asarray(reg, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return self.scores.size

    def __getitem__(self, i: int) -> Candidate:
        return Candidate(BBox.from_array(self.boxes[i]), float(self.scores[i]), tuple(float(v) for v in self.reg[i]))

    def __iter__(self) -> Iterator[Candidate]:
        return (self[i] for i in range(len(self)))

    def argmax(self) -> int:
        return int(np.argmax(self.scores))


@dataclass(frozen=True)
class Capabilities:
    exposes_candidates: bool
    exposes_mask: bool
    has_search_region: bool
    has_template_region: bool


@dataclass
class TrackerState:
    """Per-sequence mutable tracker state.

    ``template_features`` holds whatever the tracker matches against (the
    correlation kernels, or the inherit-template tokens).  The token fields are
    only used by the transformer tracker.
    """

    template_features: Any
    last_bbox: BBox
    frame_index: int = 0
    crop_size: tuple[float, float] = (0.0, 0.0)
    hybrid_template: np.ndarray | None = None
    variation_token: np.ndarray | None = None
    online_template: np.ndarray | None = None
    extras: dict = field(default_factory=dict, repr=False)


@dataclass
class TrackerOutput:
    bbox: BBox
    candidates: CandidateSet | None = None
    mask: np.ndarray | None = None
    confidence: float | None = None
    aux: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------------------
# cropping


@dataclass(frozen=True)
class CropMapping:
    """Affine map between frame pixels and crop pixels: ``crop = (frame - origin) * scale``."""

    ox: float
    oy: float
    scale: float
    size: int

    def to_crop(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return (p - np.array([self.ox, self.oy])) * self.scale

    def to_frame(self, pts) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64)
        return p / self.scale + np.array([self.ox, self.oy])

    def box_to_crop(self, b: BBox) -> BBox:
        (x, y) = self.to_crop([b.x, b.y])
        return BBox(float(x), float(y), b.w * self.scale, b.h * self.scale)

    def box_to_frame(self, b: BBox) -> BBox:
        (x, y) = self.to_frame([b.x, b.y])
        return BBox(float(x), float(y), b.w / self.scale, b.h / self.scale)

    def mask_to_frame(self, mask: np.ndarray, frame_shape: tuple[int, int]) -> np.ndarray:
        """Nearest-neighbour resampling of a crop mask onto the frame grid."""
        H, W = frame_shape
        ys = (np.arange(H) + 0.5 - self.oy) * self.scale
        xs = (np.arange(W) + 0.5 - self.ox) * self.scale
        iy = np.floor(ys).astype(int)
        ix = np.floor(xs).astype(int)
        vy = (iy >= 0) & (iy < mask.shape[0])
        vx = (ix >= 0) & (ix < mask.shape[1])
        out = np.zeros((H, W), dtype=bool)
        out[np.ix_(vy, vx)] = mask[np.ix_(iy[vy], ix[vx])].astype(bool)
        return out


def crop_search_region(frame: np.ndarray, center: BBox, scale: float, out_size: int | None = None):
    """Square crop of side ``scale * max(w, h)`` centred on ``center``.

    The crop is resampled bilinearly to ``out_size`` pixels a side (the
    rounded side when omitted); samples outside the frame replicate the edge.
    Returns ``(crop, mapping)`` with ``crop`` as ``out x out x C`` float64.
    """
    if scale <= 1:
        raise ValueError("crop scale must exceed 1")
    if center.w * center.h == 0:
        raise DegenerateTargetError(f"degenerate target box {center}")
    side = scale * max(center.w, center.h)
    if out_size is None:
        out_size = max(1, int(round(side)))
    cx, cy = center.center
    mapping = CropMapping(cx - side / 2, cy - side / 2, out_size / side, out_size)
    img = np.asarray(frame, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    g = (np.arange(out_size) + 0.5) / mapping.scale - 0.5
    rows = g + mapping.oy
    cols = g + mapping.ox
    # integer-aligned interior crops are plain slices
    r0, c0 = rows[0], cols[0]
    step = 1.0 / mapping.scale
    if (step == 1.0 and float(r0).is_integer() and float(c0).is_integer() and r0 >= 0 and c0 >= 0
            and r0 + out_size <= img.shape[0] and c0 + out_size <= img.shape[1]):
        r0, c0 = int(r0), int(c0)
        return img[r0:r0 + out_size, c0:c0 + out_size].copy(), mapping
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    crop = np.stack(
        [ndimage.map_coordinates(img[:, :, ch], [rr, cc], order=1, mode="nearest") for ch in range(img.shape[2])],
        axis=-1,
    )
    return crop, mapping
