"""Deterministic synthetic tracking sequences and their on-disk format.

A dataset directory looks like::

    <dataset>/<sequence>/frames/00000000.ppm
                         masks/00000000.pgm
                         groundtruth.txt      # one "x,y,w,h" line per frame
                         anchors.txt          # one frame index per line
                         meta.json
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from advtrack.trackers.base import BBox


class SequenceParseError(ValueError):
    """Malformed sequence file; the message names the file and line/byte."""


@dataclass
class SequenceRecord:
    frames: list[np.ndarray]  # H x W x 3 uint8
    gt_boxes: list[BBox]
    gt_masks: list[np.ndarray]  # H x W bool
    anchors: list[int]
    name: str
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (len(self.frames) == len(self.gt_boxes) == len(self.gt_masks)):
            raise ValueError("frames, gt_boxes and gt_masks must have equal lengths")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def extents(self) -> tuple[int, int]:
        return self.frames[0].shape[:2]


@dataclass
class MotionSpec:
    """Motion and appearance parameters of one synthetic sequence.

    ``kind`` is ``linear`` (bounces off the borders), ``circular`` or
    ``random_walk``.  Sizes are in pixels, speeds in pixels per frame.
    """

    kind: str = "linear"
    size: tuple[float, float] = (16.0, 16.0)
    start: tuple[float, float] | None = None  # centre; frame centre when omitted
    velocity: tuple[float, float] = (0.0, 0.0)
    radius: float = 20.0
    angular_speed: float = 0.05
    walk_sigma: float = 1.5
    scale_rate: float = 0.0  # relative size change per frame
    shape: str = "rect"  # rect | ellipse
    distractors: int = 0
    clutter: float = 0.5  # background texture amplitude in [0, 1]


def place_anchors(length: int, spacing: int = 50) -> list[int]:
    """Anchor frames every ``spacing`` frames, keeping at least one frame to track."""
    return [a for a in range(0, length, spacing) if a < length - 1] or [0]


def _centres(spec: MotionSpec, length: int, extents, rng: np.random.Generator) -> np.ndarray:
    H, W = extents
    cx0, cy0 = spec.start if spec.start is not None else (W / 2, H / 2)
    out = np.empty((length, 2))
    if spec.kind == "circular":
        t = np.arange(length)
        out[:, 0] = cx0 + spec.radius * np.cos(spec.angular_speed * t)
        out[:, 1] = cy0 + spec.radius * np.sin(spec.angular_speed * t)
        return out
    c = np.array([cx0, cy0], dtype=np.float64)
    v = np.array(spec.velocity, dtype=np.float64)
    for t in range(length):
        out[t] = c
        if spec.kind == "random_walk":
            v = 0.8 * v + rng.normal(0.0, spec.walk_sigma, 2)
        elif spec.kind != "linear":
            raise ValueError(f"unknown motion kind {spec.kind!r}")
        c = c + v
    return out


def _reflect(centres: np.ndarray, half: np.ndarray, extents) -> np.ndarray:
    """Fold positions back into the frame so the object never leaves it."""
    H, W = extents
    out = centres.copy()
    for axis, lim in ((0, W), (1, H)):
        lo, hi = half[:, axis], lim - half[:, axis]
        span = hi - lo
        p = np.mod(out[:, axis] - lo, 2 * span)
        out[:, axis] = lo + np.where(p > span, 2 * span - p, p)
    return out


def _smooth_noise(rng, shape, sigma) -> np.ndarray:
    n = ndimage.gaussian_filter(rng.normal(size=shape), sigma)
    return n / (np.abs(n).max() + 1e-12)


def _texture(rng):
    """Random smooth colour texture as a function of object-relative coordinates."""
    k = rng.uniform(0.15, 0.6, size=(3, 2))
    ph = rng.uniform(0, 2 * np.pi, size=3)
    base = rng.uniform(150, 230)
    tint = np.array([1.0, rng.uniform(0.25, 0.55), rng.uniform(0.1, 0.4)])
    rng.shuffle(tint)

    def tex(u, v):
        s = sum(np.sin(k[i, 0] * u + k[i, 1] * v + ph[i]) for i in range(3)) / 3.0
        lum = base + 45.0 * s
        return lum[..., None] * tint

    return tex


def _shape_mask(kind, cx, cy, w, h, xs, ys):
    if kind == "ellipse":
        return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    return (np.abs(xs - cx) <= w / 2) & (np.abs(ys - cy) <= h / 2)


def synth_sequence(spec: MotionSpec, length: int, extents=(128, 128), seed: int = 0,
                   name: str | None = None, anchor_spacing: int = 50) -> SequenceRecord:
    """Render a textured shape moving over a cluttered background."""
    if length < 2:
        raise ValueError("a sequence needs at least two frames")
    H, W = extents
    w0, h0 = spec.size
    grow = (1.0 + spec.scale_rate) ** np.arange(length)
    sizes = np.stack([w0 * grow, h0 * grow], axis=1)
    if sizes[:, 0].max() >= W or sizes[:, 1].max() >= H:
        raise ValueError("object larger than the frame")
    rng = np.random.default_rng(seed)
    centres = _reflect(_centres(spec, length, extents, rng), sizes / 2, extents)

    bg_tint = rng.uniform(0.5, 1.0, size=3)
    background = 110.0 + 70.0 * spec.clutter * _smooth_noise(rng, (H, W), 2.5)[..., None] * bg_tint
    background = background + 25.0 * spec.clutter * _smooth_noise(rng, (H, W, 3), 1.0)
    texture = _texture(rng)

    distractors = []
    for _ in range(spec.distractors):
        d_size = rng.uniform(0.6, 1.0, 2) * np.array([w0, h0])
        d_start = rng.uniform(d_size, [W - d_size[0], H - d_size[1]])
        d_vel = rng.uniform(-1.5, 1.5, 2)
        d_tex = _texture(rng)
        distractors.append((d_size, d_start, d_vel, d_tex))

    ys, xs = np.mgrid[0:H, 0:W] + 0.5
    frames, boxes, masks = [], [], []
    for t in range(length):
        img = background.copy()
        for d_size, d_start, d_vel, d_tex in distractors:
            dc = _reflect((d_start + t * d_vel)[None], d_size[None] / 2, extents)[0]
            m = _shape_mask("ellipse", dc[0], dc[1], d_size[0], d_size[1], xs, ys)
            img[m] = d_tex(xs[m] - dc[0], ys[m] - dc[1])
        cx, cy = centres[t]
        w, h = sizes[t]
        m = _shape_mask(spec.shape, cx, cy, w, h, xs, ys)
        img[m] = texture((xs[m] - cx) / grow[t], (ys[m] - cy) / grow[t])
        frames.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
        boxes.append(BBox.from_center(cx, cy, w, h))
        masks.append(m)
    # round-tripped through JSON so a saved and reloaded record compares equal
    meta = json.loads(json.dumps({"motion": asdict(spec), "extents": [H, W], "length": length}))
    return SequenceRecord(frames, boxes, masks, place_anchors(length, anchor_spacing),
                          name or f"synth_{seed:04d}", seed, meta)


def random_motion(rng: np.random.Generator, extents=(128, 128)) -> MotionSpec:
    """Draw a motion/appearance spec for the benchmark suite."""
    H, W = extents
    kind = ["linear", "circular", "random_walk"][int(rng.integers(3))]
    side = rng.uniform(14, 20) * min(H, W) / 128
    aspect = rng.uniform(0.75, 1.33)
    size = (float(side * np.sqrt(aspect)), float(side / np.sqrt(aspect)))
    speed = rng.uniform(0.5, 2.0)
    ang = rng.uniform(0, 2 * np.pi)
    return MotionSpec(
        kind=kind,
        size=size,
        start=(float(rng.uniform(0.35, 0.65) * W), float(rng.uniform(0.35, 0.65) * H)),
        velocity=(float(speed * np.cos(ang)), float(speed * np.sin(ang))),
        radius=float(rng.uniform(10, 30)),
        angular_speed=float(rng.uniform(0.03, 0.08) * rng.choice([-1, 1])),
        walk_sigma=float(rng.uniform(0.3, 0.8)),
        shape=["rect", "ellipse"][int(rng.integers(2))],
        distractors=int(rng.integers(0, 2)),
        clutter=float(rng.uniform(0.3, 0.8)),
    )


def synth_suite(count: int = 20, length: int = 100, extents=(128, 128), seed: int = 0) -> list[SequenceRecord]:
    """``count`` sequences with per-sequence seeds derived from ``seed``."""
    seeds = np.random.SeedSequence(seed).generate_state(count)
    out = []
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(int(s))
        spec = random_motion(rng, extents)
        out.append(synth_sequence(spec, length, extents, seed=int(s), name=f"seq{i:03d}"))
    return out


# ---------------------------------------------------------------------------
# PPM / PGM / text IO


def _write_pnm(path: Path, img: np.ndarray, magic: bytes):
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def _read_pnm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise SequenceParseError(f"{path}: truncated header at byte {pos}")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise SequenceParseError(f"{path}: bad magic {tokens[0]!r} at byte 0, expected {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise SequenceParseError(f"{path}: non-integer header field near byte {pos}") from None
    if maxval != 255:
        raise SequenceParseError(f"{path}: unsupported maxval {maxval} near byte {pos}")
    pos += 1  # single whitespace after maxval
    n = w * h * channels
    body = data[pos:pos + n]
    if len(body) != n:
        raise SequenceParseError(f"{path}: expected {n} pixel bytes at byte {pos}, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def parse_box_line(line: str, lineno: int = 1, source: str = "groundtruth.txt") -> BBox:
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise SequenceParseError(f"{source}:{lineno}: expected 'x,y,w,h', got {line.strip()!r}")
    try:
        return BBox(*(float(p) for p in parts))
    except ValueError as e:
        raise SequenceParseError(f"{source}:{lineno}: {e}") from None


def save_sequence(seq: SequenceRecord, path: str | os.PathLike) -> Path:
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    for i, (f, m) in enumerate(zip(seq.frames, seq.gt_masks)):
        _write_pnm(root / "frames" / f"{i:08d}.ppm", f, b"P6")
        _write_pnm(root / "masks" / f"{i:08d}.pgm", m.astype(np.uint8) * 255, b"P5")
    with open(root / "groundtruth.txt", "w", encoding="utf-8", newline="\n") as f:
        for b in seq.gt_boxes:
            f.write(f"{b.x!r},{b.y!r},{b.w!r},{b.h!r}\n")
    with open(root / "anchors.txt", "w", encoding="utf-8", newline="\n") as f:
        f.writelines(f"{a}\n" for a in seq.anchors)
    meta = {"name": seq.name, "seed": seq.seed, "length": len(seq), **seq.meta}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def load_sequence(path: str | os.PathLike) -> SequenceRecord:
    """Inverse of :func:`save_sequence`; raises before returning anything on bad input."""
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise SequenceParseError(f"{root / 'meta.json'}:{e.lineno}: {e.msg}") from None
    lines = (root / "groundtruth.txt").read_text(encoding="utf-8").splitlines()
    boxes = [parse_box_line(l, i + 1, str(root / "groundtruth.txt")) for i, l in enumerate(lines) if l.strip()]
    anchors = []
    for i, l in enumerate((root / "anchors.txt").read_text(encoding="utf-8").splitlines()):
        if l.strip():
            try:
                anchors.append(int(l))
            except ValueError:
                raise SequenceParseError(f"{root / 'anchors.txt'}:{i + 1}: not an integer: {l!r}") from None
    frames = [_read_pnm(p, b"P6", 3) for p in sorted((root / "frames").glob("*.ppm"))]
    masks = [_read_pnm(p, b"P5", 1) > 127 for p in sorted((root / "masks").glob("*.pgm"))]
    if not (len(frames) == len(masks) == len(boxes)):
        raise SequenceParseError(
            f"{root}: {len(frames)} frames, {len(masks)} masks, {len(boxes)} groundtruth lines")
    name = meta.pop("name", root.name)
    seed = int(meta.pop("seed", 0))
    return SequenceRecord(frames, boxes, masks, anchors, name, seed, meta)


def save_dataset(seqs, path) -> Path:
    root = Path(path)
    for s in seqs:
        save_sequence(s, root / s.name)
    return root


def load_dataset(path) -> list[SequenceRecord]:
    root = Path(path)
    dirs = sorted(p for p in root.iterdir() if (p / "groundtruth.txt").exists())
    if not dirs:
        raise SequenceParseError(f"{root}: no sequences found")
    return [load_sequence(d) for d in dirs]
