import numpy as np
import pytest

from advtrack.data import SequenceRecord, place_anchors
from advtrack.trackers.base import BBox, Capabilities, TrackerOutput, TrackerState


def scripted_sequence(n: int, box=BBox(20.0, 20.0, 10.0, 10.0), size=(64, 64), name="scripted") -> SequenceRecord:
    """Static sequence whose frame index is written into pixel (0, 0)."""
    H, W = size
    frames, masks = [], []
    for t in range(n):
        f = np.zeros((H, W, 3), dtype=np.uint8)
        f[0, 0, 0] = t
        frames.append(f)
        m = np.zeros((H, W), dtype=bool)
        m[int(box.y):int(box.y + box.h), int(box.x):int(box.x + box.w)] = True
        masks.append(m)
    return SequenceRecord(frames, [box] * n, masks, place_anchors(n), name, 0)


class ScriptedTracker:
    """Replays ``script(frame_index, gt_box) -> BBox``; optionally emits full-frame masks."""

    name = "scripted"
    capabilities = Capabilities(False, True, False, False)

    def __init__(self, gt_boxes, script=None, mask_fn=None, shape=(64, 64)):
        self.gt = list(gt_boxes)
        self.script = script or (lambda t, gt: gt)
        self.mask_fn = mask_fn
        self.shape = shape

    def init(self, frame, bbox):
        return TrackerState(template_features=None, last_bbox=bbox)

    def track(self, state, frame):
        t = int(frame[0, 0, 0])
        box = self.script(t, self.gt[t])
        mask = None
        if self.mask_fn is not None:
            mask = self.mask_fn(t, box, self.shape)
        state.last_bbox = box
        state.frame_index += 1
        return TrackerOutput(bbox=box, mask=mask)


@pytest.fixture
def perfect():
    seq = scripted_sequence(12)
    return seq, ScriptedTracker(seq.gt_boxes)


def box_mask(box: BBox, shape) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[int(box.y):int(box.y + box.h), int(box.x):int(box.x + box.w)] = True
    return m


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
