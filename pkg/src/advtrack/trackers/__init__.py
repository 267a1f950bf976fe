"""Toy differentiable trackers and the attack applicability rule."""

from advtrack.trackers.base import (
    BBox,
    Candidate,
    CandidateSet,
    Capabilities,
    CropMapping,
    DegenerateTargetError,
    TrackerOutput,
    TrackerState,
    TrackerStateError,
    crop_search_region,
)
from advtrack.trackers.siamcorr import SiamCorrTracker, siamcorr_init, siamcorr_track


class UnknownAttackError(LookupError):
    pass


ATTACK_IDS = ("rtaa", "spark", "iou", "csa")


def applicable(attack_id: str, caps: Capabilities) -> bool:
    """Whether an attack family can be mounted on a tracker with ``caps``."""
    a = str(attack_id).lower()
    if a in ("rtaa", "spark"):
        return caps.exposes_candidates and caps.has_search_region
    if a == "iou":
        return True
    if a == "csa":
        return caps.has_template_region and caps.has_search_region
    raise UnknownAttackError(f"unknown attack id {attack_id!r}; expected one of {', '.join(ATTACK_IDS)}")
