"""Sign-prior regression targets computed from (bone-normalised) pose streams.

Every per-frame function accepts keypoints with arbitrary leading axes, so
``(61, 3)`` for one frame and ``(T, 61, 3)`` for a clip both work.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import skeleton as sk
from .pose_io import PoseStream, confidence_mask

PRIOR_SHAPES: dict[str, tuple[int, ...]] = {
    "lh_kpt": (21, 3),
    "rh_kpt": (21, 3),
    "body_kpt": (61, 3),
    "lh_ang": (41, 2),
    "rh_ang": (41, 2),
    "body_ang": (22, 2),
    "lh_dist": (5, 11, 3),
    "rh_dist": (5, 11, 3),
    "body_dist": (12, 22, 3),
}
PRIOR_NAMES = tuple(PRIOR_SHAPES)

DEFAULT_SCALES: dict[str, float] = {
    "lh_kpt": 2.0, "rh_kpt": 2.0, "body_kpt": 1.0,
    "lh_ang": 1.0, "rh_ang": 1.0, "body_ang": 1.0,
    "lh_dist": 4.0, "rh_dist": 4.0, "body_dist": 1.0,
}

ACTIVITY_STD_THRESHOLD = 0.26


def prior_size(name: str) -> int:
    return int(np.prod(PRIOR_SHAPES[name]))


def hand_keypoint_prior(keypoints: np.ndarray, hand: str) -> np.ndarray:
    """The 21 hand keypoints relative to the wrist."""
    idx = np.array(sk.hand_indices(hand))
    hand_pts = keypoints[..., idx, :]
    return hand_pts - hand_pts[..., :1, :]


def body_keypoint_prior(keypoints: np.ndarray) -> np.ndarray:
    return np.array(keypoints, dtype=np.float64, copy=True)


def angle_prior(angles: np.ndarray) -> np.ndarray:
    """(..., n) radians -> (..., n, 2) holding (sin, cos)."""
    return np.stack([np.sin(angles), np.cos(angles)], axis=-1)


def hand_angle_prior(stream_or_angles, hand: str | None = None) -> np.ndarray:
    if isinstance(stream_or_angles, PoseStream):
        angles = stream_or_angles.left_angles if hand in ("left", "LH") else stream_or_angles.right_angles
    else:
        angles = stream_or_angles
    return angle_prior(np.asarray(angles))


def body_angle_prior(stream_or_angles) -> np.ndarray:
    angles = stream_or_angles.body_angles if isinstance(stream_or_angles, PoseStream) else stream_or_angles
    return angle_prior(np.asarray(angles))


def displacement_matrix(keypoints: np.ndarray, sources, destinations) -> np.ndarray:
    """Entry [i, j] is source_i - destination_j per axis."""
    src = keypoints[..., np.asarray(sources), :]
    dst = keypoints[..., np.asarray(destinations), :]
    return src[..., :, None, :] - dst[..., None, :, :]


def fingertip_distance_prior(keypoints: np.ndarray, hand: str) -> np.ndarray:
    return displacement_matrix(keypoints, sk.fingertips_of(hand), sk.fingertip_destinations_of(hand))


def interaction_distance_prior(keypoints: np.ndarray) -> np.ndarray:
    return displacement_matrix(keypoints, sk.INTERACTION_SOURCES, sk.INTERACTION_DESTINATIONS)


def activity_prior(
    clip: PoseStream,
    std_threshold: float = ACTIVITY_STD_THRESHOLD,
    y_down: bool = True,
    conf_threshold: float = 0.5,
) -> tuple[int, int]:
    """(left, right) activity bits for a clip.

    A hand is inactive (0) when its mean wrist height lies below the mean
    height of the reference body points and the summed temporal standard
    deviation of its 21 keypoints (over x, y, z) is under ``std_threshold``.
    Per-keypoint deviations only use frames where that keypoint is confident.
    """
    if clip.num_frames < 2:
        raise ValueError("activity needs at least two frames")
    kp = clip.keypoints
    visible = clip.confidence > conf_threshold
    ref_y = float(kp[:, list(sk.ACTIVITY_REFERENCE), 1].mean())
    bits = []
    for hand in ("left", "right"):
        idx = sk.hand_indices(hand)
        wrist_y = float(kp[:, idx[0], 1].mean())
        below = wrist_y > ref_y if y_down else wrist_y < ref_y
        std_sum = 0.0
        for k in idx:
            frames = visible[:, k]
            if frames.sum() >= 2:
                std_sum += float(kp[frames, k, :].std(axis=0).sum())
        bits.append(0 if (below and std_sum < std_threshold) else 1)
    return bits[0], bits[1]


@dataclass
class PriorSet:
    """Scaled per-frame targets, validity masks (True = counts in the loss) and activity."""

    targets: dict[str, np.ndarray]
    masks: dict[str, np.ndarray]
    activity: np.ndarray
    scales: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_SCALES))

    @property
    def num_frames(self) -> int:
        return next(iter(self.targets.values())).shape[0]


def _valid_all(valid: np.ndarray, groups) -> np.ndarray:
    """(T, 61) keypoint validity -> (T, len(groups)) validity of each dependency group."""
    return np.stack([valid[:, list(g)].all(axis=1) for g in groups], axis=1)


def prior_masks(valid: np.ndarray) -> dict[str, np.ndarray]:
    """Propagate keypoint validity to every prior entry (valid iff all inputs are)."""
    masks: dict[str, np.ndarray] = {}
    t = valid.shape[0]
    for hand, key in (("left", "lh"), ("right", "rh")):
        idx = np.array(sk.hand_indices(hand))
        kp_ok = valid[:, idx] & valid[:, idx[:1]]
        masks[f"{key}_kpt"] = np.broadcast_to(kp_ok[:, :, None], (t, 21, 3)).copy()
        ang_ok = _valid_all(valid, sk.hand_angle_dependencies(hand))
        masks[f"{key}_ang"] = np.broadcast_to(ang_ok[:, :, None], (t, 41, 2)).copy()
        src = valid[:, list(sk.fingertips_of(hand))]
        dst = valid[:, list(sk.fingertip_destinations_of(hand))]
        masks[f"{key}_dist"] = np.broadcast_to((src[:, :, None] & dst[:, None, :])[..., None], (t, 5, 11, 3)).copy()
    masks["body_kpt"] = np.broadcast_to(valid[:, :, None], (t, 61, 3)).copy()
    body_ok = _valid_all(valid, sk.body_angle_dependencies())
    masks["body_ang"] = np.broadcast_to(body_ok[:, :, None], (t, 22, 2)).copy()
    src = valid[:, list(sk.INTERACTION_SOURCES)]
    dst = valid[:, list(sk.INTERACTION_DESTINATIONS)]
    masks["body_dist"] = np.broadcast_to((src[:, :, None] & dst[:, None, :])[..., None], (t, 12, 22, 3)).copy()
    return masks


def raw_priors(clip: PoseStream) -> dict[str, np.ndarray]:
    kp = clip.keypoints
    return {
        "lh_kpt": hand_keypoint_prior(kp, "left"),
        "rh_kpt": hand_keypoint_prior(kp, "right"),
        "body_kpt": body_keypoint_prior(kp),
        "lh_ang": angle_prior(clip.left_angles),
        "rh_ang": angle_prior(clip.right_angles),
        "body_ang": angle_prior(clip.body_angles),
        "lh_dist": fingertip_distance_prior(kp, "left"),
        "rh_dist": fingertip_distance_prior(kp, "right"),
        "body_dist": interaction_distance_prior(kp),
    }


def prior_targets(
    clip: PoseStream,
    mask: np.ndarray | None = None,
    scales: dict[str, float] | None = None,
) -> PriorSet:
    """Assemble all priors for a clip, scaled by ``scales``, with propagated masks."""
    if mask is None:
        mask = confidence_mask(clip)
    scales = dict(DEFAULT_SCALES if scales is None else scales)
    targets = {name: arr * scales[name] for name, arr in raw_priors(clip).items()}
    return PriorSet(
        targets=targets,
        masks=prior_masks(np.asarray(mask, dtype=bool)),
        activity=np.array(activity_prior(clip), dtype=np.float64),
        scales=scales,
    )
