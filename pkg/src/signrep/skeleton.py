"""Canonical 61-keypoint layout: 19 body points, then right hand, then left hand.

Body indices::

    0 pelvis (root)   1 lower spine   2 upper spine   3 neck
    4 left shoulder   5 right shoulder   6 left hip   7 right hip
    8 left elbow      9 right elbow     10 nose
    11 left eye      12 right eye      13 mouth   14 left ear   15 right ear
    16 chin          17 left brow      18 right brow

Each hand is a wrist followed by five fingers (thumb..little), four points
per finger ordered base knuckle -> tip. The right hand occupies 19..39, the
left hand 40..60.

Image axes: x grows to the right, y grows *downwards*, z points at the camera.
"""

from __future__ import annotations

import numpy as np

NUM_KEYPOINTS = 61
NUM_BODY = 19
NUM_HAND = 21
NUM_HAND_ANGLES = 41
NUM_BODY_ANGLES = 22

BODY = tuple(range(0, 19))
RIGHT_HAND = tuple(range(19, 40))
LEFT_HAND = tuple(range(40, 61))

RIGHT_WRIST = 19
LEFT_WRIST = 40
RIGHT_ELBOW = 9
LEFT_ELBOW = 8

RIGHT_FINGERTIPS = (23, 27, 31, 35, 39)
LEFT_FINGERTIPS = (44, 48, 52, 56, 60)

# fingertip-distance destinations: wrist, then (base knuckle, tip) per finger
LEFT_FINGERTIP_DESTINATIONS = (40, 41, 44, 45, 48, 49, 52, 53, 56, 57, 60)
RIGHT_FINGERTIP_DESTINATIONS = tuple(i - 21 for i in LEFT_FINGERTIP_DESTINATIONS)

INTERACTION_SOURCES = (LEFT_WRIST, RIGHT_WRIST) + LEFT_FINGERTIPS + RIGHT_FINGERTIPS
INTERACTION_DESTINATIONS = (
    0, 3, 6, 7, 10, 13, 15, 16, 17, 18, 19,
    23, 27, 31, 35, 39, 40, 44, 48, 52, 56, 60,
)

# vertical reference for the activity heuristic ("middle of the stomach")
ACTIVITY_REFERENCE = (0, 3, 6, 7)


def hand_indices(hand: str) -> tuple[int, ...]:
    if hand in ("left", "LH"):
        return LEFT_HAND
    if hand in ("right", "RH"):
        return RIGHT_HAND
    raise ValueError(f"unknown hand {hand!r}; expected 'left' or 'right'")


def wrist_of(hand: str) -> int:
    return hand_indices(hand)[0]


def fingertips_of(hand: str) -> tuple[int, ...]:
    return LEFT_FINGERTIPS if hand_indices(hand)[0] == LEFT_WRIST else RIGHT_FINGERTIPS


def fingertip_destinations_of(hand: str) -> tuple[int, ...]:
    if hand_indices(hand)[0] == LEFT_WRIST:
        return LEFT_FINGERTIP_DESTINATIONS
    return RIGHT_FINGERTIP_DESTINATIONS


def _build_parents() -> np.ndarray:
    parent = np.full(NUM_KEYPOINTS, -1, dtype=np.int64)
    body_edges = {
        1: 0, 2: 1, 3: 2, 4: 2, 5: 2, 6: 0, 7: 0, 8: 4, 9: 5, 10: 3,
        11: 10, 12: 10, 13: 10, 14: 10, 15: 10, 16: 10, 17: 10, 18: 10,
    }
    for child, par in body_edges.items():
        parent[child] = par
    for wrist, elbow in ((RIGHT_WRIST, RIGHT_ELBOW), (LEFT_WRIST, LEFT_ELBOW)):
        parent[wrist] = elbow
        for f in range(5):
            base = wrist + 1 + 4 * f
            parent[base] = wrist
            for j in range(1, 4):
                parent[base + j] = base + j - 1
    return parent


PARENTS = _build_parents()
PARENTS.setflags(write=False)

# (parent, child) pairs; bone i ends at keypoint BONES[i][1]
BONES = tuple((int(PARENTS[c]), c) for c in range(NUM_KEYPOINTS) if PARENTS[c] >= 0)


def traversal_order() -> list[int]:
    """Keypoints ordered so that every parent precedes its children."""
    children: dict[int, list[int]] = {i: [] for i in range(NUM_KEYPOINTS)}
    for p, c in BONES:
        children[p].append(c)
    order, frontier = [], [0]
    while frontier:
        node = frontier.pop(0)
        order.append(node)
        frontier.extend(children[node])
    return order


TRAVERSAL = tuple(traversal_order())

# Which keypoints each angle is derived from; drives prior masking.
# Hand angle 8*f + 2*b (+1) belongs to bone b of finger f; angle 40 is the wrist roll.
def hand_angle_dependencies(hand: str) -> list[tuple[int, ...]]:
    wrist = wrist_of(hand)
    deps: list[tuple[int, ...]] = []
    for f in range(5):
        base = wrist + 1 + 4 * f
        chain = (wrist, base, base + 1, base + 2, base + 3)
        for b in range(4):
            pair = (chain[b], chain[b + 1])
            deps.extend([pair, pair])
    deps.append((wrist,) + tuple(wrist + 1 + 4 * f for f in range(5)))
    return deps


# Body angles: (azimuth, elevation) of ten bones, then head yaw and pitch.
BODY_ANGLE_BONES = ((0, 1), (1, 2), (2, 3), (3, 10), (2, 4), (2, 5), (4, 8), (5, 9),
                    (LEFT_ELBOW, LEFT_WRIST), (RIGHT_ELBOW, RIGHT_WRIST))


def body_angle_dependencies() -> list[tuple[int, ...]]:
    deps: list[tuple[int, ...]] = []
    for pair in BODY_ANGLE_BONES:
        deps.extend([pair, pair])
    deps.extend([(10, 11, 12), (10, 11, 12)])
    return deps
