from __future__ import annotations

import numpy as np
import pytest

from signrep import skeleton as sk
from signrep.pose_io import PoseStream


def make_stream(rng: np.random.Generator, frames: int = 6, confidence: float | None = 1.0) -> PoseStream:
    """Random but well-formed stream; keypoints inside the unit square."""
    conf = np.full((frames, sk.NUM_KEYPOINTS), confidence) if confidence is not None \
        else rng.uniform(0, 1, (frames, sk.NUM_KEYPOINTS))
    return PoseStream(
        keypoints=rng.uniform(0.2, 0.8, (frames, sk.NUM_KEYPOINTS, 3)),
        confidence=conf,
        left_angles=rng.uniform(-np.pi, np.pi, (frames, sk.NUM_HAND_ANGLES)),
        right_angles=rng.uniform(-np.pi, np.pi, (frames, sk.NUM_HAND_ANGLES)),
        body_angles=rng.uniform(-np.pi, np.pi, (frames, sk.NUM_BODY_ANGLES)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stream(rng):
    return make_stream(rng)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    report = getattr(mod, "REPORT", None)
    if not report:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(report):
        passed, detail = report[criterion]
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
