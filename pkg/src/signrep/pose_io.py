"""Pose streams: container, binary/JSON file formats, bone-length normalisation, confidence masks.

Binary layout (all little-endian)::

    b"SRPS0001" | u32 T | f32 fps
    f32 keypoints [T, 61, 3] | f32 confidence [T, 61]
    f32 left angles [T, 41] | f32 right angles [T, 41] | f32 body angles [T, 22]

Arrays are held as float64 in memory but stored as float32, so a stream
survives a save/load round trip exactly once its values are float32-representable
(``PoseStream.quantized`` does that rounding up front).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import skeleton as sk

MAGIC = b"SRPS0001"
_HEADER = struct.Struct("<If")

_BLOCKS = (
    ("keypoints", (sk.NUM_KEYPOINTS, 3)),
    ("confidence", (sk.NUM_KEYPOINTS,)),
    ("left_angles", (sk.NUM_HAND_ANGLES,)),
    ("right_angles", (sk.NUM_HAND_ANGLES,)),
    ("body_angles", (sk.NUM_BODY_ANGLES,)),
)


class PoseFormatError(ValueError):
    """A pose-stream file or array bundle violates the format."""


@dataclass(frozen=True)
class PoseStream:
    keypoints: np.ndarray      # (T, 61, 3)
    confidence: np.ndarray     # (T, 61) in [0, 1]
    left_angles: np.ndarray    # (T, 41) radians
    right_angles: np.ndarray   # (T, 41) radians
    body_angles: np.ndarray    # (T, 22) radians
    fps: float = 25.0

    def __post_init__(self):
        t = None
        for name, tail in _BLOCKS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 1 + len(tail) or arr.shape[1:] != tail:
                raise PoseFormatError(f"{name}: expected shape (T, {', '.join(map(str, tail))}), got {arr.shape}")
            if t is None:
                t = arr.shape[0]
            elif arr.shape[0] != t:
                raise PoseFormatError(f"{name}: {arr.shape[0]} frames, expected {t}")
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(arr))[0]
                raise PoseFormatError(f"{name}: non-finite value at frame {int(bad[0])}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        conf = self.confidence
        if conf.size and (conf.min() < 0.0 or conf.max() > 1.0):
            bad = np.argwhere((conf < 0.0) | (conf > 1.0))[0]
            raise PoseFormatError(
                f"confidence {conf[tuple(bad)]:.4g} outside [0, 1] at frame {int(bad[0])}, keypoint {int(bad[1])}"
            )

    @property
    def num_frames(self) -> int:
        return self.keypoints.shape[0]

    def window(self, start: int, length: int) -> PoseStream:
        """Frames ``[start, start + length)``."""
        if start < 0 or start + length > self.num_frames:
            raise IndexError(f"window [{start}, {start + length}) outside stream of {self.num_frames} frames")
        sl = slice(start, start + length)
        return PoseStream(
            self.keypoints[sl], self.confidence[sl], self.left_angles[sl],
            self.right_angles[sl], self.body_angles[sl], self.fps,
        )

    def with_keypoints(self, keypoints: np.ndarray) -> PoseStream:
        return replace(self, keypoints=keypoints)

    def quantized(self) -> PoseStream:
        """Round every array through float32, the on-disk precision."""
        f = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)  # noqa: E731
        return PoseStream(
            f(self.keypoints), f(self.confidence), f(self.left_angles),
            f(self.right_angles), f(self.body_angles), float(np.float32(self.fps)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name, _ in _BLOCKS}


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def save_pose_stream(stream: PoseStream, path: str | Path) -> None:
    path = Path(path)
    if path.suffix == ".json":
        payload = {name: arr.tolist() for name, arr in stream.arrays().items()}
        payload["fps"] = stream.fps
        path.write_text(json.dumps(payload))
        return
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(stream.num_frames, stream.fps))
        for name, _ in _BLOCKS:
            fh.write(np.ascontiguousarray(getattr(stream, name), dtype="<f4").tobytes())


def load_pose_stream(path: str | Path) -> PoseStream:
    path = Path(path)
    if path.suffix == ".json":
        return _load_json(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise PoseFormatError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 8 + _HEADER.size:
        raise PoseFormatError(f"{path}: truncated header")
    t, fps = _HEADER.unpack_from(raw, 8)
    offset = 8 + _HEADER.size
    arrays = {}
    for name, tail in _BLOCKS:
        per_frame = int(np.prod(tail))
        need = 4 * t * per_frame
        chunk = raw[offset:offset + need]
        if len(chunk) < need:
            frame = len(chunk) // (4 * per_frame)
            raise PoseFormatError(f"{path}: block '{name}' truncated at frame {frame} of {t}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape((t,) + tail)
        offset += need
    if offset != len(raw):
        raise PoseFormatError(f"{path}: {len(raw) - offset} trailing bytes after last block")
    return PoseStream(fps=float(fps), **arrays)


def _load_json(path: Path) -> PoseStream:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise PoseFormatError(f"{path}: {exc}") from exc
    missing = [name for name, _ in _BLOCKS if name not in payload]
    if missing:
        raise PoseFormatError(f"{path}: missing fields {missing}")
    arrays = {name: np.asarray(payload[name], dtype=np.float64) for name, _ in _BLOCKS}
    return PoseStream(fps=float(payload.get("fps", 25.0)), **arrays)


# ---------------------------------------------------------------------------
# bone lengths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoneLengths:
    """Median length per bone, aligned with ``skeleton.BONES``."""

    lengths: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.lengths, dtype=np.float64)
        if arr.shape != (len(sk.BONES),):
            raise ValueError(f"expected {len(sk.BONES)} bone lengths, got shape {arr.shape}")
        if not np.all(arr > 0):
            raise ValueError("bone lengths must be strictly positive")
        object.__setattr__(self, "lengths", arr)

    def for_child(self, child: int) -> float:
        return float(self.lengths[_BONE_INDEX[child]])


_BONE_INDEX = {c: i for i, (_, c) in enumerate(sk.BONES)}


def edge_lengths(keypoints: np.ndarray) -> np.ndarray:
    """(..., 61, 3) -> (..., n_bones) Euclidean length of every bone."""
    parents = np.array([p for p, _ in sk.BONES])
    children = np.array([c for _, c in sk.BONES])
    return np.linalg.norm(keypoints[..., children, :] - keypoints[..., parents, :], axis=-1)


def median_bone_lengths(streams: Iterable[PoseStream], threshold: float = 0.5) -> BoneLengths:
    samples: list[list[np.ndarray]] = [[] for _ in sk.BONES]
    for stream in streams:
        lengths = edge_lengths(stream.keypoints)
        conf = stream.confidence > threshold
        for i, (p, c) in enumerate(sk.BONES):
            ok = conf[:, p] & conf[:, c]
            if ok.any():
                samples[i].append(lengths[ok, i])
    empty = [sk.BONES[i] for i, s in enumerate(samples) if not s]
    if empty:
        raise ValueError(f"bones without any confident observation: {empty}")
    return BoneLengths(np.array([np.median(np.concatenate(s)) for s in samples]))


def normalize_bones(stream: PoseStream, bones: BoneLengths) -> PoseStream:
    """Rebuild the skeleton from the root outwards with every bone at its median length.

    A bone whose endpoints coincide keeps the direction it had in the
    previous frame; on the first frame that is an error.
    """
    src = stream.keypoints
    out = np.empty_like(src)
    out[:, 0] = src[:, 0]
    for child in sk.TRAVERSAL[1:]:
        parent = int(sk.PARENTS[child])
        vec = src[:, child] - src[:, parent]
        norm = np.linalg.norm(vec, axis=-1)
        degenerate = norm < 1e-12
        unit = np.zeros_like(vec)
        unit[~degenerate] = vec[~degenerate] / norm[~degenerate, None]
        if degenerate.any():
            frames = np.flatnonzero(degenerate)
            if frames[0] == 0:
                raise ValueError(f"zero-length bone {parent}->{child} on frame 0")
            for t in frames:
                unit[t] = unit[t - 1]
        out[:, child] = out[:, parent] + unit * bones.for_child(child)
    return stream.with_keypoints(out)


def confidence_mask(stream: PoseStream, threshold: float = 0.5) -> np.ndarray:
    """Boolean (T, 61): keypoint confidence strictly above ``threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return stream.confidence > threshold
