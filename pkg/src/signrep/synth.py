"""Deterministic synthetic signer.

Each sign class is a small parametric recipe: which hands move, a sinusoidal
path for the shoulder and elbow angles, and a target hand shape that is
blended in and out by a raised-cosine envelope. Poses come from forward
kinematics over the skeleton tree, so angles, keypoints and bone lengths
agree by construction. Videos are rendered as Gaussian blobs, one colour
channel each for body, left hand and right hand, on a per-video background.

Coordinates follow the pose convention: x right, y down, both in [0, 1].
"""

from __future__ import annotations

import json
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import skeleton as sk
from .pose_io import PoseStream, load_pose_stream, save_pose_stream

VIDEO_MAGIC = b"SRVD0001"
DROPOUT_RATE = 0.02
ANGLE_JITTER = 0.002
ROOT = np.array([0.5, 0.75, 0.0])
BODY_SCALE = 0.8
HANDEDNESS = ("right", "both", "left")

# canonical-side arm angles (degrees); the right arm mirrors them
REST_UPPER, REST_FORE = 80.0, 120.0
SHOULDER_AZ = -38.0

# (parent, child, length, azimuth deg, elevation deg) for the fixed trunk
_TRUNK = ((0, 1, 0.16, -90.0, 0.0), (1, 2, 0.16, -90.0, 0.0), (2, 3, 0.10, -90.0, 0.0), (3, 10, 0.12, -90.0, 0.0))
_HIPS = {6: np.array([0.07, 0.01, 0.0]), 7: np.array([-0.07, 0.01, 0.0])}
_FACE = {
    11: (0.025, -0.02, -0.01), 12: (-0.025, -0.02, -0.01), 13: (0.0, 0.03, -0.005),
    14: (0.05, -0.01, -0.04), 15: (-0.05, -0.01, -0.04), 16: (0.0, 0.055, -0.01),
    17: (0.025, -0.035, -0.01), 18: (-0.025, -0.035, -0.01),
}
SHOULDER_LEN, UPPER_LEN, FORE_LEN = 0.13, 0.20, 0.18

FINGER_FAN = np.array([0.9, 0.25, 0.0, -0.2, -0.4])
FINGER_LENS = np.array([
    [0.020, 0.016, 0.012, 0.010],
    [0.035, 0.020, 0.013, 0.010],
    [0.035, 0.021, 0.014, 0.010],
    [0.034, 0.019, 0.013, 0.010],
    [0.032, 0.016, 0.011, 0.009],
])
REST_CURL = 0.3


def direction(azimuth, elevation) -> np.ndarray:
    """Unit vector(s) from azimuth/elevation in radians; trailing axis is xyz."""
    azimuth, elevation = np.asarray(azimuth), np.asarray(elevation)
    return np.stack([np.cos(elevation) * np.cos(azimuth), np.cos(elevation) * np.sin(azimuth), np.sin(elevation)], axis=-1)


def _mirror(az_deg: float, side: str) -> float:
    return az_deg if side == "left" else 180.0 - az_deg


@dataclass(frozen=True)
class SignClassSpec:
    class_id: int
    handedness: str
    center: tuple[float, float]         # upper-arm, forearm azimuth (deg, canonical side)
    amplitude: tuple[float, float]      # deg
    frequency: tuple[float, float]      # cycles over the sign
    phase: tuple[float, float]          # rad
    elevation: float                    # forearm elevation during the sign (rad)
    curl: tuple[float, ...]             # per-finger curl in [0, 1]
    roll: float                         # wrist roll target (rad)

    def __post_init__(self):
        if self.handedness not in HANDEDNESS:
            raise ValueError(f"handedness must be one of {HANDEDNESS}")
        if len(self.curl) != 5:
            raise ValueError("curl needs five values")

    def moves(self, side: str) -> bool:
        return self.handedness in (side, "both")

    def vector(self) -> np.ndarray:
        return np.array([*self.center, *self.amplitude, *self.frequency, *self.phase,
                         self.elevation, *self.curl, self.roll, HANDEDNESS.index(self.handedness)])

    @classmethod
    def sample(cls, class_id: int, rng: np.random.Generator) -> SignClassSpec:
        return cls(
            class_id=class_id,
            handedness=HANDEDNESS[class_id % 3],
            center=(float(rng.uniform(40, 85)), float(rng.uniform(-130, -50))),
            amplitude=(float(rng.uniform(10, 20)), float(rng.uniform(10, 20))),
            frequency=(float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0))),
            phase=(float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi))),
            elevation=float(rng.uniform(-0.3, 0.5)),
            curl=tuple(float(c) for c in rng.integers(0, 2, size=5)),
            roll=float(rng.uniform(-1.0, 1.0)),
        )


@dataclass(frozen=True)
class StyleSpec:
    offset: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blob_size: float = 1.0
    seed: int = 0
    # within-class variation of the performance
    speed: float = 1.0
    amplitude: float = 1.0
    phase: float = 0.0
    onset: int = 8

    @classmethod
    def sample(cls, seed: int, length: int = 32) -> StyleSpec:
        rng = np.random.default_rng(seed)
        latest = max(0, min(20, length - 16))
        return cls(
            offset=(float(rng.uniform(-0.04, 0.04)), float(rng.uniform(-0.04, 0.04))),
            scale=float(rng.uniform(0.9, 1.05)),
            background=tuple(float(b) for b in rng.uniform(0.0, 0.3, size=3)),
            blob_size=float(rng.uniform(0.8, 1.3)),
            seed=seed,
            speed=float(rng.uniform(0.85, 1.15)),
            amplitude=float(rng.uniform(0.85, 1.15)),
            phase=float(rng.uniform(-0.4, 0.4)),
            onset=int(rng.integers(0, latest + 1)),
        )


def envelope(length: int, onset: int, duration: int, ramp: int = 3) -> np.ndarray:
    """0 at rest, 1 while signing, raised-cosine transitions."""
    t = np.arange(length, dtype=np.float64)
    e = np.zeros(length)
    up = (t - onset) / ramp
    down = (onset + duration - t) / ramp
    e = np.clip(np.minimum(up, down), 0.0, 1.0)
    return 0.5 - 0.5 * np.cos(np.pi * e)


def _hand_pose(wrist: np.ndarray, forearm_az: float, roll: float, curl: np.ndarray, side: str, scale: float):
    """Keypoints (21, 3) and angles (41,) for one hand at one frame."""
    f = np.array([np.cos(forearm_az), np.sin(forearm_az), 0.0])
    lat = np.array([-np.sin(forearm_az), np.cos(forearm_az), 0.0]) * (1.0 if side == "left" else -1.0)
    z = np.array([0.0, 0.0, 1.0])
    lat_r = np.cos(roll) * lat + np.sin(roll) * z
    normal = np.cross(f, lat_r)
    pts = np.empty((21, 3))
    angles = np.empty(41)
    pts[0] = wrist
    for finger in range(5):
        prev = wrist
        flex = 0.3 if finger == 0 else 0.0
        fan = FINGER_FAN[finger]
        for bone in range(4):
            if bone > 0:
                flex = flex + 0.05 + 0.9 * curl[finger]
            d = np.cos(flex) * (np.cos(fan) * f + np.sin(fan) * lat_r) + np.sin(flex) * normal
            prev = prev + scale * FINGER_LENS[finger, bone] * d
            pts[1 + 4 * finger + bone] = prev
            angles[8 * finger + 2 * bone] = flex
            angles[8 * finger + 2 * bone + 1] = fan
    angles[40] = roll
    return pts, angles


def generate_sign_clip(spec: SignClassSpec, style: StyleSpec, length: int = 32) -> PoseStream:
    """Forward kinematics for one performance of ``spec`` in ``style``."""
    if length < 16:
        raise ValueError("clips need at least 16 frames")
    rng = np.random.default_rng([style.seed, spec.class_id, length])
    duration = 13
    onset = min(style.onset, length - duration - 3)
    env = envelope(length, onset, duration)
    tt = (np.arange(length) - onset) / duration * style.speed
    s = style.scale * BODY_SCALE
    root = ROOT + np.array([style.offset[0], style.offset[1], 0.0])

    kp = np.zeros((length, sk.NUM_KEYPOINTS, 3))
    body_ang = np.zeros((length, sk.NUM_BODY_ANGLES))
    hand_ang = {"left": np.zeros((length, 41)), "right": np.zeros((length, 41))}
    jitter = rng.normal(0.0, ANGLE_JITTER, size=(length, 8))

    for t in range(length):
        pts = kp[t]
        pts[0] = root
        bang = {}
        for i, (p, c, ln, az, el) in enumerate(_TRUNK):
            a, e = np.deg2rad(az) + jitter[t, i], el + jitter[t, 4 + i] * 0.5
            pts[c] = pts[p] + s * ln * direction(a, e)
            bang[(p, c)] = (a, e)
        for c, off in _HIPS.items():
            pts[c] = root + s * off
        yaw, pitch = jitter[t, 0] * 4, jitter[t, 1] * 4
        cy, sy, cp, sp = np.cos(yaw), np.sin(yaw), np.cos(pitch), np.sin(pitch)
        rot = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]]) @ np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
        for c, off in _FACE.items():
            pts[c] = pts[10] + s * rot @ np.array(off)

        for side, shoulder, elbow, wrist in (("left", 4, 8, 40), ("right", 5, 9, 19)):
            sh_az = np.deg2rad(_mirror(SHOULDER_AZ, side))
            pts[shoulder] = pts[2] + s * SHOULDER_LEN * direction(sh_az, 0.0)
            bang[(2, shoulder)] = (sh_az, 0.0)
            if spec.moves(side):
                amp = style.amplitude
                w = 2 * np.pi * tt[t]
                up = spec.center[0] + amp * spec.amplitude[0] * np.sin(spec.frequency[0] * w + spec.phase[0] + style.phase)
                fo = spec.center[1] + amp * spec.amplitude[1] * np.sin(spec.frequency[1] * w + spec.phase[1] + style.phase)
                k = env[t]
                up = REST_UPPER + k * (up - REST_UPPER)
                fo_rest = REST_FORE
                # go from the rest direction to the signing one the short way round
                delta = (fo - fo_rest + 180.0) % 360.0 - 180.0
                fo = fo_rest + k * delta
                el = k * spec.elevation
                curl = REST_CURL + k * (np.array(spec.curl) - REST_CURL)
                roll = k * spec.roll
            else:
                up, fo, el = REST_UPPER, REST_FORE, 0.0
                curl, roll = np.full(5, REST_CURL), 0.0
            j = 2 + (side == "right") * 2
            ua = np.deg2rad(_mirror(up, side)) + jitter[t, j]
            fa = np.deg2rad(_mirror(fo, side)) + jitter[t, j + 1]
            pts[elbow] = pts[shoulder] + s * UPPER_LEN * direction(ua, 0.0)
            pts[wrist] = pts[elbow] + s * FORE_LEN * direction(fa, el)
            bang[(shoulder, elbow)] = (ua, 0.0)
            bang[(elbow, wrist)] = (fa, el)
            hpts, hang = _hand_pose(pts[wrist], fa, roll, curl, side, s)
            pts[wrist:wrist + 21] = hpts
            hand_ang[side][t] = hang

        for i, bone in enumerate(sk.BODY_ANGLE_BONES):
            body_ang[t, 2 * i], body_ang[t, 2 * i + 1] = bang[bone]
        body_ang[t, 20], body_ang[t, 21] = yaw, pitch

    confidence = np.ones((length, sk.NUM_KEYPOINTS))
    confidence[rng.random((length, sk.NUM_KEYPOINTS)) < DROPOUT_RATE] = 0.0
    # stored streams are float32, so emit values that survive saving unchanged
    return PoseStream(kp, confidence, hand_ang["left"], hand_ang["right"], body_ang).quantized()


# -- rendering ---------------------------------------------------------------------

BODY_CHANNEL, LEFT_CHANNEL, RIGHT_CHANNEL = 0, 1, 2
BLOB_PEAK = 0.7
BLOB_SIGMA = 0.6


def _channel_of(k: int) -> int:
    if k in sk.LEFT_HAND:
        return LEFT_CHANNEL
    if k in sk.RIGHT_HAND:
        return RIGHT_CHANNEL
    return BODY_CHANNEL


_CHANNELS = np.array([_channel_of(k) for k in range(sk.NUM_KEYPOINTS)])


def render_video(stream: PoseStream, height: int = 32, width: int = 32, style: StyleSpec | None = None) -> np.ndarray:
    """(T, H, W, 3) float32 frames in [0, 1]; blobs combine by max, background is added."""
    style = style or StyleSpec()
    kp = stream.keypoints
    xy = kp[..., :2]
    if np.any(xy < 0) or np.any(xy > 1):
        warnings.warn("keypoints outside the unit square were clamped for rendering", RuntimeWarning, stacklevel=2)
        xy = np.clip(xy, 0.0, 1.0)
    px = xy[..., 0] * width - 0.5
    py = xy[..., 1] * height - 0.5
    sigma = BLOB_SIGMA * style.blob_size
    gx = np.arange(width, dtype=np.float64)
    gy = np.arange(height, dtype=np.float64)
    visible = stream.confidence > 0.5
    frames = np.zeros((stream.num_frames, height, width, 3))
    for ch in range(3):
        sel = _CHANNELS == ch
        ex = np.exp(-((gx[None, None, :] - px[:, sel, None]) ** 2) / (2 * sigma ** 2))  # (T, K, W)
        ey = np.exp(-((gy[None, None, :] - py[:, sel, None]) ** 2) / (2 * sigma ** 2))  # (T, K, H)
        blobs = BLOB_PEAK * ey[:, :, :, None] * ex[:, :, None, :] * visible[:, sel, None, None]
        frames[..., ch] = blobs.max(axis=1) if blobs.shape[1] else 0.0
    frames += np.asarray(style.background)[None, None, None, :]
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


# -- video files -------------------------------------------------------------------

class VideoFormatError(ValueError):
    pass


def save_video(video: np.ndarray, path: str | Path) -> None:
    v = np.asarray(video, dtype="<f4")
    if v.ndim != 4:
        raise VideoFormatError(f"video must be (T, H, W, C), got {v.shape}")
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<4I", *v.shape))
        fh.write(v.tobytes())


def load_video(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:8] != VIDEO_MAGIC:
        raise VideoFormatError(f"{path}: bad magic, not a video file")
    if len(blob) < 24:
        raise VideoFormatError(f"{path}: truncated header")
    shape = struct.unpack_from("<4I", blob, 8)
    need = 24 + 4 * int(np.prod(shape))
    if len(blob) != need:
        raise VideoFormatError(f"{path}: expected {need} bytes for shape {shape}, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=24).reshape(shape).astype(np.float32)


# -- datasets ----------------------------------------------------------------------

@dataclass(frozen=True)
class VideoEntry:
    video_id: int
    class_id: int
    style_seed: int
    split: str
    pose_path: str = ""
    video_path: str = ""


@dataclass
class Manifest:
    num_classes: int
    samples_per_class: int
    seed: int
    length: int
    height: int
    width: int
    classes: list[SignClassSpec] = field(default_factory=list)
    entries: list[VideoEntry] = field(default_factory=list)

    def split(self, name: str) -> list[VideoEntry]:
        return [e for e in self.entries if e.split == name]

    def style_of(self, entry: VideoEntry) -> StyleSpec:
        return StyleSpec.sample(entry.style_seed, self.length)

    def stream_of(self, entry: VideoEntry) -> PoseStream:
        return generate_sign_clip(self.classes[entry.class_id], self.style_of(entry), self.length)

    def video_of(self, entry: VideoEntry) -> np.ndarray:
        return render_video(self.stream_of(entry), self.height, self.width, self.style_of(entry))

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        d = json.loads(text)
        classes = [SignClassSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in c.items()}) for c in d.pop("classes")]
        entries = [VideoEntry(**e) for e in d.pop("entries")]
        return cls(classes=classes, entries=entries, **d)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> Manifest:
        return cls.from_json(Path(path).read_text())


def video_seed(seed: int, video_id: int) -> int:
    """Per-video seed from a splittable counter, independent of generation order."""
    return int(np.random.SeedSequence([seed, video_id]).generate_state(1)[0])


def make_dataset(
    num_classes: int,
    samples_per_class: int,
    seed: int,
    length: int = 32,
    height: int = 32,
    width: int = 32,
    out_dir: str | Path | None = None,
) -> Manifest:
    """Class recipes, per-video styles and a stratified half/half split; writes files when ``out_dir`` is given."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    if samples_per_class < 2:
        raise ValueError("need at least two samples per class for a split")
    if length < 32:
        raise ValueError("videos need at least 32 frames for two distinct 16-frame segments")
    rng = np.random.default_rng(seed)
    classes = [SignClassSpec.sample(c, rng) for c in range(num_classes)]
    entries = []
    vid = 0
    for c in range(num_classes):
        order = rng.permutation(samples_per_class)
        n_train = samples_per_class // 2
        for j in range(samples_per_class):
            split = "train" if order[j] < n_train else "test"
            entries.append(VideoEntry(vid, c, video_seed(seed, vid), split))
            vid += 1
    manifest = Manifest(num_classes, samples_per_class, seed, length, height, width, classes, entries)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "poses").mkdir(parents=True, exist_ok=True)
        (out / "videos").mkdir(parents=True, exist_ok=True)
        written = []
        for e in manifest.entries:
            pose_path = f"poses/{e.video_id:05d}.srps"
            video_path = f"videos/{e.video_id:05d}.srvd"
            stream = manifest.stream_of(e)
            save_pose_stream(stream, out / pose_path)
            save_video(render_video(stream, height, width, manifest.style_of(e)), out / video_path)
            written.append(VideoEntry(e.video_id, e.class_id, e.style_seed, e.split, pose_path, video_path))
        manifest.entries = written
        manifest.save(out / "manifest.json")
    return manifest


def load_entry(root: str | Path, entry: VideoEntry) -> tuple[PoseStream, np.ndarray]:
    root = Path(root)
    return load_pose_stream(root / entry.pose_path), load_video(root / entry.video_path)
