"""Sliding-window features, activity-weighted video vectors, cosine dictionary retrieval and the class distribution."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc

FEATURE_MAGIC = b"SRFT0001"
TAU_GRID = np.round(np.arange(1, 101) * 0.001, 3)
GAMMA_FLOOR = 1e-6


def sliding_segments(length: int, window: int, stride: int = 2) -> list[int]:
    """Start frames of the windows; a clip shorter than the window yields a single start at 0."""
    if stride < 1 or window < 1:
        raise ValueError("window and stride must be >= 1")
    if length < window:
        return [0]
    count = (length - window) // stride + 1
    return [i * stride for i in range(count)]


def pad_to_length(video: np.ndarray, length: int) -> np.ndarray:
    """Repeat the last frame until the clip has ``length`` frames."""
    if video.shape[0] >= length:
        return video
    if video.shape[0] == 0:
        raise ValueError("cannot pad an empty clip")
    tail = np.repeat(video[-1:], length - video.shape[0], axis=0)
    return np.concatenate([video, tail], axis=0)


@dataclass(frozen=True)
class SegmentEmbedding:
    z_avg: np.ndarray
    gamma: float
    start: int


def segment_embeddings(model, video: np.ndarray, stride: int = 2) -> list[SegmentEmbedding]:
    """Unmasked forward pass over every window of one (L, H, W, C) video."""
    t = model.cfg.frames
    video = pad_to_length(np.asarray(video, dtype=np.float64), t)
    starts = sliding_segments(video.shape[0], t, stride)
    out = []
    # one window at a time keeps the (heads, N, N) attention maps small
    for s in starts:
        z_avg = model.pool(model.embed_video(video[None, s:s + t]))
        gamma = float(dc.sigmoid(model.decoder.activity(z_avg)).data.max())
        out.append(SegmentEmbedding(z_avg.data[0].copy(), gamma, s))
    return out


def video_representation(segments: list[SegmentEmbedding], weighted: bool = True) -> np.ndarray:
    """Gamma-weighted mean of segment vectors; plain mean when unweighted or when all gammas vanish."""
    if not segments:
        raise ValueError("need at least one segment")
    z = np.stack([s.z_avg for s in segments])
    gamma = np.array([s.gamma for s in segments], dtype=np.float64)
    if not weighted or gamma.sum() < GAMMA_FLOOR:
        return z.mean(axis=0)
    return (gamma[:, None] * z).sum(axis=0) / gamma.sum()


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalise a zero vector")
    return x / norm


@dataclass(frozen=True)
class RetrievalIndex:
    embeddings: np.ndarray
    labels: np.ndarray
    sample_ids: np.ndarray

    @classmethod
    def build(cls, features, labels, sample_ids=None) -> RetrievalIndex:
        feats = l2_normalize(np.atleast_2d(features))
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.arange(len(feats)) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
        if len(feats) == 0:
            raise ValueError("empty index")
        if not (len(labels) == len(ids) == len(feats)):
            raise ValueError("features, labels and sample ids must have the same length")
        for arr in (feats, labels, ids):
            arr.setflags(write=False)
        return cls(feats, labels, ids)

    def __len__(self) -> int:
        return len(self.embeddings)

    def scores(self, z: np.ndarray) -> np.ndarray:
        return self.embeddings @ l2_normalize(z)

    def query(self, z: np.ndarray, k: int | None = None, exclude: int | None = None) -> list[tuple[int, int, float]]:
        """Top-k (row, label, score), descending score, lower row first on ties."""
        if k is not None and k < 1:
            raise ValueError("k must be >= 1")
        s = self.scores(z)
        rows = np.arange(len(s))
        order = np.lexsort((rows, -s))
        if exclude is not None:
            order = order[order != exclude]
        if k is not None:
            order = order[:k]
        return [(int(r), int(self.labels[r]), float(s[r])) for r in order]

    def class_rank(self, z: np.ndarray, label: int, exclude: int | None = None) -> int:
        """1-based rank of ``label`` when classes are ordered by their best sample."""
        seen: list[int] = []
        for _, lab, _ in self.query(z, exclude=exclude):
            if lab not in seen:
                seen.append(lab)
                if lab == label:
                    return len(seen)
        raise KeyError(f"class {label} is not in the index")


def retrieval_metrics(ranks) -> dict[str, float]:
    r = np.asarray(ranks, dtype=np.float64)
    if r.size == 0 or np.any(r < 1):
        raise ValueError("ranks must be a nonempty list of values >= 1")
    return {
        "dcg": float(np.mean(1.0 / np.log2(r + 1.0))),
        "mrr": float(np.mean(1.0 / r)),
        "rec1": float(np.mean(r <= 1)),
        "rec5": float(np.mean(r <= 5)),
    }


def evaluate(index: RetrievalIndex, queries, labels) -> dict[str, float]:
    ranks = [index.class_rank(q, int(y)) for q, y in zip(np.atleast_2d(queries), labels)]
    return retrieval_metrics(ranks)


def evaluate_leave_one_out(features, labels) -> dict[str, float]:
    """Each row queries all the others; used for model selection inside the training split."""
    index = RetrievalIndex.build(features, labels)
    ranks = [index.class_rank(index.embeddings[i], int(index.labels[i]), exclude=i) for i in range(len(index))]
    return retrieval_metrics(ranks)


# -- class probability distribution ---------------------------------------------

def class_similarity_matrix(features, labels, num_classes: int | None = None) -> np.ndarray:
    """Mean cosine similarity between classes; same-sample pairs are left out of the diagonal."""
    f = l2_normalize(features)
    labels = np.asarray(labels, dtype=np.int64)
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    members = [np.flatnonzero(labels == k) for k in range(c)]
    if any(len(m) == 0 for m in members):
        raise ValueError("every class needs at least one sample")
    sim = f @ f.T
    out = np.empty((c, c))
    for a in range(c):
        for b in range(a, c):
            block = sim[np.ix_(members[a], members[b])]
            if a == b and len(members[a]) > 1:
                n = len(members[a])
                value = (block.sum() - np.trace(block)) / (n * (n - 1))
            else:
                value = block.mean()
            out[a, b] = out[b, a] = value
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def temperature_search(row, grid: np.ndarray = TAU_GRID) -> tuple[float, np.ndarray]:
    """Temperature whose softmax peak is closest to 0.5 from below; falls back to the largest grid value."""
    row = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise ValueError("similarity row must be finite")
    best_tau, best_gap = None, np.inf
    for tau in grid:
        peak = _softmax(row / tau).max()
        gap = 0.5 - peak
        if gap > 0 and gap < best_gap:
            best_tau, best_gap = float(tau), gap
    tau = best_tau if best_tau is not None else float(grid[-1])
    return tau, _softmax(row / tau)


@dataclass
class ClassDistribution:
    phi: np.ndarray
    taus: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.taus = np.asarray(self.taus, dtype=np.float64)
        if self.phi.ndim != 2 or self.phi.shape[0] != self.phi.shape[1]:
            raise ValueError(f"phi must be square, got {self.phi.shape}")
        if np.any(np.abs(self.phi.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("phi rows must sum to 1")
        if np.any(self.phi < 0):
            raise ValueError("phi entries must be non-negative")

    @classmethod
    def from_similarity(cls, sim: np.ndarray, grid: np.ndarray = TAU_GRID) -> ClassDistribution:
        taus, rows = zip(*(temperature_search(r, grid) for r in np.asarray(sim)))
        return cls(np.stack(rows), np.array(taus))

    @classmethod
    def from_features(cls, features, labels, num_classes: int | None = None) -> ClassDistribution:
        return cls.from_similarity(class_similarity_matrix(features, labels, num_classes))

    @classmethod
    def identity(cls, num_classes: int) -> ClassDistribution:
        return cls(np.eye(num_classes), np.zeros(num_classes))

    def save(self, phi_path: str | Path, tau_path: str | Path) -> None:
        c = self.phi.shape[0]
        header = ",".join(f"c{j}" for j in range(c))
        np.savetxt(phi_path, self.phi, delimiter=",", header=header, comments="", fmt="%.17g")
        with open(tau_path, "w") as fh:
            fh.write("class,tau\n")
            for k, tau in enumerate(self.taus):
                fh.write(f"{k},{float(tau)!r}\n")

    @classmethod
    def load(cls, phi_path: str | Path, tau_path: str | Path) -> ClassDistribution:
        phi = np.loadtxt(phi_path, delimiter=",", skiprows=1, ndmin=2)
        taus = np.loadtxt(tau_path, delimiter=",", skiprows=1, ndmin=2)[:, 1]
        return cls(phi, taus)


# -- feature store ----------------------------------------------------------------

class FeatureStoreError(ValueError):
    pass


def write_features(path: str | Path, features, labels, sample_ids) -> None:
    feats = np.atleast_2d(np.asarray(features, dtype=np.float32))
    labels = np.asarray(labels, dtype=np.uint32)
    ids = np.asarray(sample_ids, dtype=np.uint32)
    n, d = feats.shape
    if len(labels) != n or len(ids) != n:
        raise FeatureStoreError("labels and ids must match the feature rows")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", n, d))
        for i in range(n):
            fh.write(struct.pack("<II", int(labels[i]), int(ids[i])))
            fh.write(feats[i].astype("<f4").tobytes())


def read_features(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(features float64 (N, D), labels, sample ids)."""
    blob = Path(path).read_bytes()
    if blob[:8] != FEATURE_MAGIC:
        raise FeatureStoreError(f"{path}: not a feature store (bad magic)")
    if len(blob) < 16:
        raise FeatureStoreError(f"{path}: truncated header")
    n, d = struct.unpack_from("<II", blob, 8)
    row = 8 + 4 * d
    if len(blob) != 16 + n * row:
        raise FeatureStoreError(f"{path}: expected {16 + n * row} bytes for {n} rows of dim {d}, found {len(blob)}")
    feats = np.empty((n, d))
    labels = np.empty(n, dtype=np.int64)
    ids = np.empty(n, dtype=np.int64)
    for i in range(n):
        off = 16 + i * row
        labels[i], ids[i] = struct.unpack_from("<II", blob, off)
        feats[i] = np.frombuffer(blob, dtype="<f4", count=d, offset=off + 8)
    return feats, labels, ids
