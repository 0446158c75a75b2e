"""Synthetic grounding corpus plus the on-disk formats.

Every sample is a video of T frames of Gaussian background noise with one
contiguous span whose frames carry an extra planted direction, and a token
query whose ids deterministically define that direction. Features travel in
a small binary container (magic NFTF), annotations as JSONL.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass
from collections.abc import Sequence

import numpy as np

from .errors import FormatError, ParseError

FEATURE_MAGIC = b"NFTF"
FEATURE_VERSION = 1

ANNOTATION_KEYS = ("query_id", "video_id", "token_ids", "t_s", "t_e", "T")


@dataclass
class Annotation:
    """One query over one video; span endpoints are frame coordinates."""

    query_id: str
    video_id: str
    token_ids: list[int]
    t_s: float
    t_e: float
    video_len: int

    def __post_init__(self):
        if not self.query_id or not self.video_id:
            raise ValueError("query_id and video_id must be non-empty")
        self.token_ids = [int(t) for t in self.token_ids]
        if not self.token_ids or any(t < 0 for t in self.token_ids):
            raise ValueError(f"token_ids must be non-empty and non-negative, got {self.token_ids}")
        if self.video_len < 2:
            raise ValueError(f"video_len must be >= 2, got {self.video_len}")
        if not 0.0 <= self.t_s < self.t_e <= self.video_len - 1:
            raise ValueError(
                f"span ({self.t_s}, {self.t_e}) violates 0 <= t_s < t_e <= {self.video_len - 1}"
            )


def compute_snr(annotation: Annotation) -> float:
    """Span length over video length."""
    return (annotation.t_e - annotation.t_s) / annotation.video_len


@dataclass
class SyntheticSpec:
    video_len: int = 100
    feature_dim: int = 32
    vocab_size: int = 64
    snr_range: tuple[float, float] = (0.1, 0.3)
    noise_scale: float = 1.0
    pattern_strength: float = 3.0
    query_len: int = 6
    seed: int = 0

    def __post_init__(self):
        self.snr_range = (float(self.snr_range[0]), float(self.snr_range[1]))
        if self.video_len < 2 or self.feature_dim < 1 or self.vocab_size < 1:
            raise ValueError("video_len >= 2, feature_dim >= 1, vocab_size >= 1 required")
        lo, hi = self.snr_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"snr_range must satisfy 0 < lo <= hi <= 1, got {self.snr_range}")
        if self.noise_scale < 0.0 or self.query_len < 1:
            raise ValueError("noise_scale must be >= 0 and query_len >= 1")


def pattern(token_ids: Sequence[int], feature_dim: int) -> np.ndarray:
    """Unit vector derived from a stable hash of the token sequence."""
    digest = hashlib.blake2b(
        b",".join(str(int(t)).encode() for t in token_ids), digest_size=8
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    v = rng.normal(size=feature_dim)
    return v / np.linalg.norm(v)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Generator for one sample; pure function of (seed, index)."""
    return np.random.default_rng([seed, index])


def generate_sample(
    spec: SyntheticSpec,
    rng: np.random.Generator,
    query_id: str = "q00000",
    video_id: str = "v00000",
) -> tuple[np.ndarray, Annotation]:
    """Draw one video/query pair with an integer-endpoint planted span."""
    t, f = spec.video_len, spec.feature_dim
    lo, hi = spec.snr_range
    if _round_half_up(hi * t) < 1:
        raise ValueError(f"snr_range {spec.snr_range} cannot produce a span of >= 1 frame at T={t}")
    if _round_half_up(lo * t) > t - 1:
        raise ValueError(f"snr_range {spec.snr_range} cannot fit inside T={t}")
    snr = rng.uniform(lo, hi)
    span_len = min(max(_round_half_up(snr * t), 1), t - 1)
    t_s = int(rng.integers(0, t - 1 - span_len + 1))
    t_e = t_s + span_len
    token_ids = [int(x) for x in rng.integers(0, spec.vocab_size, size=spec.query_len)]
    features = rng.normal(0.0, spec.noise_scale, size=(t, f))
    features[t_s : t_e + 1] += spec.pattern_strength * pattern(token_ids, f)
    ann = Annotation(query_id, video_id, token_ids, float(t_s), float(t_e), t)
    return features, ann


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def write_features(path: str, features: np.ndarray) -> None:
    """Binary container: NFTF magic, version, T, F, then row-major float64."""
    arr = np.ascontiguousarray(features, dtype="<f8")
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"features must be (T >= 1, F >= 1), got shape {arr.shape}")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<III", FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def read_features(path: str) -> np.ndarray:
    """Inverse of write_features; failures report the offending byte offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise FormatError("truncated magic", len(blob))
    if blob[:4] != FEATURE_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", 0)
    if len(blob) < 8:
        raise FormatError("missing version field", len(blob))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if len(blob) < 12:
        raise FormatError("missing frame count field", len(blob))
    (t,) = struct.unpack_from("<I", blob, 8)
    if t < 1:
        raise FormatError(f"invalid frame count {t}", 8)
    if len(blob) < 16:
        raise FormatError("missing feature width field", len(blob))
    (f,) = struct.unpack_from("<I", blob, 12)
    if f < 1:
        raise FormatError(f"invalid feature width {f}", 12)
    size = 16 + 8 * t * f
    if len(blob) < size:
        raise FormatError(f"payload needs {size} bytes, file has {len(blob)}", len(blob))
    if len(blob) > size:
        raise FormatError("trailing bytes after payload", size)
    return np.frombuffer(blob[16:size], dtype="<f8").reshape(t, f).copy()


def write_annotations(path: str, annotations: Sequence[Annotation]) -> None:
    """JSONL with keys query_id, video_id, token_ids, t_s, t_e, T."""
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            obj = {
                "query_id": a.query_id,
                "video_id": a.video_id,
                "token_ids": a.token_ids,
                "t_s": float(a.t_s),
                "t_e": float(a.t_e),
                "T": a.video_len,
            }
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def read_annotations(path: str) -> list[Annotation]:
    """Inverse of write_annotations; failures report the 1-based line number."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as e:
                raise ParseError(f"invalid JSON: {e}", lineno) from e
            if not isinstance(obj, dict) or set(obj) != set(ANNOTATION_KEYS):
                got = sorted(obj) if isinstance(obj, dict) else type(obj).__name__
                raise ParseError(f"expected keys {sorted(ANNOTATION_KEYS)}, got {got}", lineno)
            try:
                ann = Annotation(
                    query_id=obj["query_id"],
                    video_id=obj["video_id"],
                    token_ids=obj["token_ids"],
                    t_s=float(obj["t_s"]),
                    t_e=float(obj["t_e"]),
                    video_len=int(obj["T"]),
                )
            except (TypeError, ValueError) as e:
                raise ParseError(str(e), lineno) from e
            out.append(ann)
    return out


def write_dataset(out_dir: str, spec: SyntheticSpec, count: int) -> None:
    """Write manifest, annotations, and one feature file per sample."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    annotations = []
    for i in range(count):
        rng = sample_rng(spec.seed, i)
        features, ann = generate_sample(spec, rng, query_id=f"q{i:05d}", video_id=f"v{i:05d}")
        write_features(os.path.join(feat_dir, f"{ann.video_id}.nftf"), features)
        annotations.append(ann)
    write_annotations(os.path.join(out_dir, "annotations.jsonl"), annotations)
    manifest = {"count": count, "spec": asdict(spec), "format": f"nftf-v{FEATURE_VERSION}"}
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_dataset(data_dir: str) -> list[tuple[np.ndarray, Annotation]]:
    """Read back every (features, annotation) pair of a dataset directory."""
    ann_path = os.path.join(data_dir, "annotations.jsonl")
    if not os.path.exists(ann_path):
        raise FileNotFoundError(ann_path)
    pairs = []
    for ann in read_annotations(ann_path):
        feat_path = os.path.join(data_dir, "features", f"{ann.video_id}.nftf")
        if not os.path.exists(feat_path):
            raise FileNotFoundError(feat_path)
        features = read_features(feat_path)
        if features.shape[0] != ann.video_len:
            raise ValueError(
                f"{ann.video_id}: feature file has {features.shape[0]} frames, "
                f"annotation says {ann.video_len}"
            )
        pairs.append((features, ann))
    return pairs
