"""Redundancy codebook: build, prune, calibrate, persist.

A token is a redundancy candidate when all three probes agree it carries
nothing: near-zero isolated probability, a feature-space outlier within
its own image, and no measurable effect on the image-level output
distribution. Candidates that recur across the whole corpus (large pooled
clusters) become prototypes; at inference time any token too similar to a
prototype is dropped.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .analysis import AnalysisConfig, AnalysisRecord, analyze_corpus
from .clustering import dpc_cluster
from .errors import (
    ConsistencyError,
    CorruptStoreError,
    EmptyCandidateSet,
    InvalidInput,
    RangeError,
    UnsupportedVersion,
)
from .numerics import cosine_similarity_matrix
from .oracle.base import Oracle
from .wire import CorpusImage

CODEBOOK_MAGIC = b"RCBK"
CODEBOOK_VERSION = 1
_I64_MAX = 2**63 - 1


@dataclass(frozen=True)
class Thresholds:
    """Candidate gates. All comparisons in the selector are strict.

    tau_prob: single-token top-1 probability must fall below this.
    tau_out: per-image cluster size must fall below this (outlier test).
    tau_jsd: final cascaded divergence must fall below this.
    tau_in: pooled cluster size must exceed this (context independence).
    """

    tau_prob: float = 0.1
    tau_out: int = 8
    tau_jsd: float = 2e-3
    tau_in: int = 64

    def __post_init__(self):
        if not 0 < self.tau_prob <= 1:
            raise InvalidInput("tau_prob must lie in (0, 1]")
        if self.tau_out < 1 or self.tau_in < 1:
            raise InvalidInput("tau_out and tau_in must be >= 1")
        if self.tau_jsd <= 0:
            raise InvalidInput("tau_jsd must be positive")

    def to_json_dict(self) -> dict:
        return {
            "tau_prob": self.tau_prob,
            "tau_out": self.tau_out,
            "tau_jsd": self.tau_jsd,
            "tau_in": self.tau_in,
        }


# named threshold profiles; "synthetic" matches the generated corpora in
# this repository, where background is the dense majority rather than an
# outlier, so the per-image outlier gate passes through (tau_out > L)
PROFILES: dict[str, tuple[Thresholds, int]] = {
    "default": (Thresholds(0.1, 8, 2e-3, 64), 64),
    "strict": (Thresholds(0.08, 3, 1.5e-3, 16), 24),
    "synthetic": (Thresholds(0.3, 65, 2e-3, 32), 64),
}
DEFAULT_K_POOL = 64


@dataclass
class RedundancyCodebook:
    """Prototype matrix plus the provenance needed to reuse it safely."""

    prototypes: np.ndarray  # (N, d) float32
    model_id: str
    thresholds: Thresholds
    k_pool: int
    format_version: int = CODEBOOK_VERSION

    def __post_init__(self):
        self.prototypes = np.ascontiguousarray(self.prototypes, dtype=np.float32)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise InvalidInput("a codebook needs at least one prototype row")

    @property
    def n_prototypes(self) -> int:
        return int(self.prototypes.shape[0])

    @property
    def d(self) -> int:
        return int(self.prototypes.shape[1])


def select_candidates(
    records: list[AnalysisRecord],
    embeddings: dict[str, np.ndarray],
    th: Thresholds,
) -> tuple[np.ndarray, list[tuple[str, int]]]:
    """Apply the three per-token gates and gather candidate embeddings.

    Returns the candidate matrix and (image_id, token_idx) provenance, in
    canonical (image_id, token_idx) order. Records whose image or token is
    absent from `embeddings` raise ConsistencyError.
    """
    chosen = []
    for rec in sorted(records, key=lambda r: (r.image_id, r.token_idx)):
        if not (
            rec.p1 < th.tau_prob
            and rec.cluster_size_img < th.tau_out
            and rec.jsd_final < th.tau_jsd
        ):
            continue
        tokens = embeddings.get(rec.image_id)
        if tokens is None:
            raise ConsistencyError(f"no embeddings for image {rec.image_id}")
        if not 0 <= rec.token_idx < tokens.shape[0]:
            raise ConsistencyError(
                f"token {rec.token_idx} outside image {rec.image_id}"
            )
        chosen.append((rec.image_id, rec.token_idx, tokens[rec.token_idx]))
    if not chosen:
        return np.empty((0, 0)), []
    matrix = np.stack([v for _, _, v in chosen]).astype(np.float64)
    return matrix, [(img, idx) for img, idx, _ in chosen]


def context_independent_filter(
    candidates: np.ndarray, k_pool: int, tau_in: int
) -> np.ndarray:
    """Indices of candidates whose pooled cluster size exceeds tau_in.

    The pooled clustering uses k_pool both as the kNN depth (clamped to
    N-1) and as the granularity rule n_clusters = ceil(N / k_pool).
    """
    if k_pool < 1 or tau_in < 1:
        raise InvalidInput("k_pool and tau_in must be >= 1")
    n = candidates.shape[0] if candidates.ndim == 2 else 0
    if n == 0:
        raise EmptyCandidateSet("no candidates to filter")
    if n == 1:
        return np.empty(0, dtype=np.int64) if tau_in >= 1 else np.zeros(1, dtype=np.int64)
    k = min(k_pool, n - 1)
    n_clusters = min(n, max(1, math.ceil(n / k_pool)))
    sizes = dpc_cluster(candidates, k=k, n_clusters=n_clusters).point_sizes()
    return np.flatnonzero(sizes > tau_in).astype(np.int64)


def build_codebook_from_records(
    records: list[AnalysisRecord],
    embeddings: dict[str, np.ndarray],
    th: Thresholds,
    k_pool: int = DEFAULT_K_POOL,
    model_id: str = "unknown",
) -> RedundancyCodebook:
    candidates, provenance = select_candidates(records, embeddings, th)
    if not provenance:
        raise EmptyCandidateSet("no token passed the candidate gates")
    kept = context_independent_filter(candidates, k_pool, th.tau_in)
    if kept.size == 0:
        raise EmptyCandidateSet(
            f"no pooled cluster exceeded tau_in={th.tau_in} "
            f"({len(provenance)} candidates)"
        )
    return RedundancyCodebook(
        prototypes=candidates[kept].astype(np.float32),
        model_id=model_id,
        thresholds=th,
        k_pool=k_pool,
    )


def build_codebook(
    images: list[CorpusImage],
    oracle: Oracle,
    cfg: AnalysisConfig | None = None,
    th: Thresholds | None = None,
    k_pool: int = DEFAULT_K_POOL,
    jobs: int = 1,
) -> RedundancyCodebook:
    """Probe a corpus and distill its redundant prototypes in one call."""
    th = th or Thresholds()
    records = analyze_corpus(oracle, images, cfg, jobs=jobs)
    embeddings = {img.image_id: np.asarray(img.tokens, dtype=np.float64) for img in images}
    return build_codebook_from_records(
        records, embeddings, th, k_pool=k_pool, model_id=oracle.model_id
    )


def redundancy_scores(tokens: np.ndarray, cb: RedundancyCodebook) -> np.ndarray:
    """Max cosine similarity of each token to any prototype, clipped to [-1, 1]."""
    sims = cosine_similarity_matrix(tokens, cb.prototypes)
    return np.clip(sims.max(axis=1), -1.0, 1.0)


def prune_threshold(tokens: np.ndarray, cb: RedundancyCodebook, r_threshold: float = 0.5) -> np.ndarray:
    """Keep (in order) every token whose redundancy score is <= r_threshold."""
    if not -1.0 <= r_threshold <= 1.0:
        raise InvalidInput(f"r_threshold must lie in [-1, 1], got {r_threshold}")
    scores = redundancy_scores(tokens, cb)
    return np.flatnonzero(scores <= r_threshold).astype(np.int64)


def prune_budget(tokens: np.ndarray, cb: RedundancyCodebook, budget: int) -> np.ndarray:
    """Keep the `budget` least redundant tokens, ties to the lower index, in order."""
    L = np.asarray(tokens).shape[0]
    if not 0 <= budget <= L:
        raise InvalidInput(f"budget must lie in [0, {L}], got {budget}")
    if budget == 0:
        return np.empty(0, dtype=np.int64)
    scores = redundancy_scores(tokens, cb)
    order = np.lexsort((np.arange(L), scores))
    return np.sort(order[:budget]).astype(np.int64)


def calibrate_threshold(
    images: list[CorpusImage],
    cb: RedundancyCodebook,
    target_avg_kept: float,
    tol: float = 1e-4,
) -> float:
    """Bisect for the smallest r whose mean retained count meets the target.

    The retained-count curve is a step function of r, so exact equality is
    not always possible; when the achieved mean differs from the target a
    warning reports the nearest achievable value.
    """
    if not images:
        raise InvalidInput("calibration needs at least one image")
    per_image = [redundancy_scores(np.asarray(img.tokens, dtype=np.float64), cb) for img in images]
    mean_l = float(np.mean([s.size for s in per_image]))
    if not 0 < target_avg_kept <= mean_l:
        raise InvalidInput(
            f"target mean {target_avg_kept} outside (0, {mean_l}]"
        )

    def mean_kept(r: float) -> float:
        return float(np.mean([(s <= r).sum() for s in per_image]))

    lo, hi = -1.0, 1.0
    if mean_kept(lo) >= target_avg_kept:
        hi = lo
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mean_kept(mid) >= target_avg_kept:
            hi = mid
        else:
            lo = mid
    achieved = mean_kept(hi)
    if abs(achieved - target_avg_kept) > 1e-9:
        warnings.warn(
            f"target mean {target_avg_kept} not exactly achievable; "
            f"r={hi:.6f} retains {achieved} on average",
            stacklevel=2,
        )
    return hi


def probing_flops(length: int, n_prototypes: int, d: int) -> int:
    """Exact multiply-add count of scoring one image: L * N * (2d - 1)."""
    if length < 1 or n_prototypes < 1 or d < 1:
        raise InvalidInput("length, n_prototypes and d must be >= 1")
    result = int(length) * int(n_prototypes) * (2 * int(d) - 1)
    if result > _I64_MAX:
        raise RangeError(f"{result} exceeds the 64-bit range")
    return result


def save_codebook(cb: RedundancyCodebook, path):
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    float32 prototype payload, trailing u32 CRC32 of the payload."""
    header = json.dumps(
        {
            "model_id": cb.model_id,
            "thresholds": cb.thresholds.to_json_dict(),
            "k_pool": cb.k_pool,
            "N": cb.n_prototypes,
            "d": cb.d,
        },
        sort_keys=True,
    ).encode()
    payload = np.ascontiguousarray(cb.prototypes, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(CODEBOOK_MAGIC)
        fh.write(struct.pack("<I", cb.format_version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_codebook(path) -> RedundancyCodebook:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != CODEBOOK_MAGIC:
        raise CorruptStoreError(f"{path} is not a codebook file")
    version, header_len = struct.unpack("<II", raw[4:12])
    if version != CODEBOOK_VERSION:
        raise UnsupportedVersion(f"codebook version {version}, expected {CODEBOOK_VERSION}")
    if len(raw) < 12 + header_len:
        raise CorruptStoreError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len])
        th = Thresholds(**header["thresholds"])
        n, d = int(header["N"]), int(header["d"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorruptStoreError(f"{path}: bad header: {e}") from e
    body = raw[12 + header_len :]
    want = 4 * n * d + 4
    if len(body) != want:
        raise CorruptStoreError(
            f"{path}: payload holds {len(body)} bytes, expected {want} (truncated?)"
        )
    payload, (crc,) = body[:-4], struct.unpack("<I", body[-4:])
    if zlib.crc32(payload) != crc:
        raise CorruptStoreError(f"{path}: payload checksum mismatch")
    prototypes = np.frombuffer(payload, dtype="<f4").reshape(n, d)
    return RedundancyCodebook(
        prototypes=prototypes.copy(),
        model_id=header["model_id"],
        thresholds=th,
        k_pool=int(header["k_pool"]),
        format_version=version,
    )
