"""Distribution and similarity primitives.

Everything here accumulates in float64 regardless of input dtype, uses the
natural logarithm for KL/JSD, and breaks rank ties by lower candidate id so
that repeated runs and replayed runs agree bit for bit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, InvalidInput, MissingCandidateError, ShapeError


@dataclass
class SparseLogits:
    """Raw pre-softmax scores for an explicit set of candidate ids.

    `candidate_ids` must be unique; a full-vocabulary result is just the
    special case ids = 0..V-1.
    """

    candidate_ids: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.candidate_ids.ndim != 1 or self.values.ndim != 1:
            raise ShapeError("logits and candidate ids must be 1-D")
        if self.candidate_ids.shape != self.values.shape:
            raise ShapeError(
                f"{self.candidate_ids.size} candidate ids vs {self.values.size} logits"
            )
        if np.unique(self.candidate_ids).size != self.candidate_ids.size:
            raise InvalidInput("candidate ids must be unique")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInput("logits must be finite")

    @classmethod
    def full(cls, values) -> "SparseLogits":
        values = np.asarray(values, dtype=np.float64)
        return cls(np.arange(values.size, dtype=np.int64), values)

    def __len__(self) -> int:
        return int(self.candidate_ids.size)


@dataclass
class ProbDist:
    """A probability distribution over explicit candidate ids."""

    candidate_ids: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.candidate_ids.shape != self.probs.shape or self.probs.ndim != 1:
            raise ShapeError("ids and probabilities must be aligned 1-D arrays")
        if np.any(self.probs < 0.0):
            raise InvalidInput("probabilities must be non-negative")
        if abs(float(self.probs.sum()) - 1.0) > 1e-9:
            raise InvalidInput(f"probabilities sum to {self.probs.sum()!r}, not 1")


def softmax(logits) -> np.ndarray:
    """Shift-stable softmax in float64.

    Raises InvalidInput on empty or non-finite input.
    """
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise InvalidInput("softmax of an empty logit vector")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("softmax requires finite logits")
    e = np.exp(x - x.max())
    return e / e.sum()


def l2_normalize_rows(mat) -> np.ndarray:
    """Normalize each row to unit L2 norm; all-zero rows are left at zero."""
    x = np.asarray(mat, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={x.ndim}")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    return x / safe


def cosine_similarity_matrix(a, b) -> np.ndarray:
    """Pairwise cosine similarities between the rows of `a` and the rows of `b`.

    Rows of zero norm contribute zero similarity by convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("cosine similarity expects 2-D inputs")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return l2_normalize_rows(a) @ l2_normalize_rows(b).T


def _as_dist(p) -> ProbDist:
    if isinstance(p, ProbDist):
        return p
    probs = np.asarray(p, dtype=np.float64)
    return ProbDist(np.arange(probs.size, dtype=np.int64), probs)


def kl_divergence(m, q) -> float:
    """KL(m || q) in nats with the 0 * ln(0/q) = 0 convention.

    Both arguments may be ProbDist or plain probability arrays (ids taken
    as positions). Ids must agree elementwise; q must be positive wherever
    m is positive.
    """
    m, q = _as_dist(m), _as_dist(q)
    if m.candidate_ids.size != q.candidate_ids.size or np.any(
        m.candidate_ids != q.candidate_ids
    ):
        raise AlignmentError("candidate ids of m and q do not match")
    support = m.probs > 0.0
    if np.any(q.probs[support] <= 0.0):
        raise InvalidInput("q must be positive wherever m is positive")
    mp = m.probs[support]
    return float(np.sum(mp * np.log(mp / q.probs[support])))


def jsd(m, n) -> float:
    """Jensen-Shannon divergence in nats: 0.5*KL(m||q) + 0.5*KL(n||q), q = (m+n)/2."""
    m, n = _as_dist(m), _as_dist(n)
    if m.candidate_ids.size != n.candidate_ids.size or np.any(
        m.candidate_ids != n.candidate_ids
    ):
        raise AlignmentError("candidate ids of m and n do not match")
    q = 0.5 * (m.probs + n.probs)
    qd = ProbDist(m.candidate_ids, q)
    return 0.5 * kl_divergence(m, qd) + 0.5 * kl_divergence(n, qd)


def top_ranked_ids(logits: SparseLogits, m: int) -> np.ndarray:
    """Ids of the `m` highest logits, ranked by value descending, ties by lower id."""
    if m < 1:
        raise InvalidInput(f"m must be >= 1, got {m}")
    if m > len(logits):
        raise InvalidInput(f"m={m} exceeds {len(logits)} available candidates")
    order = np.lexsort((logits.candidate_ids, -logits.values))
    return logits.candidate_ids[order[:m]]


def head_vocab_distributions(
    src: SparseLogits, ablated: SparseLogits, m: int
) -> tuple[ProbDist, ProbDist]:
    """Restrict both logit sets to the source's top-m ids and softmax each.

    The head vocabulary is defined by the unablated source: its m top-ranked
    ids (ties to lower id) in rank order. The ablated set must cover every
    one of those ids or MissingCandidateError names the first gap.
    """
    head = top_ranked_ids(src, m)
    src_pos = {int(i): k for k, i in enumerate(src.candidate_ids)}
    abl_pos = {int(i): k for k, i in enumerate(ablated.candidate_ids)}
    for i in head:
        if int(i) not in abl_pos:
            raise MissingCandidateError(
                f"candidate id {int(i)} missing from ablated logits"
            )
    src_vals = np.array([src.values[src_pos[int(i)]] for i in head])
    abl_vals = np.array([ablated.values[abl_pos[int(i)]] for i in head])
    return ProbDist(head, softmax(src_vals)), ProbDist(head, softmax(abl_vals))


def top1_probability(logits, m: int) -> float:
    """Probability of the rank-1 candidate under a softmax over the top-m logits.

    `m` is clipped to the number of available candidates, so passing a full
    vocabulary smaller than m uses the whole vocabulary.
    """
    if not isinstance(logits, SparseLogits):
        logits = SparseLogits.full(logits)
    if len(logits) == 0:
        raise InvalidInput("no candidates to rank")
    if m < 1:
        raise InvalidInput(f"m must be >= 1, got {m}")
    m_eff = min(m, len(logits))
    head = top_ranked_ids(logits, m_eff)
    pos = {int(i): k for k, i in enumerate(logits.candidate_ids)}
    vals = np.array([logits.values[pos[int(i)]] for i in head])
    return float(softmax(vals)[0])
