"""Model oracle abstraction: capabilities, inputs, responses, query keys.

An oracle answers "what would the model say after this visual sequence and
prompt", exposing only first-generation-step logits plus (optionally) the
final position's attention over the visual tokens. Implementations must be
pure: the same input queried twice returns bit-identical responses.
"""
from __future__ import annotations

import enum
import math
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInput, ShapeError
from ..numerics import SparseLogits


class PromptKind(enum.Enum):
    DESCRIBE_SINGLE_TOKEN = "describe_single_token"
    DESCRIBE_REGION = "describe_region"
    DESCRIBE_IMAGE = "describe_image"


# wire-format kind strings for recorded requests
KIND_SINGLE = "single"
KIND_REGION_SRC = "region_src"
KIND_REGION_ABLATE = "region_ablate"
KIND_GLOBAL_SRC = "global_src"
KIND_GLOBAL_ABLATE = "global_ablate"
REQUEST_KINDS = (
    KIND_SINGLE,
    KIND_REGION_SRC,
    KIND_REGION_ABLATE,
    KIND_GLOBAL_SRC,
    KIND_GLOBAL_ABLATE,
)


@dataclass(frozen=True)
class RequestKey:
    """Semantic identity of one oracle query, used to match replayed records."""

    image_id: str
    kind: str
    target_idx: int | None = None
    region: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise InvalidInput(f"unknown request kind {self.kind!r}")
        if self.region is not None:
            object.__setattr__(self, "region", tuple(int(i) for i in self.region))


@dataclass(frozen=True)
class OracleCapabilities:
    repeat_for_single_input: bool = False
    uses_image_newline: bool = False
    article_ids: frozenset[int] = frozenset()
    vocab_size: int = 0
    embed_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "article_ids", frozenset(int(i) for i in self.article_ids))
        if self.vocab_size < 1 or self.embed_dim < 1:
            raise InvalidInput("vocab_size and embed_dim must be >= 1")
        bad = [i for i in self.article_ids if not 0 <= i < self.vocab_size]
        if bad:
            raise InvalidInput(f"article ids {bad} outside vocabulary")


@dataclass
class VisualInput:
    """A sequence of visual token embeddings, with optional newline markers.

    `newline_after[j]` means a synthesized line-break token follows the
    visual token at sequence position j. `grid` is layout metadata only.
    """

    tokens: np.ndarray
    newline_after: tuple[int, ...] = ()
    grid: tuple[int, int] | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise ShapeError("visual tokens must form a non-empty L x d matrix")
        if not np.all(np.isfinite(self.tokens)):
            raise InvalidInput("visual tokens must be finite")
        self.newline_after = tuple(int(i) for i in self.newline_after)
        L = self.tokens.shape[0]
        if any(not 0 <= i < L for i in self.newline_after):
            raise InvalidInput("newline positions outside the token sequence")
        if list(self.newline_after) != sorted(set(self.newline_after)):
            raise InvalidInput("newline positions must be sorted and unique")
        if self.grid is not None:
            r, c = self.grid
            if r * c != L:
                raise ShapeError(f"grid {r}x{c} does not cover {L} tokens")


@dataclass
class AttentionRecord:
    """Final-position attention over visual tokens, per layer and head."""

    scores: np.ndarray  # (n_layers, n_heads, L)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 3:
            raise ShapeError("attention scores must be (layers, heads, L)")
        if np.any(self.scores < 0.0):
            raise InvalidInput("attention scores must be non-negative")
        if np.any(self.scores.sum(axis=2) > 1.0 + 1e-6):
            raise InvalidInput("attention over visual positions exceeds 1")


@dataclass
class OracleResponse:
    logits: SparseLogits
    step: int = 1
    article_skipped: bool = False
    attention: AttentionRecord | None = None

    def __post_init__(self):
        if self.step not in (1, 2):
            raise InvalidInput(f"step must be 1 or 2, got {self.step}")
        if self.article_skipped != (self.step == 2):
            raise InvalidInput("article_skipped is true exactly when step is 2")


class Oracle(ABC):
    """Base query surface shared by the analytic, toy and replay oracles."""

    model_id: str

    def __init__(self):
        self._query_count = 0
        self._count_lock = threading.Lock()

    @property
    @abstractmethod
    def capabilities(self) -> OracleCapabilities: ...

    @property
    @abstractmethod
    def pad_embedding(self) -> np.ndarray: ...

    @property
    def cls_embedding(self) -> np.ndarray | None:
        """Reference embedding for similarity baselines, when the model has one."""
        return None

    def class_id_of(self, class_idx: int) -> int | None:
        """Candidate id that names a planted class, for oracles with one."""
        return None

    @property
    def query_count(self) -> int:
        return self._query_count

    @abstractmethod
    def _forward(
        self, vis: VisualInput, prompt: PromptKind, prefix_ids: tuple[int, ...]
    ) -> tuple[np.ndarray, AttentionRecord | None]:
        """Full-vocabulary logits of the next position, plus optional attention."""

    def first_step_logits(
        self,
        vis: VisualInput,
        prompt: PromptKind,
        key: RequestKey | None = None,
    ) -> OracleResponse:
        """Logits of the first contentful generation step.

        When the step-1 argmax (ties to the lower id) is a registered
        article id, that token is greedily appended and the step-2 logits
        are returned instead, with the skip recorded on the response. At
        most one skip is ever taken.
        """
        with self._count_lock:
            self._query_count += 1
        logits, attention = self._forward(vis, prompt, ())
        top = int(np.argmax(logits))
        if top in self.capabilities.article_ids:
            logits, attention = self._forward(vis, prompt, (top,))
            return OracleResponse(
                SparseLogits.full(logits), step=2, article_skipped=True, attention=attention
            )
        return OracleResponse(SparseLogits.full(logits), attention=attention)


def build_single_token_input(
    v: np.ndarray, caps: OracleCapabilities, reference_length: int
) -> VisualInput:
    """Assemble the input for probing one token in isolation.

    Models that resist single-token inputs get the token repeated
    ceil(sqrt(reference_length)) times, approximating one full grid row,
    with one trailing newline marker when the model uses them.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ShapeError("expected a single embedding vector")
    if reference_length < 1:
        raise InvalidInput("reference_length must be >= 1")
    if not caps.repeat_for_single_input:
        return VisualInput(v[None, :])
    r = math.isqrt(reference_length)
    if r * r < reference_length:
        r += 1
    tokens = np.tile(v, (r, 1))
    newline = (r - 1,) if caps.uses_image_newline else ()
    return VisualInput(tokens, newline_after=newline)


def grid_visual_input(
    tokens: np.ndarray,
    grid: tuple[int, int],
    use_newline: bool,
    keep: np.ndarray | None = None,
) -> VisualInput:
    """Assemble a grid-shaped token matrix into a model input sequence.

    `keep` optionally restricts the sequence to a subset of token indices
    (order preserved). With newlines enabled, a marker follows the last
    surviving token of every grid row, so keeping everything reproduces
    the full-image layout exactly.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    rows, cols = grid
    if tokens.ndim != 2 or tokens.shape[0] != rows * cols:
        raise ShapeError(f"grid {rows}x{cols} does not match token matrix")
    if keep is None:
        keep = np.arange(rows * cols)
    keep = np.asarray(keep, dtype=np.int64)
    if keep.size < 1:
        raise InvalidInput("cannot assemble an empty visual sequence")
    if np.any(keep < 0) or np.any(keep >= rows * cols) or np.any(np.diff(keep) <= 0):
        raise InvalidInput("keep indices must be strictly increasing and in range")
    newline_after: list[int] = []
    if use_newline:
        row_of = keep // cols
        for j in range(keep.size):
            last_of_row = j + 1 == keep.size or row_of[j + 1] != row_of[j]
            if last_of_row:
                newline_after.append(j)
    g = (rows, cols) if keep.size == rows * cols else None
    return VisualInput(tokens[keep], newline_after=tuple(newline_after), grid=g)
