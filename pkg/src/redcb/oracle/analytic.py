"""Closed-form oracle for desk-scale verification.

Logits are beta * A^T * meanpool(visual tokens) where the columns of A are
unit class directions plus one all-zero none-of-the-above column, so every
probability this oracle emits has a pencil-and-paper value. The attention
it reports is synthesized: a softmax over each token's cosine similarity
to the (fixed) mean class direction, replicated as 1 layer x 1 head.
"""
from __future__ import annotations

import numpy as np

from ..errors import InvalidInput, ShapeError
from ..numerics import cosine_similarity_matrix
from .base import (
    AttentionRecord,
    Oracle,
    OracleCapabilities,
    PromptKind,
    VisualInput,
)


def class_directions(n_classes: int, d: int) -> np.ndarray:
    """Rows are the unit class directions: the first n_classes basis vectors."""
    if not 1 <= n_classes <= d - 2:
        raise InvalidInput(f"need 1 <= n_classes <= d-2, got {n_classes} with d={d}")
    return np.eye(n_classes, d)


def background_direction(n_classes: int, d: int) -> np.ndarray:
    """Unit direction orthogonal to every class direction."""
    if not 1 <= n_classes <= d - 2:
        raise InvalidInput(f"need 1 <= n_classes <= d-2, got {n_classes} with d={d}")
    b = np.zeros(d)
    b[n_classes] = 1.0
    return b


class AnalyticOracle(Oracle):
    """Linear mean-pool scorer over a configured class-direction matrix.

    Vocabulary ids 0..C-1 name the classes; id C is the zero-direction
    "none of the above" candidate. The article set is always empty, so
    responses are always step 1.
    """

    def __init__(self, directions: np.ndarray, beta: float = 5.0):
        super().__init__()
        directions = np.asarray(directions, dtype=np.float64)
        if directions.ndim != 2:
            raise ShapeError("class directions must be a C x d matrix")
        norms = np.linalg.norm(directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise InvalidInput("class directions must be unit vectors")
        if beta <= 0:
            raise InvalidInput("beta must be positive")
        self._dirs = directions
        self._beta = float(beta)
        n_classes, d = directions.shape
        # trailing zero row scores the none-of-the-above candidate
        self._matrix = np.vstack([directions, np.zeros(d)])
        self._query = directions.sum(axis=0)
        self._query /= np.linalg.norm(self._query)
        self._caps = OracleCapabilities(vocab_size=n_classes + 1, embed_dim=d)
        self.model_id = f"analytic-c{n_classes}-d{d}-beta{self._beta:g}"

    @classmethod
    def for_classes(cls, n_classes: int, d: int, beta: float = 5.0) -> "AnalyticOracle":
        return cls(class_directions(n_classes, d), beta=beta)

    @property
    def capabilities(self) -> OracleCapabilities:
        return self._caps

    @property
    def pad_embedding(self) -> np.ndarray:
        return np.zeros(self._dirs.shape[1])

    @property
    def cls_embedding(self) -> np.ndarray:
        """Synthetic stand-in for a summary embedding: the mean class direction."""
        return self._query.copy()

    def class_id_of(self, class_idx: int) -> int:
        if not 0 <= class_idx < self._dirs.shape[0]:
            raise InvalidInput(f"no class {class_idx}")
        return class_idx

    def _forward(self, vis: VisualInput, prompt: PromptKind, prefix_ids):
        if vis.tokens.shape[1] != self._dirs.shape[1]:
            raise ShapeError(
                f"token dim {vis.tokens.shape[1]} vs oracle dim {self._dirs.shape[1]}"
            )
        pooled = vis.tokens.mean(axis=0)
        logits = self._beta * (self._matrix @ pooled)
        cos = cosine_similarity_matrix(vis.tokens, self._query[None, :])[:, 0]
        e = np.exp(cos - cos.max())
        attn = AttentionRecord((e / e.sum())[None, None, :])
        return logits, attn
