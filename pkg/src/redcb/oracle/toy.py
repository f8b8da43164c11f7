"""Seeded toy transformer oracle.

A small causal transformer with deterministic weights: every matrix is
drawn from numpy's PCG64 generator at a fixed seed with scale 1/sqrt(d),
layer norms are parameter-free, and the input and output embeddings are
tied. Visual tokens enter the sequence as raw embedding rows; prompts are
fixed token-id sequences per prompt kind; newline markers use a dedicated
reserved embedding row.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidInput, ShapeError
from .base import (
    AttentionRecord,
    Oracle,
    OracleCapabilities,
    PromptKind,
    VisualInput,
)

# fixed prompt token ids, one short sequence per prompt kind
PROMPT_TOKEN_IDS = {
    PromptKind.DESCRIBE_SINGLE_TOKEN: (2, 3, 5, 7),
    PromptKind.DESCRIBE_REGION: (11, 13, 17, 19),
    PromptKind.DESCRIBE_IMAGE: (23, 29, 31, 37),
}
_MIN_VOCAB = 1 + max(max(ids) for ids in PROMPT_TOKEN_IDS.values())


@dataclass
class _LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    w1: np.ndarray
    w2: np.ndarray


@dataclass
class ToyWeights:
    embed: np.ndarray  # (vocab, d), tied with the output head
    pos: np.ndarray  # (max_len, d)
    newline: np.ndarray  # (d,)
    layers: list[_LayerWeights]
    n_heads: int

    @property
    def d_model(self) -> int:
        return self.embed.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def max_len(self) -> int:
        return self.pos.shape[0]


def init_toy_weights(
    seed: int = 0,
    d_model: int = 32,
    n_layers: int = 2,
    n_heads: int = 4,
    vocab_size: int = 64,
    max_len: int = 256,
) -> ToyWeights:
    if d_model % n_heads != 0:
        raise InvalidInput(f"d_model {d_model} not divisible by {n_heads} heads")
    if vocab_size < _MIN_VOCAB:
        raise InvalidInput(f"vocab_size must be >= {_MIN_VOCAB} to cover prompt ids")
    rng = np.random.default_rng(seed)
    scale = d_model**-0.5

    def mat(*shape):
        return rng.normal(0.0, scale, shape)

    layers = [
        _LayerWeights(
            wq=mat(d_model, d_model),
            wk=mat(d_model, d_model),
            wv=mat(d_model, d_model),
            wo=mat(d_model, d_model),
            w1=mat(d_model, 4 * d_model),
            w2=mat(4 * d_model, d_model),
        )
        for _ in range(n_layers)
    ]
    return ToyWeights(
        embed=mat(vocab_size, d_model),
        pos=mat(max_len, d_model),
        newline=mat(d_model),
        layers=layers,
        n_heads=n_heads,
    )


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5)


def toy_forward(w: ToyWeights, seq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Causal forward pass over a sequence of embedding rows.

    Returns the final position's full-vocabulary logits and its attention
    rows over every key position, shaped (n_layers, n_heads, T). Each row
    is a softmax over positions 0..T-1 and sums to 1.
    """
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim != 2 or seq.shape[1] != w.d_model:
        raise ShapeError(f"sequence must be T x {w.d_model}")
    t = seq.shape[0]
    if t > w.max_len:
        raise InvalidInput(f"sequence length {t} exceeds max_len {w.max_len}")
    h = seq + w.pos[:t]
    n_heads = w.n_heads
    head_dim = w.d_model // n_heads
    mask = np.triu(np.full((t, t), -np.inf), k=1)
    last_rows = np.empty((len(w.layers), n_heads, t))
    for li, lw in enumerate(w.layers):
        x = _layer_norm(h)
        q = (x @ lw.wq).reshape(t, n_heads, head_dim)
        k = (x @ lw.wk).reshape(t, n_heads, head_dim)
        v = (x @ lw.wv).reshape(t, n_heads, head_dim)
        scores = np.einsum("qhd,khd->hqk", q, k) / np.sqrt(head_dim)
        scores = scores + mask[None, :, :]
        scores -= scores.max(axis=2, keepdims=True)
        probs = np.exp(scores)
        probs /= probs.sum(axis=2, keepdims=True)
        last_rows[li] = probs[:, -1, :]
        ctx = np.einsum("hqk,khd->qhd", probs, v).reshape(t, w.d_model)
        h = h + ctx @ lw.wo
        x = _layer_norm(h)
        h = h + np.maximum(x @ lw.w1, 0.0) @ lw.w2
    logits = _layer_norm(h)[-1] @ w.embed.T
    return logits, last_rows


class ToyTransformerOracle(Oracle):
    """Oracle wrapper around the seeded toy transformer."""

    def __init__(
        self,
        seed: int = 0,
        d_model: int = 32,
        n_layers: int = 2,
        n_heads: int = 4,
        vocab_size: int = 64,
        max_len: int = 256,
        repeat_for_single_input: bool = False,
        uses_image_newline: bool = False,
        article_ids: frozenset[int] = frozenset(),
    ):
        super().__init__()
        self.weights = init_toy_weights(
            seed=seed,
            d_model=d_model,
            n_layers=n_layers,
            n_heads=n_heads,
            vocab_size=vocab_size,
            max_len=max_len,
        )
        self._caps = OracleCapabilities(
            repeat_for_single_input=repeat_for_single_input,
            uses_image_newline=uses_image_newline,
            article_ids=frozenset(article_ids),
            vocab_size=vocab_size,
            embed_dim=d_model,
        )
        self.model_id = (
            f"toy-l{n_layers}-h{n_heads}-d{d_model}-v{vocab_size}-s{seed}"
        )

    @property
    def capabilities(self) -> OracleCapabilities:
        return self._caps

    @property
    def pad_embedding(self) -> np.ndarray:
        return np.zeros(self.weights.d_model)

    def assemble(
        self, vis: VisualInput, prompt: PromptKind, prefix_ids: tuple[int, ...] = ()
    ) -> tuple[np.ndarray, np.ndarray]:
        """Build the embedding sequence; also return each visual token's position."""
        if vis.tokens.shape[1] != self.weights.d_model:
            raise ShapeError(
                f"token dim {vis.tokens.shape[1]} vs model dim {self.weights.d_model}"
            )
        rows: list[np.ndarray] = []
        visual_pos: list[int] = []
        newline_at = set(vis.newline_after)
        for i, tok in enumerate(vis.tokens):
            visual_pos.append(len(rows))
            rows.append(tok)
            if i in newline_at:
                rows.append(self.weights.newline)
        for tid in PROMPT_TOKEN_IDS[prompt] + tuple(prefix_ids):
            rows.append(self.weights.embed[tid])
        return np.vstack(rows), np.asarray(visual_pos, dtype=np.int64)

    def _forward(self, vis: VisualInput, prompt: PromptKind, prefix_ids):
        seq, visual_pos = self.assemble(vis, prompt, tuple(prefix_ids))
        logits, rows = toy_forward(self.weights, seq)
        return logits, AttentionRecord(rows[:, :, visual_pos])
