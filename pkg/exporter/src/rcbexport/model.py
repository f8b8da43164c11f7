"""Deterministic stand-in model backend.

A real deployment wires a multimodal checkpoint behind this interface.
For development and tests this module supplies the smallest backend that
exercises every path the exporter has: a fixed caption vocabulary whose
article words trigger the skip-and-requery rule, logits that respond to
the visual input and to the prompt wording, and byte-seeded image
encoding so the same file always embeds to the same token grid.
"""
from __future__ import annotations

import logging
import math
import zlib
from pathlib import Path

import numpy as np

from .errors import ExportError

log = logging.getLogger("rcbexport.model")

# 64 caption words; ids are positions. The three articles sit up front so
# their ids are stable whatever else gets appended later.
WORDS = (
    "a", "an", "the", "one", "two", "three", "red", "blue", "green",
    "yellow", "black", "white", "gray", "bright", "dark", "small",
    "large", "tiny", "huge", "square", "circle", "triangle", "stripe",
    "dot", "grid", "line", "edge", "corner", "center", "left", "right",
    "top", "bottom", "sky", "wall", "floor", "field", "road", "tree",
    "house", "car", "dog", "cat", "bird", "person", "table", "chair",
    "window", "door", "light", "shadow", "water", "cloud", "texture",
    "pattern", "smooth", "rough", "empty", "blank", "noise", "blur",
    "photo", "image", "scene",
)
ARTICLE_WORDS = ("a", "an", "the")


class StubCaptioner:
    """Tiny linear readout over mean-pooled visual embeddings.

    Logits are a seeded random projection of the pooled input sequence
    plus a per-prompt bias, so different inputs and different prompt
    wordings give different distributions while everything stays
    bit-reproducible. A decoded prefix token feeds its word embedding
    back into the pool, which is what makes the second decoding step
    differ from the first after an article skip.
    """

    uses_image_newline = False  # the stub has no line-break marker concept

    def __init__(
        self,
        d: int = 32,
        seed: int = 0,
        article_boost: float = 2.5,
        repeat_for_single_input: bool = False,
    ):
        if d < 1:
            raise ExportError(f"embedding dim must be >= 1, got {d}")
        if not math.isfinite(article_boost) or article_boost < 0:
            raise ExportError("article_boost must be finite and >= 0")
        self.d = int(d)
        self.seed = int(seed)
        self.article_boost = float(article_boost)
        self.repeat_for_single_input = bool(repeat_for_single_input)
        self.vocab_size = len(WORDS)
        self.article_ids = tuple(sorted(WORDS.index(w) for w in ARTICLE_WORDS))

        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0xCA)))
        self.readout = rng.normal(size=(self.vocab_size, self.d)) / np.sqrt(self.d)
        self.word_embeddings = rng.normal(size=(self.vocab_size, self.d)) / np.sqrt(self.d)
        # nonzero pad: ablations must actually move the pooled input
        self.pad_embedding = 0.05 * rng.normal(size=self.d)
        self._prompt_bias: dict[str, np.ndarray] = {}

    @property
    def model_id(self) -> str:
        return (
            f"stub:d={self.d},seed={self.seed},"
            f"boost={self.article_boost:g},repeat={int(self.repeat_for_single_input)}"
        )

    def prompt_bias(self, prompt: str) -> np.ndarray:
        """Per-prompt logit offset, crc-seeded so it survives restarts."""
        cached = self._prompt_bias.get(prompt)
        if cached is None:
            tag = zlib.crc32(prompt.encode("utf-8"))
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, tag)))
            cached = 0.5 * rng.normal(size=self.vocab_size)
            self._prompt_bias[prompt] = cached
        return cached

    def logits(self, rows: np.ndarray, prompt: str, prefix_ids: tuple[int, ...] = ()) -> np.ndarray:
        """Full-vocabulary next-token logits after the given visual rows."""
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape != (rows.shape[0], self.d) or rows.shape[0] < 1:
            raise ExportError(f"expected a non-empty n x {self.d} input, got {rows.shape}")
        if not np.all(np.isfinite(rows)):
            raise ExportError("visual input must be finite")
        seq = [rows]
        for t in prefix_ids:
            seq.append(self.word_embeddings[int(t)][None, :])
        pooled = np.vstack(seq).mean(axis=0)
        out = 4.0 * self.readout @ pooled + self.prompt_bias(prompt)
        out[list(self.article_ids)] += self.article_boost
        return out

    def first_step(self, rows: np.ndarray, prompt: str) -> tuple[np.ndarray, int, bool]:
        """Logits of the first contentful decoding step.

        When the step-1 argmax (ties to the lower id) is an article, that
        token is greedily appended and the step-2 logits are returned
        with the skip flagged. At most one skip is ever taken; consumers
        trust the recorded flag rather than re-deciding.
        """
        lg = self.logits(rows, prompt)
        top = int(np.argmax(lg))
        if top in self.article_ids:
            return self.logits(rows, prompt, (top,)), 2, True
        return lg, 1, False

    def encode_image(self, path: str | Path, grid_side: int) -> tuple[np.ndarray, tuple[int, int]]:
        """Token grid for one image file.

        ``.npy`` files are taken as prepared embeddings, either (g, g, d)
        or a square-number (L, d); any other file is embedded from its
        raw bytes through a crc-seeded draw on a grid_side x grid_side
        grid, so any file on disk can act as an image. Tokens are
        quantized to float32 up front: recorded logits then match what a
        rerun on the stored blobs would produce.
        """
        path = Path(path)
        if path.suffix == ".npy":
            arr = np.asarray(np.load(path, allow_pickle=False), dtype=np.float64)
            if arr.ndim == 3 and arr.shape[0] == arr.shape[1] >= 1 and arr.shape[2] == self.d:
                g = arr.shape[0]
                tokens = arr.reshape(g * g, self.d)
            elif (
                arr.ndim == 2
                and arr.shape[0] >= 1
                and arr.shape[1] == self.d
                and math.isqrt(arr.shape[0]) ** 2 == arr.shape[0]
            ):
                g = math.isqrt(arr.shape[0])
                tokens = arr
            else:
                raise ValueError(
                    f"{path}: expected (g, g, {self.d}) or square (L, {self.d}), got {arr.shape}"
                )
            if not np.all(np.isfinite(tokens)):
                raise ValueError(f"{path}: embeddings must be finite")
        else:
            raw = path.read_bytes()
            rng = np.random.default_rng(np.random.SeedSequence((zlib.crc32(raw), len(raw))))
            g = int(grid_side)
            tokens = rng.normal(size=(g * g, self.d))
        tokens = np.asarray(tokens, dtype="<f4").astype(np.float64)
        return tokens, (g, g)


def build_model(model_id: str) -> StubCaptioner:
    """Resolve a model identifier like ``stub:d=32,seed=1`` into a backend.

    The canonical form round-trips: ``build_model(m.model_id)`` rebuilds
    an identical model. Unknown backends or malformed options fail the
    job before anything touches disk.
    """
    head, _, rest = model_id.partition(":")
    if head != "stub":
        raise ExportError(f"no backend available for model {model_id!r}")
    kwargs: dict = {}
    fields = {"d": int, "seed": int, "boost": float, "repeat": int}
    for part in filter(None, rest.split(",")):
        name, eq, value = part.partition("=")
        if not eq or name not in fields:
            raise ExportError(f"bad model option {part!r} in {model_id!r}")
        try:
            kwargs[name] = fields[name](value)
        except ValueError as e:
            raise ExportError(f"bad model option {part!r} in {model_id!r}: {e}") from e
    if "repeat" in kwargs and kwargs["repeat"] not in (0, 1):
        raise ExportError("model option repeat must be 0 or 1")
    return StubCaptioner(
        d=kwargs.get("d", 32),
        seed=kwargs.get("seed", 0),
        article_boost=kwargs.get("boost", 2.5),
        repeat_for_single_input=bool(kwargs.get("repeat", 0)),
    )
