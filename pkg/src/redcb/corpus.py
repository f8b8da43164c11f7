"""Synthetic grid-world corpus with known per-token ground truth.

Each image is a G x G grid of d-dimensional tokens: background cells sit
near one unit direction orthogonal to every class direction, and 1 to 3
axis-aligned rectangles of distinct classes sit near their class
directions. Labels record exactly which is which, so selection precision
and pruning recall have ground truth to check against.
"""
from __future__ import annotations

import numpy as np

from .errors import InvalidInput
from .oracle.analytic import background_direction, class_directions
from .wire import CorpusImage, load_images, read_manifest, write_labels, write_store

BACKGROUND_LABEL = "B"


def object_label(class_idx: int) -> str:
    return f"O:{class_idx}"


def parse_label(label: str) -> int | None:
    """Class index for an object label, None for background."""
    if label == BACKGROUND_LABEL:
        return None
    if label.startswith("O:"):
        return int(label[2:])
    raise InvalidInput(f"unknown label {label!r}")


def generate_corpus(
    n_images: int,
    grid: int = 8,
    n_classes: int = 4,
    seed: int = 0,
    d: int = 32,
    sigma_obj: float = 0.05,
    sigma_bg: float = 0.01,
) -> list[CorpusImage]:
    """Deterministically generate `n_images` labeled grid images.

    Every image derives its own PCG64 stream from (seed, image index), so
    corpora are reproducible token for token across runs and platforms,
    and image i does not change when n_images grows.
    """
    if grid < 3:
        raise InvalidInput(f"grid must be >= 3, got {grid}")
    if not 1 <= n_classes <= d - 2:
        raise InvalidInput(f"need 1 <= n_classes <= d-2, got {n_classes} with d={d}")
    if n_images < 1:
        raise InvalidInput("n_images must be >= 1")
    dirs = class_directions(n_classes, d)
    bg = background_direction(n_classes, d)
    images = []
    for i in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence((seed, i)))
        tokens = bg[None, :] + rng.normal(0.0, sigma_bg, size=(grid * grid, d))
        labels = [BACKGROUND_LABEL] * (grid * grid)
        # rectangles carry distinct classes, so few classes cap the count
        n_rects = min(int(rng.integers(1, 4)), n_classes)
        classes = rng.choice(n_classes, size=n_rects, replace=False)
        for r_i, cls in enumerate(classes):
            # the first rectangle is larger so every image has a clear subject
            lo, hi = (2, 4) if r_i == 0 else (1, 3)
            h, w = int(rng.integers(lo, hi)), int(rng.integers(lo, hi))
            r0 = int(rng.integers(0, grid - h + 1))
            c0 = int(rng.integers(0, grid - w + 1))
            for r in range(r0, r0 + h):
                for c in range(c0, c0 + w):
                    idx = r * grid + c
                    tokens[idx] = dirs[cls] + rng.normal(0.0, sigma_obj, size=d)
                    labels[idx] = object_label(int(cls))
        images.append(CorpusImage(f"img{i:04d}", tokens, (grid, grid), labels=labels))
    return images


def planted_majority_class(labels: list[str]) -> int | None:
    """Most frequent planted class, ties to the lower class index."""
    counts: dict[int, int] = {}
    for lab in labels:
        cls = parse_label(lab)
        if cls is not None:
            counts[cls] = counts.get(cls, 0) + 1
    if not counts:
        return None
    best = max(counts.values())
    return min(c for c, n in counts.items() if n == best)


def save_corpus(
    out_dir,
    images: list[CorpusImage],
    n_classes: int,
    d: int,
    generator_meta: dict | None = None,
):
    """Persist a corpus in the wire format's embeddings layout plus labels.jsonl."""
    root = write_store(
        out_dir,
        model_id="synthcorpus",
        d=d,
        vocab_size=n_classes + 1,
        article_ids=(),
        repeat_for_single_input=False,
        uses_image_newline=False,
        images=images,
        pad=np.zeros(d),
        requests=None,
        extra_manifest={"generator": generator_meta} if generator_meta else None,
    )
    write_labels(root, images)
    return root


def load_corpus(root) -> tuple[list[CorpusImage], dict]:
    manifest = read_manifest(root)
    return load_images(root, manifest), manifest
