"""Scripted probe export and store validation.

The analysis side probes every visual token three ways: the token shown
to the model alone, the token blanked inside its clipped 3x3 window, and
that whole window blanked inside the full image. This module walks the
same script against a live backend and stores each response under the
exact key the consumer will ask with: one `single` per token, one
`region_src`/`region_ablate` pair per token, one `global_src` per image
and one `global_ablate` per distinct window. Responses keep their own
top-K ids; ablation records additionally carry their source's top ids so
the consumer's head-vocabulary restriction always finds its candidates.
"""
from __future__ import annotations

import logging
import math
import re
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ExportError
from .model import build_model
from .store import (
    FORMAT_VERSION,
    KIND_GLOBAL_ABLATE,
    KIND_GLOBAL_SRC,
    KIND_REGION_ABLATE,
    KIND_REGION_SRC,
    KIND_SINGLE,
    M_COVER,
    RequestLine,
    StoreWriter,
    is_valid_image_id,
    iter_request_lines,
    load_manifest,
    pairing_problems,
    top_ids,
)

log = logging.getLogger("rcbexport.export")

WINDOW = 3  # consumers ablate within the token's clipped 3x3 neighbourhood
K_FLOOR = 50  # consumers read top-1 probability over their 50 best ids

PROMPT_KINDS = ("single", "region", "image")
DEFAULT_PROMPTS = {
    "single": "name this patch with one word",
    "region": "describe this region in a single word",
    "image": "describe the image in a single word",
}


def window_indices(token_idx: int, grid: tuple[int, int], window: int = WINDOW) -> tuple[int, ...]:
    """Row-major indices of the window around a token, clipped at borders.

    Ascending and always containing token_idx itself, matching how the
    consumer identifies the same region.
    """
    rows, cols = int(grid[0]), int(grid[1])
    if not 0 <= token_idx < rows * cols:
        raise ExportError(f"token {token_idx} outside grid {rows}x{cols}")
    half = window // 2
    r, c = divmod(token_idx, cols)
    return tuple(
        rr * cols + cc
        for rr in range(max(0, r - half), min(rows, r + half + 1))
        for cc in range(max(0, c - half), min(cols, c + half + 1))
    )


def expected_request_keys(image_id: str, grid: tuple[int, int]) -> set[tuple]:
    """Every key the consumer's per-token probe script will ask for."""
    rows, cols = int(grid[0]), int(grid[1])
    keys = {(image_id, KIND_GLOBAL_SRC, None, None)}
    windows = set()
    for i in range(rows * cols):
        w = window_indices(i, (rows, cols))
        keys.add((image_id, KIND_SINGLE, i, None))
        keys.add((image_id, KIND_REGION_SRC, i, w))
        keys.add((image_id, KIND_REGION_ABLATE, i, w))
        windows.add(w)
    keys |= {(image_id, KIND_GLOBAL_ABLATE, None, w) for w in windows}
    return keys


def _single_input_rows(v: np.ndarray, reference_length: int, repeat: bool) -> np.ndarray:
    # mirrors consumer input assembly: backends that resist single-token
    # inputs get the token repeated to roughly one grid row's length
    if not repeat:
        return v[None, :]
    r = math.isqrt(reference_length)
    if r * r < reference_length:
        r += 1
    return np.tile(v, (r, 1))


def script_image_requests(
    model,
    image_id: str,
    tokens: np.ndarray,
    grid: tuple[int, int],
    prompts: dict[str, str],
    k_top: int,
) -> list[RequestLine]:
    """Run the full probe script for one image against the live backend."""
    rows, cols = int(grid[0]), int(grid[1])
    tokens = np.asarray(tokens, dtype=np.float64)
    L = rows * cols
    if tokens.ndim != 2 or tokens.shape[0] != L:
        raise ExportError(f"grid {rows}x{cols} does not cover token matrix {tokens.shape}")
    pad = model.pad_embedding

    raw: dict[tuple, tuple[np.ndarray, int, bool]] = {}
    order: list[tuple] = []

    def ask(key: tuple, input_rows: np.ndarray, prompt: str):
        raw[key] = model.first_step(input_rows, prompt)
        order.append(key)

    ask((image_id, KIND_GLOBAL_SRC, None, None), tokens, prompts["image"])
    seen_windows: set[tuple[int, ...]] = set()
    for i in range(L):
        w = window_indices(i, (rows, cols))
        idx = list(w)
        ask(
            (image_id, KIND_SINGLE, i, None),
            _single_input_rows(tokens[i], L, model.repeat_for_single_input),
            prompts["single"],
        )
        ask((image_id, KIND_REGION_SRC, i, w), tokens[idx], prompts["region"])
        ablated = tokens.copy()
        ablated[i] = pad
        ask((image_id, KIND_REGION_ABLATE, i, w), ablated[idx], prompts["region"])
        if w not in seen_windows:
            seen_windows.add(w)
            blanked = tokens.copy()
            blanked[idx] = pad
            ask((image_id, KIND_GLOBAL_ABLATE, None, w), blanked, prompts["image"])

    # truncation pass: rank on the float32-rounded values that will be
    # stored, keep each record's own top-k, then splice in the paired
    # source's head ids so divergence replay never misses a candidate
    V = model.vocab_size
    all_ids = np.arange(V, dtype=np.int64)
    rounded = {k: lg.astype(np.float32).astype(np.float64) for k, (lg, _, _) in raw.items()}
    lines = []
    for key in order:
        _, kind, target_idx, region = key
        _, step, skipped = raw[key]
        stored = rounded[key]
        keep = top_ids(all_ids, stored, min(k_top, V))
        if kind == KIND_REGION_ABLATE:
            src = rounded[(image_id, KIND_REGION_SRC, target_idx, region)]
        elif kind == KIND_GLOBAL_ABLATE:
            src = rounded[(image_id, KIND_GLOBAL_SRC, None, None)]
        else:
            src = None
        if src is not None:
            present = set(keep)
            keep.extend(i for i in top_ids(all_ids, src, min(M_COVER, V)) if i not in present)
        lines.append(
            RequestLine(
                image_id=image_id,
                kind=kind,
                target_idx=target_idx,
                region=region,
                step=step,
                article_skipped=skipped,
                candidate_ids=np.asarray(keep, dtype=np.int64),
                logits=stored[keep],
            )
        )
    return lines


@dataclass
class ExportJob:
    """One export run: which backend, which images, where to."""

    model_id: str
    images: Sequence[str | Path]
    out_dir: str | Path
    prompts: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROMPTS))
    k_top: int = K_FLOOR
    grid_side: int = 4  # grid used for byte-embedded (non .npy) images

    def __post_init__(self):
        if not str(self.model_id):
            raise ExportError("model_id must be non-empty")
        self.images = tuple(Path(p) for p in self.images)
        if not self.images:
            raise ExportError("an export job needs at least one image")
        if sorted(self.prompts) != sorted(PROMPT_KINDS):
            raise ExportError(f"prompts must cover exactly {PROMPT_KINDS}")
        if any(not str(p).strip() for p in self.prompts.values()):
            raise ExportError("prompt strings must be non-empty")
        # shallower stores would starve the consumer's top-1 readout
        if int(self.k_top) < K_FLOOR:
            raise ExportError(f"k_top must be >= {K_FLOOR}, got {self.k_top}")
        self.k_top = int(self.k_top)
        if int(self.grid_side) < 2:
            raise ExportError("grid_side must be >= 2")
        self.grid_side = int(self.grid_side)


def _image_id_for(path: Path, used: set[str]) -> str:
    stem = re.sub(r"[^A-Za-z0-9_.-]", "-", path.stem)
    if not stem.strip(".-"):
        stem = "img"
    candidate, n = stem, 2
    while candidate in used:
        candidate = f"{stem}-{n}"
        n += 1
    return candidate


def export_analysis_requests(job: ExportJob, model=None) -> Path:
    """Run the job and commit a replay store; returns the store root.

    Images that fail to load are logged and skipped; the manifest lists
    completed images only. A job where nothing completes raises and
    leaves the directory uncommitted, as does any backend failure.
    """
    if model is None:
        model = build_model(job.model_id)
    writer = StoreWriter(
        job.out_dir,
        model_id=model.model_id,
        d=model.d,
        vocab_size=model.vocab_size,
        article_ids=model.article_ids,
        repeat_for_single_input=model.repeat_for_single_input,
        uses_image_newline=model.uses_image_newline,
        pad=model.pad_embedding,
        extra_manifest={"exporter": {"k_top": job.k_top, "prompts": dict(job.prompts)}},
    )
    log.info("exporting %d images -> %s", len(job.images), job.out_dir)
    used: set[str] = set()
    skipped = 0
    try:
        for path in job.images:
            image_id = _image_id_for(path, used)
            try:
                tokens, grid = model.encode_image(path, job.grid_side)
            except (OSError, ValueError) as e:
                log.warning("skipping image %s: %s", path, e)
                skipped += 1
                continue
            lines = script_image_requests(model, image_id, tokens, grid, job.prompts, job.k_top)
            writer.add_image(image_id, tokens, grid, lines)
            used.add(image_id)
        root = writer.commit()
    finally:
        writer.close()
    log.info(
        "committed %d images, %d requests (%d images skipped)",
        len(used), writer.request_count, skipped,
    )
    return root


def _check_entry(root: Path, entry: dict, d: int, seen_ids: set[str], problems: list[str]):
    image_id = entry.get("image_id")
    if not is_valid_image_id(image_id):
        problems.append(f"manifest image id {image_id!r} is not filesystem-safe")
        return
    if image_id in seen_ids:
        problems.append(f"manifest lists image {image_id!r} twice")
        return
    seen_ids.add(image_id)
    L, grid = entry.get("L"), entry.get("grid")
    if not (isinstance(L, int) and L >= 1):
        problems.append(f"{image_id}: bad token count {L!r}")
        return
    if not (isinstance(grid, list) and len(grid) == 2 and grid[0] * grid[1] == L):
        problems.append(f"{image_id}: grid {grid!r} does not cover {L} tokens")
        return
    blob_path = root / image_id / "embeddings.bin"
    if not blob_path.is_file():
        problems.append(f"{image_id}: embeddings.bin missing")
        return
    blob = blob_path.read_bytes()
    if len(blob) != 4 * L * d:
        problems.append(f"{image_id}: embeddings.bin holds {len(blob)} bytes, expected {4 * L * d}")
        return
    if zlib.crc32(blob) != entry.get("crc32"):
        problems.append(f"{image_id}: embeddings.bin checksum mismatch")


def validate_store(root: str | Path) -> list[str]:
    """Re-read a store and lint it; returns problem strings, empty when clean.

    Checks the commit marker, manifest fields, blob sizes and checksums,
    request-line shape, duplicate keys, the source-coverage pairing rule
    and that every image's scripted request set is present in full.
    """
    root = Path(root)
    problems: list[str] = []
    try:
        manifest = load_manifest(root)
    except ExportError as e:
        return [str(e)]
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        return [f"format_version {version!r}, expected {FORMAT_VERSION}"]
    for name in ("model_id", "d", "vocab_size", "article_ids", "capabilities", "images", "pad_crc32"):
        if name not in manifest:
            problems.append(f"manifest missing field {name!r}")
    if problems:
        return problems
    d, vocab = manifest["d"], manifest["vocab_size"]
    if not (isinstance(d, int) and d >= 1 and isinstance(vocab, int) and vocab >= 1):
        return [f"manifest d={d!r} / vocab_size={vocab!r} are not positive integers"]
    articles = manifest["article_ids"]
    if (
        not isinstance(articles, list)
        or articles != sorted(set(articles))
        or any(not (isinstance(a, int) and 0 <= a < vocab) for a in articles)
    ):
        problems.append(f"article_ids {articles!r} must be sorted distinct ids within the vocabulary")
    caps = manifest["capabilities"]
    for flag in ("repeat_for_single_input", "uses_image_newline"):
        if not isinstance(caps.get(flag), bool):
            problems.append(f"capability {flag!r} missing or not a boolean")

    pad_path = root / "pad.bin"
    if not pad_path.is_file():
        problems.append("pad.bin missing")
    else:
        raw = pad_path.read_bytes()
        if len(raw) != 4 * d:
            problems.append(f"pad.bin holds {len(raw)} bytes, expected {4 * d}")
        elif zlib.crc32(raw) != manifest["pad_crc32"]:
            problems.append("pad.bin checksum mismatch")

    seen_ids: set[str] = set()
    length_of: dict[str, int] = {}
    grid_of: dict[str, tuple[int, int]] = {}
    for entry in manifest["images"]:
        _check_entry(root, entry, d, seen_ids, problems)
        if isinstance(entry.get("image_id"), str) and isinstance(entry.get("L"), int):
            length_of[entry["image_id"]] = entry["L"]
            g = entry.get("grid")
            if isinstance(g, list) and len(g) == 2:
                grid_of[entry["image_id"]] = (g[0], g[1])

    min_keep = None
    exporter_meta = manifest.get("exporter")
    if isinstance(exporter_meta, dict) and isinstance(exporter_meta.get("k_top"), int):
        min_keep = min(exporter_meta["k_top"], vocab)

    by_image: dict[str, list[RequestLine]] = {}
    keys_seen: set[tuple] = set()
    try:
        for ln, payload in iter_request_lines(root):
            try:
                line = RequestLine.from_json_dict(payload)
            except (ExportError, KeyError, TypeError, ValueError) as e:
                problems.append(f"requests.jsonl line {ln}: {e}")
                continue
            if line.key in keys_seen:
                problems.append(f"duplicate request record for {line.key}")
                continue
            keys_seen.add(line.key)
            if line.image_id not in length_of:
                problems.append(f"line {ln}: record for unlisted image {line.image_id!r}")
                continue
            problems.extend(_line_shape_problems(line, length_of[line.image_id], vocab, min_keep))
            by_image.setdefault(line.image_id, []).append(line)
    except ExportError as e:
        problems.append(str(e))
        return problems

    for _, lines in sorted(by_image.items()):
        problems.extend(pairing_problems(lines))
    for image_id in sorted(length_of):
        expected = expected_request_keys(image_id, grid_of[image_id])
        present = {line.key for line in by_image.get(image_id, [])}
        missing = expected - present
        extra = present - expected
        if missing:
            problems.append(
                f"{image_id}: {len(missing)} scripted requests missing, e.g. {min(missing, key=repr)}"
            )
        if extra:
            problems.append(
                f"{image_id}: {len(extra)} records outside the scripted set, e.g. {min(extra, key=repr)}"
            )
    return problems


def _line_shape_problems(line: RequestLine, L: int, vocab: int, min_keep: int | None) -> list[str]:
    problems = []
    ids = line.candidate_ids
    if np.any(ids < 0) or np.any(ids >= vocab):
        problems.append(f"{line.key}: candidate ids outside vocabulary of {vocab}")
    if min_keep is not None and len(ids) < min_keep:
        problems.append(f"{line.key}: only {len(ids)} candidates stored, job promised {min_keep}")
    needs_target = line.kind in (KIND_SINGLE, KIND_REGION_SRC, KIND_REGION_ABLATE)
    if needs_target != (line.target_idx is not None):
        problems.append(f"{line.key}: target index must be set exactly for single/region records")
    elif needs_target and not 0 <= line.target_idx < L:
        problems.append(f"{line.key}: target {line.target_idx} outside image of {L} tokens")
    needs_region = line.kind in (KIND_REGION_SRC, KIND_REGION_ABLATE, KIND_GLOBAL_ABLATE)
    if needs_region != (line.region is not None):
        problems.append(f"{line.key}: region must be set exactly for region/global_ablate records")
    elif needs_region:
        r = line.region
        if len(r) == 0 or list(r) != sorted(set(r)) or r[0] < 0 or r[-1] >= L:
            problems.append(f"{line.key}: region must be sorted distinct indices within the image")
        elif line.target_idx is not None and line.target_idx not in r:
            problems.append(f"{line.key}: region does not contain its target token")
    return problems
