"""Replay-store writer and low-level readers.

Layout of a store directory:

    manifest.json             -- written last; its presence commits the store
    pad.bin                   -- d float32, little endian
    requests.jsonl            -- one recorded model query per line
    <image_id>/embeddings.bin -- L x d float32, little endian, row major

The manifest carries format_version, model_id, d, vocab_size, sorted
article_ids, the capability flags consumers need to rebuild inputs, one
entry per image (image_id, L, grid, crc32 of the blob) and pad_crc32.
Logits are float32-rounded before writing so a replayed value matches
the live one exactly at float32 resolution. Consumers ignore request
lines for images the manifest does not list, which is why a failed
image can simply be dropped: nothing already on disk needs rewriting.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ExportError

FORMAT_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

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

# consumers restrict their divergence math to the source's 20 best ids,
# so every ablation record must keep carrying those ids
M_COVER = 20


def top_ids(candidate_ids, values, m: int) -> list[int]:
    """Ids of the m highest values, ranked descending, ties to the lower id."""
    ids = np.asarray(candidate_ids, dtype=np.int64)
    vals = np.asarray(values, dtype=np.float64)
    order = np.lexsort((ids, -vals))
    return [int(ids[i]) for i in order[:m]]


@dataclass
class RequestLine:
    """One recorded model query and its truncated response."""

    image_id: str
    kind: str
    target_idx: int | None
    region: tuple[int, ...] | None
    step: int
    article_skipped: bool
    candidate_ids: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        if self.kind not in REQUEST_KINDS:
            raise ExportError(f"unknown request kind {self.kind!r}")
        if self.region is not None:
            self.region = tuple(int(i) for i in self.region)
        if self.target_idx is not None:
            self.target_idx = int(self.target_idx)
        self.candidate_ids = np.asarray(self.candidate_ids, dtype=np.int64)
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.candidate_ids.ndim != 1 or self.candidate_ids.shape != self.logits.shape:
            raise ExportError("candidate_ids and logits must be equal-length vectors")
        if len(self.candidate_ids) < 1:
            raise ExportError("a request line needs at least one candidate")
        if len(set(self.candidate_ids.tolist())) != len(self.candidate_ids):
            raise ExportError("candidate ids must be distinct")
        if not np.all(np.isfinite(self.logits)):
            raise ExportError("logits must be finite")
        if self.step not in (1, 2):
            raise ExportError(f"step must be 1 or 2, got {self.step}")
        if self.article_skipped != (self.step == 2):
            raise ExportError("article_skipped is true exactly when step is 2")

    @property
    def key(self) -> tuple:
        return (self.image_id, self.kind, self.target_idx, self.region)

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "kind": self.kind,
            "target_idx": self.target_idx,
            "region": list(self.region) if self.region is not None else None,
            "step": self.step,
            "article_skipped": self.article_skipped,
            "candidate_ids": [int(i) for i in self.candidate_ids],
            "logits": [float(np.float32(v)) for v in self.logits],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RequestLine":
        return cls(
            image_id=d["image_id"],
            kind=d["kind"],
            target_idx=d["target_idx"],
            region=tuple(d["region"]) if d.get("region") is not None else None,
            step=int(d["step"]),
            article_skipped=bool(d["article_skipped"]),
            candidate_ids=np.asarray(d["candidate_ids"], dtype=np.int64),
            logits=np.asarray(d["logits"], dtype=np.float64),
        )


def pairing_problems(lines: list[RequestLine]) -> list[str]:
    """Violations of the source-coverage rule within one image's lines.

    Every *_ablate line must have its paired *_src line present and must
    carry that source's top-M_COVER candidate ids, ranked on the stored
    float32 values exactly as a consumer will rank them.
    """
    by_key = {ln.key: ln for ln in lines}
    problems = []
    for ln in lines:
        if not ln.kind.endswith("_ablate"):
            continue
        if ln.kind == KIND_REGION_ABLATE:
            src_key = (ln.image_id, KIND_REGION_SRC, ln.target_idx, ln.region)
        else:
            src_key = (ln.image_id, KIND_GLOBAL_SRC, None, None)
        src = by_key.get(src_key)
        if src is None:
            problems.append(f"{ln.key}: paired source record {src_key} is missing")
            continue
        stored = np.asarray(src.logits, dtype=np.float32).astype(np.float64)
        head = top_ids(src.candidate_ids, stored, min(M_COVER, len(src.candidate_ids)))
        missing = sorted(set(head) - set(int(i) for i in ln.candidate_ids))
        if missing:
            problems.append(f"{ln.key}: does not cover source head ids {missing}")
    return problems


class StoreWriter:
    """Accumulates one export session and commits it manifest-last.

    Per-image payloads land on disk as soon as the image completes; the
    manifest is withheld until commit() so an interrupted or failed run
    leaves a directory no consumer will accept as a store.
    """

    def __init__(
        self,
        root: str | Path,
        *,
        model_id: str,
        d: int,
        vocab_size: int,
        article_ids,
        repeat_for_single_input: bool,
        uses_image_newline: bool,
        pad: np.ndarray,
        extra_manifest: dict | None = None,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        if (self.root / "manifest.json").exists():
            raise ExportError(f"{self.root} already holds a committed store")
        self.d = int(d)
        pad32 = np.asarray(pad, dtype="<f4")
        if pad32.shape != (self.d,):
            raise ExportError(f"pad embedding must have shape ({self.d},)")
        (self.root / "pad.bin").write_bytes(pad32.tobytes())
        self._meta = {
            "format_version": FORMAT_VERSION,
            "model_id": str(model_id),
            "d": self.d,
            "vocab_size": int(vocab_size),
            "article_ids": sorted(int(i) for i in article_ids),
            "capabilities": {
                "repeat_for_single_input": bool(repeat_for_single_input),
                "uses_image_newline": bool(uses_image_newline),
            },
            "pad_crc32": zlib.crc32(pad32.tobytes()),
        }
        self._extra = dict(extra_manifest) if extra_manifest else {}
        self._entries: list[dict] = []
        self._keys: set[tuple] = set()
        self._fh = open(self.root / "requests.jsonl", "w")

    def add_image(self, image_id: str, tokens: np.ndarray, grid: tuple[int, int], lines: list[RequestLine]):
        """Write one completed image: embeddings blob plus its request lines."""
        if self._fh.closed:
            raise ExportError("writer is already closed")
        if not _ID_RE.match(image_id):
            raise ExportError(f"image id {image_id!r} is not filesystem-safe")
        if any(e["image_id"] == image_id for e in self._entries):
            raise ExportError(f"image id {image_id!r} written twice")
        tokens = np.asarray(tokens, dtype=np.float64)
        rows, cols = int(grid[0]), int(grid[1])
        if tokens.ndim != 2 or tokens.shape != (rows * cols, self.d):
            raise ExportError(f"grid {rows}x{cols} does not cover token matrix {tokens.shape}")
        if not np.all(np.isfinite(tokens)):
            raise ExportError(f"image {image_id!r} has non-finite embeddings")
        problems = pairing_problems(lines)
        batch_keys: set[tuple] = set()
        for ln in lines:
            if ln.image_id != image_id:
                problems.append(f"{ln.key}: wrong image, batch is for {image_id!r}")
            elif ln.key in self._keys or ln.key in batch_keys:
                problems.append(f"duplicate request record for {ln.key}")
            else:
                batch_keys.add(ln.key)
        if problems:
            raise ExportError(f"refusing to write image {image_id!r}: " + "; ".join(problems))

        blob = np.ascontiguousarray(tokens, dtype="<f4").tobytes()
        img_dir = self.root / image_id
        img_dir.mkdir(exist_ok=True)
        (img_dir / "embeddings.bin").write_bytes(blob)
        for ln in lines:
            self._fh.write(json.dumps(ln.to_json_dict()) + "\n")
            self._keys.add(ln.key)
        self._fh.flush()
        self._entries.append(
            {
                "image_id": image_id,
                "L": rows * cols,
                "grid": [rows, cols],
                "crc32": zlib.crc32(blob),
            }
        )

    @property
    def request_count(self) -> int:
        return len(self._keys)

    def commit(self) -> Path:
        """Write the manifest, turning the directory into a valid store."""
        self.close()
        if not self._entries:
            raise ExportError("no image completed; store left uncommitted")
        manifest = dict(self._meta)
        manifest["images"] = self._entries
        manifest.update(self._extra)
        with open(self.root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
        return self.root

    def close(self):
        if not self._fh.closed:
            self._fh.close()


def load_manifest(root: str | Path) -> dict:
    """Parse a committed store's manifest; ExportError when absent or broken."""
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise ExportError(f"no manifest at {path}: store is uncommitted or was interrupted")
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ExportError(f"unreadable manifest at {path}: {e}") from e
    return manifest


def iter_request_lines(root: str | Path):
    """Yield (line_number, parsed dict) for every non-blank request line."""
    path = Path(root) / "requests.jsonl"
    if not path.is_file():
        raise ExportError(f"store at {root} records no requests")
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            yield ln, json.loads(line)
        except json.JSONDecodeError as e:
            raise ExportError(f"requests.jsonl line {ln}: {e}") from e


def is_valid_image_id(image_id) -> bool:
    return isinstance(image_id, str) and bool(_ID_RE.match(image_id))
