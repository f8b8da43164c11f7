"""On-disk record/replay store.

Layout of a store directory:

    manifest.json            -- written last; its presence commits the store
    pad.bin                  -- d float32, little endian
    requests.jsonl           -- one recorded oracle query per line (optional)
    <image_id>/embeddings.bin -- L x d float32, little endian, row major

The manifest carries format_version, model_id, d, vocab_size, article_ids,
capabilities and one entry per image (image_id, L, grid, crc32 of the blob).
Records for image ids the manifest does not list are ignored on load: an
interrupted writer leaves no manifest and the store simply does not exist
yet. Logits in requests.jsonl are float32-rounded before writing so a
replayed value matches the live value to float32 precision.
"""
from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptStoreError, InvalidInput, UnsupportedVersion
from .oracle.base import RequestKey

FORMAT_VERSION = 1
_ID_RE = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass
class CorpusImage:
    """One image's token matrix plus layout and optional ground truth."""

    image_id: str
    tokens: np.ndarray  # (L, d)
    grid: tuple[int, int]
    labels: list[str] | None = None

    def __post_init__(self):
        if not _ID_RE.match(self.image_id):
            raise InvalidInput(f"image id {self.image_id!r} is not filesystem-safe")
        self.tokens = np.asarray(self.tokens)
        if self.tokens.ndim != 2:
            raise InvalidInput("tokens must be an L x d matrix")
        rows, cols = self.grid
        self.grid = (int(rows), int(cols))
        if rows * cols != self.tokens.shape[0]:
            raise InvalidInput(
                f"grid {rows}x{cols} does not cover {self.tokens.shape[0]} tokens"
            )
        if self.labels is not None and len(self.labels) != self.tokens.shape[0]:
            raise InvalidInput("one label per token required")

    @property
    def length(self) -> int:
        return int(self.tokens.shape[0])


@dataclass
class RequestRecord:
    """One recorded oracle query and its response."""

    key: RequestKey
    step: int
    article_skipped: bool
    candidate_ids: np.ndarray
    logits: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.key.image_id,
            "kind": self.key.kind,
            "target_idx": self.key.target_idx,
            "region": list(self.key.region) if self.key.region is not None else None,
            "step": self.step,
            "article_skipped": self.article_skipped,
            "candidate_ids": [int(i) for i in self.candidate_ids],
            "logits": [float(np.float32(v)) for v in self.logits],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "RequestRecord":
        key = RequestKey(
            image_id=d["image_id"],
            kind=d["kind"],
            target_idx=d["target_idx"],
            region=tuple(d["region"]) if d.get("region") is not None else None,
        )
        return cls(
            key=key,
            step=int(d["step"]),
            article_skipped=bool(d["article_skipped"]),
            candidate_ids=np.asarray(d["candidate_ids"], dtype=np.int64),
            logits=np.asarray(d["logits"], dtype=np.float64),
        )


def _require(cond: bool, msg: str):
    if not cond:
        raise CorruptStoreError(msg)


def write_store(
    root: str | Path,
    *,
    model_id: str,
    d: int,
    vocab_size: int,
    article_ids,
    repeat_for_single_input: bool,
    uses_image_newline: bool,
    images: list[CorpusImage],
    pad: np.ndarray,
    requests: list[RequestRecord] | None = None,
    extra_manifest: dict | None = None,
) -> Path:
    """Write a complete store; the manifest lands last as the commit marker."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pad32 = np.asarray(pad, dtype="<f4")
    if pad32.shape != (d,):
        raise InvalidInput(f"pad embedding must have shape ({d},)")
    (root / "pad.bin").write_bytes(pad32.tobytes())

    entries = []
    for img in images:
        blob = np.ascontiguousarray(img.tokens, dtype="<f4").tobytes()
        img_dir = root / img.image_id
        img_dir.mkdir(exist_ok=True)
        (img_dir / "embeddings.bin").write_bytes(blob)
        entries.append(
            {
                "image_id": img.image_id,
                "L": img.length,
                "grid": [img.grid[0], img.grid[1]],
                "crc32": zlib.crc32(blob),
            }
        )

    if requests is not None:
        with open(root / "requests.jsonl", "w") as fh:
            for rec in requests:
                fh.write(json.dumps(rec.to_json_dict()) + "\n")

    manifest = {
        "format_version": FORMAT_VERSION,
        "model_id": model_id,
        "d": int(d),
        "vocab_size": int(vocab_size),
        "article_ids": sorted(int(i) for i in article_ids),
        "capabilities": {
            "repeat_for_single_input": bool(repeat_for_single_input),
            "uses_image_newline": bool(uses_image_newline),
        },
        "images": entries,
        "pad_crc32": zlib.crc32(pad32.tobytes()),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return root


def read_manifest(root: str | Path) -> dict:
    root = Path(root)
    path = root / "manifest.json"
    if not path.is_file():
        raise CorruptStoreError(f"no manifest at {path}: store absent or uncommitted")
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptStoreError(f"unreadable manifest at {path}: {e}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"format_version {version!r}, expected {FORMAT_VERSION}")
    for field in ("model_id", "d", "vocab_size", "article_ids", "capabilities", "images"):
        _require(field in manifest, f"manifest missing field {field!r}")
    return manifest


def load_pad(root: str | Path, manifest: dict) -> np.ndarray:
    root = Path(root)
    path = root / "pad.bin"
    _require(path.is_file(), f"missing pad embedding {path}")
    raw = path.read_bytes()
    d = manifest["d"]
    _require(len(raw) == 4 * d, f"pad.bin holds {len(raw)} bytes, expected {4 * d}")
    if "pad_crc32" in manifest:
        _require(zlib.crc32(raw) == manifest["pad_crc32"], "pad.bin checksum mismatch")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def load_images(root: str | Path, manifest: dict) -> list[CorpusImage]:
    """Load every committed image's embeddings, verifying sizes and checksums."""
    root = Path(root)
    d = manifest["d"]
    labels_by_id = _load_labels(root)
    out = []
    for entry in manifest["images"]:
        image_id, length = entry["image_id"], entry["L"]
        path = root / image_id / "embeddings.bin"
        _require(path.is_file(), f"missing embeddings blob for {image_id}")
        raw = path.read_bytes()
        want = 4 * length * d
        _require(
            len(raw) == want,
            f"{path} holds {len(raw)} bytes, expected {want} (truncated?)",
        )
        if "crc32" in entry:
            _require(zlib.crc32(raw) == entry["crc32"], f"{path} checksum mismatch")
        tokens = np.frombuffer(raw, dtype="<f4").reshape(length, d)
        grid = (entry["grid"][0], entry["grid"][1])
        out.append(
            CorpusImage(image_id, tokens, grid, labels=labels_by_id.get(image_id))
        )
    return out


def _load_labels(root: Path) -> dict[str, list[str]]:
    path = root / "labels.jsonl"
    if not path.is_file():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        out[d["image_id"]] = list(d["labels"])
    return out


def write_labels(root: str | Path, images: list[CorpusImage]):
    with open(Path(root) / "labels.jsonl", "w") as fh:
        for img in images:
            if img.labels is None:
                continue
            fh.write(
                json.dumps({"image_id": img.image_id, "labels": img.labels}) + "\n"
            )


def load_requests(root: str | Path, manifest: dict) -> dict[RequestKey, RequestRecord]:
    """Parse requests.jsonl, keeping only records of manifest-committed images."""
    root = Path(root)
    path = root / "requests.jsonl"
    _require(path.is_file(), f"store at {root} records no requests")
    committed = {e["image_id"] for e in manifest["images"]}
    table: dict[RequestKey, RequestRecord] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = RequestRecord.from_json_dict(json.loads(line))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise CorruptStoreError(f"requests.jsonl line {ln}: {e}") from e
        if rec.key.image_id not in committed:
            continue
        if rec.key in table:
            raise CorruptStoreError(f"duplicate request record for {rec.key}")
        table[rec.key] = rec
    return table
