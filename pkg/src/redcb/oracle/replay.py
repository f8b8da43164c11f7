"""Record and replay oracles over the wire-format store.

A RecordingOracle wraps a live oracle and remembers every keyed query so
the session can be persisted. A ReplayOracle answers queries purely from
such a store; it never looks at the visual input, only at the request key,
which is why exported stores replace model access entirely.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..errors import ConsistencyError, InvalidInput, MissingRecordError
from ..numerics import SparseLogits, top_ranked_ids
from .. import wire
from .base import (
    KIND_GLOBAL_SRC,
    KIND_REGION_SRC,
    Oracle,
    OracleCapabilities,
    OracleResponse,
    PromptKind,
    RequestKey,
    VisualInput,
)


class ReplayStore:
    """Parsed store: manifest, pad embedding and the request table."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.manifest = wire.read_manifest(self.root)
        self.pad = wire.load_pad(self.root, self.manifest)
        self.requests = wire.load_requests(self.root, self.manifest)
        # every legal replay input row is either a row of the recorded
        # image or the pad vector, so membership at float32 resolution
        # catches queries against the wrong corpus
        self._rows = {
            img.image_id: {r.tobytes() for r in np.asarray(img.tokens, dtype="<f4")}
            for img in wire.load_images(self.root, self.manifest)
        }
        self._pad_bytes = np.asarray(self.pad, dtype="<f4").tobytes()

    def known_rows(self, image_id: str) -> set | None:
        return self._rows.get(image_id)

    def capabilities(self) -> OracleCapabilities:
        caps = self.manifest["capabilities"]
        return OracleCapabilities(
            repeat_for_single_input=caps["repeat_for_single_input"],
            uses_image_newline=caps["uses_image_newline"],
            article_ids=frozenset(self.manifest["article_ids"]),
            vocab_size=self.manifest["vocab_size"],
            embed_dim=self.manifest["d"],
        )


def replay_lookup(store: ReplayStore, key: RequestKey) -> OracleResponse:
    """Recorded response for `key`, or MissingRecordError naming the key."""
    rec = store.requests.get(key)
    if rec is None:
        raise MissingRecordError(f"no recorded response for {key}")
    return OracleResponse(
        SparseLogits(rec.candidate_ids, rec.logits),
        step=rec.step,
        article_skipped=rec.article_skipped,
    )


class ReplayOracle(Oracle):
    def __init__(self, store: ReplayStore):
        super().__init__()
        self.store = store
        self._caps = store.capabilities()
        self.model_id = store.manifest["model_id"]

    @classmethod
    def open(cls, root: str | Path) -> "ReplayOracle":
        return cls(ReplayStore(root))

    @property
    def capabilities(self) -> OracleCapabilities:
        return self._caps

    @property
    def pad_embedding(self) -> np.ndarray:
        return self.store.pad.copy()

    def _forward(self, vis, prompt, prefix_ids):  # pragma: no cover
        raise MissingRecordError("replay oracles only serve recorded requests")

    def first_step_logits(
        self,
        vis: VisualInput,
        prompt: PromptKind,
        key: RequestKey | None = None,
    ) -> OracleResponse:
        with self._count_lock:
            self._query_count += 1
        if key is None:
            raise MissingRecordError("replay oracle queried without a request key")
        rows = self.store.known_rows(key.image_id)
        if rows is not None:
            for i, row in enumerate(np.asarray(vis.tokens, dtype="<f4")):
                b = row.tobytes()
                if b not in rows and b != self.store._pad_bytes:
                    raise ConsistencyError(
                        f"input row {i} is not part of recorded image "
                        f"{key.image_id!r}; the store was built from a "
                        "different corpus"
                    )
        return replay_lookup(self.store, key)


class RecordingOracle(Oracle):
    """Delegates to a live oracle and remembers every keyed response."""

    def __init__(self, inner: Oracle):
        super().__init__()
        self.inner = inner
        self.model_id = inner.model_id
        self.recorded: dict[RequestKey, OracleResponse] = {}

    @property
    def capabilities(self) -> OracleCapabilities:
        return self.inner.capabilities

    @property
    def pad_embedding(self) -> np.ndarray:
        return self.inner.pad_embedding

    @property
    def cls_embedding(self) -> np.ndarray | None:
        return self.inner.cls_embedding

    def class_id_of(self, class_idx: int) -> int | None:
        return self.inner.class_id_of(class_idx)

    def _forward(self, vis, prompt, prefix_ids):  # pragma: no cover
        raise NotImplementedError("recording delegates whole queries")

    def first_step_logits(self, vis, prompt, key=None):
        if key is None:
            raise InvalidInput("recording a query requires a request key")
        with self._count_lock:
            self._query_count += 1
        resp = self.inner.first_step_logits(vis, prompt, key)
        self.recorded[key] = resp
        return resp


def _src_key_for(key: RequestKey) -> RequestKey:
    if key.kind == "region_ablate":
        return RequestKey(key.image_id, KIND_REGION_SRC, key.target_idx, key.region)
    return RequestKey(key.image_id, KIND_GLOBAL_SRC)


def build_request_records(
    recorded: dict[RequestKey, OracleResponse],
    k_top: int = 50,
    m_cover: int = 20,
) -> list[wire.RequestRecord]:
    """Truncate recorded responses for storage.

    Every record keeps its own top-k_top ids; ablation records additionally
    keep their source partner's top-m_cover ids so replayed head-vocabulary
    restriction always finds its candidates. Ranking happens on the
    float32-rounded values that will actually be stored.
    """
    rounded: dict[RequestKey, SparseLogits] = {}
    for key, resp in recorded.items():
        vals = resp.logits.values.astype(np.float32).astype(np.float64)
        rounded[key] = SparseLogits(resp.logits.candidate_ids, vals)

    records = []
    for key in sorted(
        recorded, key=lambda k: (k.image_id, k.kind, k.target_idx is None,
                                 k.target_idx or 0, k.region or ())
    ):
        lg = rounded[key]
        keep = list(top_ranked_ids(lg, min(k_top, len(lg))))
        if key.kind.endswith("_ablate"):
            src = rounded.get(_src_key_for(key))
            if src is None:
                raise InvalidInput(f"ablation {key} recorded without its source")
            head = top_ranked_ids(src, min(m_cover, len(src)))
            present = set(int(i) for i in keep)
            keep.extend(int(i) for i in head if int(i) not in present)
        pos = {int(i): j for j, i in enumerate(lg.candidate_ids)}
        idx = [pos[int(i)] for i in keep]
        records.append(
            wire.RequestRecord(
                key=key,
                step=recorded[key].step,
                article_skipped=recorded[key].article_skipped,
                candidate_ids=lg.candidate_ids[idx],
                logits=lg.values[idx],
            )
        )
    return records


def write_replay_store(
    out_dir: str | Path,
    recorder: RecordingOracle,
    images: list[wire.CorpusImage],
    k_top: int = 50,
    m_cover: int = 20,
) -> Path:
    """Persist a recording session as a committed replay store."""
    caps = recorder.capabilities
    return wire.write_store(
        out_dir,
        model_id=recorder.model_id,
        d=caps.embed_dim,
        vocab_size=caps.vocab_size,
        article_ids=sorted(caps.article_ids),
        repeat_for_single_input=caps.repeat_for_single_input,
        uses_image_newline=caps.uses_image_newline,
        images=images,
        pad=recorder.pad_embedding,
        requests=build_request_records(recorder.recorded, k_top=k_top, m_cover=m_cover),
    )
