"""Per-token probing pipeline.

Two experiments per token: its probability mass when shown to the model
alone (single-token probe), and the shift it causes in the model's output
distribution when its neighborhood is blanked out, measured locally over
the 3x3 window and globally over the whole image (cascaded leave-one-out).
The per-image outlier context comes from density-peaks clustering of the
image's own tokens.
"""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .clustering import dpc_cluster
from .errors import InvalidInput, RedcbError
from .numerics import head_vocab_distributions, jsd, top1_probability
from .oracle.base import (
    KIND_GLOBAL_ABLATE,
    KIND_GLOBAL_SRC,
    KIND_REGION_ABLATE,
    KIND_REGION_SRC,
    KIND_SINGLE,
    Oracle,
    OracleResponse,
    PromptKind,
    RequestKey,
    build_single_token_input,
    grid_visual_input,
)
from .wire import CorpusImage

log = logging.getLogger("redcb.analysis")


@dataclass(frozen=True)
class AnalysisConfig:
    """Knobs of the probing pipeline.

    The cascade weights may be zero (switching an experiment off); the
    ranking depths and clustering parameters must be at least 1 and the
    ablation window must have an odd side.
    """

    m_top1: int = 50
    m_jsd: int = 20
    k_region: float = 1.0
    k_global: float = 16.0
    k_dpc_image: int = 16
    neighborhood: int = 3
    null_ablation: bool = False

    def __post_init__(self):
        if self.m_top1 < 1 or self.m_jsd < 1 or self.k_dpc_image < 1:
            raise InvalidInput("m_top1, m_jsd and k_dpc_image must be >= 1")
        if self.k_region < 0 or self.k_global < 0:
            raise InvalidInput("cascade weights must be >= 0")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise InvalidInput("neighborhood window side must be odd and >= 1")


@dataclass
class AnalysisRecord:
    """Everything the codebook builder needs to know about one token."""

    image_id: str
    token_idx: int
    p1: float
    cluster_size_img: int
    jsd_region: float
    jsd_global: float
    jsd_final: float
    clssim: float | None = None
    attn_score: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "token_idx": self.token_idx,
            "p1": self.p1,
            "cluster_size_img": self.cluster_size_img,
            "jsd_region": self.jsd_region,
            "jsd_global": self.jsd_global,
            "jsd_final": self.jsd_final,
            "clssim": self.clssim,
            "attn_score": self.attn_score,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "AnalysisRecord":
        return cls(
            image_id=d["image_id"],
            token_idx=int(d["token_idx"]),
            p1=float(d["p1"]),
            cluster_size_img=int(d["cluster_size_img"]),
            jsd_region=float(d["jsd_region"]),
            jsd_global=float(d["jsd_global"]),
            jsd_final=float(d["jsd_final"]),
            clssim=None if d.get("clssim") is None else float(d["clssim"]),
            attn_score=None if d.get("attn_score") is None else float(d["attn_score"]),
        )


def neighborhood_of(token_idx: int, grid: tuple[int, int], window: int = 3) -> np.ndarray:
    """Row-major indices of the window around a token, clipped at the borders.

    Interior tokens of a 3x3 window get 9 indices; a corner gets 4. The
    result is sorted ascending and always contains token_idx itself.
    """
    rows, cols = grid
    if not 0 <= token_idx < rows * cols:
        raise InvalidInput(f"token {token_idx} outside grid {rows}x{cols}")
    if window < 1 or window % 2 == 0:
        raise InvalidInput("window side must be odd and >= 1")
    half = window // 2
    r, c = divmod(token_idx, cols)
    out = []
    for rr in range(max(0, r - half), min(rows, r + half + 1)):
        for cc in range(max(0, c - half), min(cols, c + half + 1)):
            out.append(rr * cols + cc)
    return np.asarray(out, dtype=np.int64)


def _ablated(tokens: np.ndarray, idx, pad: np.ndarray, null_ablation: bool) -> np.ndarray:
    if null_ablation:
        return tokens
    out = tokens.copy()
    out[idx] = pad
    return out


def _pair_jsd(oracle: Oracle, src_resp: OracleResponse, abl_resp: OracleResponse, m_jsd: int) -> float:
    m_eff = min(m_jsd, len(src_resp.logits))
    m_dist, n_dist = head_vocab_distributions(src_resp.logits, abl_resp.logits, m_eff)
    return jsd(m_dist, n_dist)


def single_token_probe(
    oracle: Oracle,
    v: np.ndarray,
    cfg: AnalysisConfig,
    reference_length: int,
    key: RequestKey | None = None,
) -> float:
    """Top-1 probability of one token shown to the model in isolation."""
    vis = build_single_token_input(v, oracle.capabilities, reference_length)
    resp = oracle.first_step_logits(vis, PromptKind.DESCRIBE_SINGLE_TOKEN, key)
    return top1_probability(resp.logits, cfg.m_top1)


def region_leave_one_out(
    oracle: Oracle, image: CorpusImage, token_idx: int, cfg: AnalysisConfig
) -> float:
    """Distribution shift over the token's window when the token is blanked.

    Only the window's tokens are shown to the model; the ablation replaces
    the target row with the oracle's pad embedding.
    """
    region = neighborhood_of(token_idx, image.grid, cfg.neighborhood)
    use_nl = oracle.capabilities.uses_image_newline
    tokens = np.asarray(image.tokens, dtype=np.float64)
    src_vis = grid_visual_input(tokens, image.grid, use_nl, keep=region)
    abl_tokens = _ablated(tokens, token_idx, oracle.pad_embedding, cfg.null_ablation)
    abl_vis = grid_visual_input(abl_tokens, image.grid, use_nl, keep=region)
    rtuple = tuple(int(i) for i in region)
    src = oracle.first_step_logits(
        src_vis,
        PromptKind.DESCRIBE_REGION,
        RequestKey(image.image_id, KIND_REGION_SRC, token_idx, rtuple),
    )
    abl = oracle.first_step_logits(
        abl_vis,
        PromptKind.DESCRIBE_REGION,
        RequestKey(image.image_id, KIND_REGION_ABLATE, token_idx, rtuple),
    )
    return _pair_jsd(oracle, src, abl, cfg.m_jsd)


def global_leave_one_out(
    oracle: Oracle,
    image: CorpusImage,
    region,
    cfg: AnalysisConfig,
    cache: dict | None = None,
) -> float:
    """Distribution shift over the full image when a whole region is blanked.

    Pass one `cache` dict per image to memoize both the unablated source
    response and the value per distinct (sorted) region, so the number of
    ablation queries never exceeds the number of distinct regions.
    """
    rtuple = tuple(sorted(int(i) for i in np.asarray(region).ravel()))
    if len(rtuple) == 0:
        return 0.0
    if len(set(rtuple)) != len(rtuple):
        raise InvalidInput("region indices must be unique")
    L = image.length
    if rtuple[0] < 0 or rtuple[-1] >= L:
        raise InvalidInput(f"region {rtuple} outside image of {L} tokens")
    if cache is not None and rtuple in cache:
        return cache[rtuple]
    use_nl = oracle.capabilities.uses_image_newline
    tokens = np.asarray(image.tokens, dtype=np.float64)

    src = cache.get("__src__") if cache is not None else None
    if src is None:
        src = oracle.first_step_logits(
            grid_visual_input(tokens, image.grid, use_nl),
            PromptKind.DESCRIBE_IMAGE,
            RequestKey(image.image_id, KIND_GLOBAL_SRC),
        )
        if cache is not None:
            cache["__src__"] = src

    abl_tokens = _ablated(tokens, list(rtuple), oracle.pad_embedding, cfg.null_ablation)
    abl = oracle.first_step_logits(
        grid_visual_input(abl_tokens, image.grid, use_nl),
        PromptKind.DESCRIBE_IMAGE,
        RequestKey(image.image_id, KIND_GLOBAL_ABLATE, None, rtuple),
    )
    value = _pair_jsd(oracle, src, abl, cfg.m_jsd)
    if cache is not None:
        cache[rtuple] = value
    return value


def cascaded_jsd(jsd_region: float, jsd_global: float, cfg: AnalysisConfig) -> float:
    return cfg.k_region * jsd_region + cfg.k_global * jsd_global


def _image_cluster_sizes(tokens: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    L = tokens.shape[0]
    if L == 1:
        return np.ones(1, dtype=np.int64)
    k = min(cfg.k_dpc_image, L - 1)
    n_clusters = min(L, max(1, math.ceil(L / cfg.k_dpc_image)))
    return dpc_cluster(tokens, k=k, n_clusters=n_clusters).point_sizes()


def analyze_image(
    oracle: Oracle,
    image: CorpusImage,
    cfg: AnalysisConfig | None = None,
    cls_embedding: np.ndarray | None = None,
) -> list[AnalysisRecord]:
    """Run both probing experiments for every token of one image.

    The optional columns are filled opportunistically: clssim when a
    reference embedding is supplied, attn_score when the oracle reports
    attention on the full-image query.
    """
    cfg = cfg or AnalysisConfig()
    tokens = np.asarray(image.tokens, dtype=np.float64)
    L = image.length
    sizes = _image_cluster_sizes(tokens, cfg)
    cache: dict = {}
    # prime the global source response; replay stores always record it
    global_leave_one_out(oracle, image, neighborhood_of(0, image.grid, cfg.neighborhood), cfg, cache)

    attn = None
    src = cache.get("__src__")
    if src is not None and src.attention is not None:
        from .baselines import attention_scores

        attn = attention_scores(src.attention)
    if cls_embedding is None:
        cls_embedding = oracle.cls_embedding
    clssim = None
    if cls_embedding is not None:
        from .numerics import cosine_similarity_matrix

        clssim = cosine_similarity_matrix(tokens, np.asarray(cls_embedding)[None, :])[:, 0]

    records = []
    for i in range(L):
        try:
            p1 = single_token_probe(
                oracle,
                tokens[i],
                cfg,
                reference_length=L,
                key=RequestKey(image.image_id, KIND_SINGLE, i),
            )
            region = neighborhood_of(i, image.grid, cfg.neighborhood)
            jr = region_leave_one_out(oracle, image, i, cfg)
            jg = global_leave_one_out(oracle, image, region, cfg, cache)
        except RedcbError as e:
            raise type(e)(f"image {image.image_id} token {i}: {e}") from e
        records.append(
            AnalysisRecord(
                image_id=image.image_id,
                token_idx=i,
                p1=p1,
                cluster_size_img=int(sizes[i]),
                jsd_region=jr,
                jsd_global=jg,
                jsd_final=cascaded_jsd(jr, jg, cfg),
                clssim=None if clssim is None else float(clssim[i]),
                attn_score=None if attn is None else float(attn[i]),
            )
        )
    return records


def analyze_corpus(
    oracle: Oracle,
    images: list[CorpusImage],
    cfg: AnalysisConfig | None = None,
    cls_embedding: np.ndarray | None = None,
    jobs: int = 1,
) -> list[AnalysisRecord]:
    """Analyze a corpus image by image.

    With jobs > 1 the images run on a thread pool; outputs are concatenated
    in corpus order, so results do not depend on scheduling.
    """
    cfg = cfg or AnalysisConfig()
    if jobs < 1:
        raise InvalidInput("jobs must be >= 1")

    def run(img: CorpusImage) -> list[AnalysisRecord]:
        recs = analyze_image(oracle, img, cfg, cls_embedding)
        log.info("analyzed %s (%d tokens)", img.image_id, img.length)
        return recs

    if jobs == 1:
        per_image = [run(img) for img in images]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            per_image = list(pool.map(run, images))
    return [rec for recs in per_image for rec in recs]


def write_records(path, records: list[AnalysisRecord]):
    """records.jsonl: one record per line, floats at full round-trip precision."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json_dict()) + "\n")


def read_records(path) -> list[AnalysisRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append(AnalysisRecord.from_json_dict(json.loads(line)))
    return out
