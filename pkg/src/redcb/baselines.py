"""Pruning baselines and the strategy comparison harness.

Baselines rank tokens by similarity to a reference embedding, by the
model's own attention, or uniformly at random. The comparison harness
prunes to a shared budget, re-queries the oracle on the surviving tokens
and reports how far the output distribution drifted (faithfulness) and,
when ground truth exists, whether the planted majority class still wins.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .analysis import AnalysisConfig
from .codebook import RedundancyCodebook, probing_flops, prune_budget
from .corpus import planted_majority_class
from .errors import InvalidInput
from .numerics import cosine_similarity_matrix, head_vocab_distributions, jsd
from .oracle.base import AttentionRecord, Oracle, PromptKind, grid_visual_input
from .wire import CorpusImage

STRATEGIES = ("codebook", "clssim", "attention", "random")


def clssim_scores(tokens: np.ndarray, cls_embedding: np.ndarray) -> np.ndarray:
    """Cosine similarity of every token to a reference embedding."""
    cls_embedding = np.asarray(cls_embedding, dtype=np.float64)
    return cosine_similarity_matrix(tokens, cls_embedding[None, :])[:, 0]


def attention_scores(rec: AttentionRecord, layer_set=None) -> np.ndarray:
    """Per-token attention: mean over heads within a layer, summed over layers.

    `layer_set` selects layers by index; the default uses all of them.
    """
    n_layers = rec.scores.shape[0]
    if layer_set is None:
        layers = np.arange(n_layers)
    else:
        layers = np.asarray(sorted(set(int(i) for i in layer_set)), dtype=np.int64)
        if layers.size == 0 or layers[0] < 0 or layers[-1] >= n_layers:
            raise InvalidInput(f"layer_set must select from 0..{n_layers - 1}")
    return rec.scores[layers].mean(axis=1).sum(axis=0)


def random_prune(length: int, budget: int, seed: int) -> np.ndarray:
    """Uniform sample of `budget` indices without replacement, ascending."""
    if not 0 <= budget <= length:
        raise InvalidInput(f"budget must lie in [0, {length}], got {budget}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(length, size=budget, replace=False)).astype(np.int64)


def _top_budget(scores: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the `budget` highest scores, ties to the lower index, ascending."""
    order = np.lexsort((np.arange(scores.size), -scores))
    return np.sort(order[:budget]).astype(np.int64)


@dataclass
class StrategyReport:
    strategy: str
    seed: int | None
    budget: int
    faithfulness_jsd: float
    toy_accuracy: float | None
    flops_probe: int
    kept: dict[str, list[int]]
    faithfulness_jsd_std: float | None = None
    toy_accuracy_std: float | None = None

    def to_json_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "budget": self.budget,
            "faithfulness_jsd": self.faithfulness_jsd,
            "toy_accuracy": self.toy_accuracy,
            "flops_probe": self.flops_probe,
            "faithfulness_jsd_std": self.faithfulness_jsd_std,
            "toy_accuracy_std": self.toy_accuracy_std,
            "kept": self.kept,
        }


def _evaluate_kept(
    oracle: Oracle,
    images: list[CorpusImage],
    kept_per_image: dict[str, np.ndarray],
    src_responses: dict[str, object],
    cfg: AnalysisConfig,
) -> tuple[float, float | None]:
    """Mean faithfulness JSD and (when labels exist) majority-class accuracy."""
    use_nl = oracle.capabilities.uses_image_newline
    jsds, hits, labeled = [], 0, 0
    for img in images:
        kept = kept_per_image[img.image_id]
        tokens = np.asarray(img.tokens, dtype=np.float64)
        src = src_responses[img.image_id]
        pruned_vis = grid_visual_input(tokens, img.grid, use_nl, keep=kept)
        pruned = oracle.first_step_logits(pruned_vis, PromptKind.DESCRIBE_IMAGE)
        m_eff = min(cfg.m_jsd, len(src.logits))
        m_dist, n_dist = head_vocab_distributions(src.logits, pruned.logits, m_eff)
        jsds.append(jsd(m_dist, n_dist))
        if img.labels is not None:
            majority = planted_majority_class(img.labels)
            if majority is not None:
                want = oracle.class_id_of(majority)
                if want is not None:
                    labeled += 1
                    got = int(pruned.logits.candidate_ids[np.argmax(pruned.logits.values)])
                    hits += int(got == want)
    accuracy = (hits / labeled) if labeled else None
    return float(np.mean(jsds)), accuracy


def compare_strategies(
    images: list[CorpusImage],
    oracle: Oracle,
    cb: RedundancyCodebook,
    budget: int,
    cfg: AnalysisConfig | None = None,
    strategies=STRATEGIES,
    seeds=(0, 1, 2),
) -> list[StrategyReport]:
    """Run each pruning strategy at one budget over a corpus.

    Deterministic strategies yield one row (seed None); the random baseline
    yields one row per seed plus an aggregate row carrying the across-seed
    standard deviations. Requires a live oracle: pruned inputs are fresh
    queries no replay store has seen.
    """
    cfg = cfg or AnalysisConfig()
    if not images:
        raise InvalidInput("compare_strategies needs at least one image")
    unknown = set(strategies) - set(STRATEGIES)
    if unknown:
        raise InvalidInput(f"unknown strategies: {sorted(unknown)}")
    for img in images:
        if not 0 <= budget <= img.length:
            raise InvalidInput(
                f"budget {budget} invalid for image {img.image_id} of {img.length} tokens"
            )
    use_nl = oracle.capabilities.uses_image_newline
    src_responses = {
        img.image_id: oracle.first_step_logits(
            grid_visual_input(np.asarray(img.tokens, dtype=np.float64), img.grid, use_nl),
            PromptKind.DESCRIBE_IMAGE,
        )
        for img in images
    }
    d = int(images[0].tokens.shape[1])
    total_l = sum(img.length for img in images)

    reports: list[StrategyReport] = []
    for strategy in strategies:
        if strategy == "random":
            per_seed = []
            for seed in seeds:
                kept = {
                    img.image_id: random_prune(img.length, budget, seed)
                    for img in images
                }
                f, acc = _evaluate_kept(oracle, images, kept, src_responses, cfg)
                per_seed.append((seed, f, acc, kept))
                reports.append(
                    StrategyReport(
                        strategy="random",
                        seed=seed,
                        budget=budget,
                        faithfulness_jsd=f,
                        toy_accuracy=acc,
                        flops_probe=0,
                        kept={k: [int(i) for i in v] for k, v in kept.items()},
                    )
                )
            fs = np.array([f for _, f, _, _ in per_seed])
            accs = [a for _, _, a, _ in per_seed]
            has_acc = all(a is not None for a in accs)
            reports.append(
                StrategyReport(
                    strategy="random",
                    seed=None,
                    budget=budget,
                    faithfulness_jsd=float(fs.mean()),
                    toy_accuracy=float(np.mean(accs)) if has_acc else None,
                    flops_probe=0,
                    kept={},
                    faithfulness_jsd_std=float(fs.std()),
                    toy_accuracy_std=float(np.std(accs)) if has_acc else None,
                )
            )
            continue

        if strategy == "codebook":
            kept = {
                img.image_id: prune_budget(
                    np.asarray(img.tokens, dtype=np.float64), cb, budget
                )
                for img in images
            }
            flops = probing_flops(total_l, cb.n_prototypes, d)
        elif strategy == "clssim":
            cls = oracle.cls_embedding
            if cls is None:
                raise InvalidInput("oracle provides no reference embedding for clssim")
            kept = {
                img.image_id: _top_budget(
                    clssim_scores(np.asarray(img.tokens, dtype=np.float64), cls), budget
                )
                for img in images
            }
            flops = probing_flops(total_l, 1, d)
        else:  # attention
            kept = {}
            for img in images:
                attn = src_responses[img.image_id].attention
                if attn is None:
                    raise InvalidInput("oracle reports no attention for attn ranking")
                kept[img.image_id] = _top_budget(attention_scores(attn), budget)
            flops = 0

        f, acc = _evaluate_kept(oracle, images, kept, src_responses, cfg)
        reports.append(
            StrategyReport(
                strategy=strategy,
                seed=None,
                budget=budget,
                faithfulness_jsd=f,
                toy_accuracy=acc,
                flops_probe=flops,
                kept={k: [int(i) for i in v] for k, v in kept.items()},
            )
        )
    return reports


_CSV_COLUMNS = (
    "strategy",
    "seed",
    "budget",
    "faithfulness_jsd",
    "toy_accuracy",
    "flops_probe",
    "faithfulness_jsd_std",
    "toy_accuracy_std",
)


def write_report_json(path, reports: list[StrategyReport], meta: dict | None = None):
    doc = {"meta": meta or {}, "reports": [r.to_json_dict() for r in reports]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_report_csv(path, reports: list[StrategyReport]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        for r in reports:
            writer.writerow(
                [
                    r.strategy,
                    "" if r.seed is None else r.seed,
                    r.budget,
                    repr(r.faithfulness_jsd),
                    "" if r.toy_accuracy is None else repr(r.toy_accuracy),
                    r.flops_probe,
                    "" if r.faithfulness_jsd_std is None else repr(r.faithfulness_jsd_std),
                    "" if r.toy_accuracy_std is None else repr(r.toy_accuracy_std),
                ]
            )
