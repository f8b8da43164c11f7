"""Build a codebook, calibrate a keep threshold, and prune one image.

Renders the pruning decision as an ASCII grid: kept tokens show their
label class, pruned ones show a dot. With the synthetic profile the
surviving tokens should trace the planted rectangles.
"""
import argparse

import numpy as np

from redcb import (
    AnalysisConfig,
    AnalyticOracle,
    analyze_corpus,
    build_codebook_from_records,
    calibrate_threshold,
    generate_corpus,
    prune_threshold,
    redundancy_scores,
)
from redcb.codebook import PROFILES
from redcb.corpus import BACKGROUND_LABEL


def render(img, kept):
    rows, cols = img.grid
    kept = set(kept.tolist())
    lines = []
    for r in range(rows):
        cells = []
        for c in range(cols):
            i = r * cols + c
            lab = img.labels[i]
            ch = "." if i not in kept else ("·" if lab == BACKGROUND_LABEL else lab[-1])
            cells.append(ch)
        lines.append(" ".join(cells))
    return "\n".join(lines)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-images", type=int, default=60)
    ap.add_argument("--keep-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    grid, classes, d = 8, 4, 32
    images = generate_corpus(args.n_images, grid=grid, n_classes=classes, seed=args.seed, d=d)
    oracle = AnalyticOracle.for_classes(classes, d)
    records = analyze_corpus(oracle, images, AnalysisConfig())

    th, k_pool = PROFILES["synthetic"]
    embeddings = {img.image_id: np.asarray(img.tokens, np.float64) for img in images}
    cb = build_codebook_from_records(records, embeddings, th, k_pool=k_pool,
                                     model_id=oracle.model_id)
    print(f"codebook: {cb.n_prototypes} redundancy prototypes of dim {cb.d}")

    target = args.keep_fraction * grid * grid
    r = calibrate_threshold(images, cb, target_avg_kept=target)
    print(f"calibrated keep threshold r = {r:.4f} for a mean of {target:.1f} tokens")

    img = images[0]
    tokens = np.asarray(img.tokens, np.float64)
    scores = redundancy_scores(tokens, cb)
    kept = prune_threshold(tokens, cb, r)
    print(f"\nimage {img.image_id}: kept {kept.size}/{tokens.shape[0]} tokens")
    print(f"score range [{scores.min():.3f}, {scores.max():.3f}]")
    print("\nkept map (dots are pruned, digits are object classes):")
    print(render(img, kept))

    obj = [i for i, l in enumerate(img.labels) if l != BACKGROUND_LABEL]
    n_obj_kept = len(set(kept.tolist()) & set(obj))
    print(f"\nobject tokens kept: {n_obj_kept}/{len(obj)}")


if __name__ == "__main__":
    main()
