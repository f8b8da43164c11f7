"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 I/O or store problem,
3 missing replay record, 4 empty candidate set.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from .analysis import AnalysisConfig, analyze_corpus, read_records, write_records
from .baselines import STRATEGIES, compare_strategies, write_report_csv, write_report_json
from .codebook import (
    DEFAULT_K_POOL,
    PROFILES,
    Thresholds,
    build_codebook_from_records,
    calibrate_threshold,
    load_codebook,
    probing_flops,
    prune_budget,
    prune_threshold,
    redundancy_scores,
)
from .corpus import generate_corpus, load_corpus, save_corpus
from .errors import (
    ConsistencyError,
    CorruptStoreError,
    EmptyCandidateSet,
    InvalidInput,
    MissingRecordError,
)
from .oracle import AnalyticOracle, RecordingOracle, ReplayOracle, ReplayStore, ToyTransformerOracle
from .oracle.replay import write_replay_store

log = logging.getLogger("redcb")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_MISSING_RECORD = 3
EXIT_EMPTY = 4


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage problems; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _make_oracle(spec: str, seed: int, manifest: dict):
    """Build an oracle from a selector string.

    ``analytic`` and ``toy`` are self-contained synthetic models sized to
    match the corpus; ``replay:DIR`` answers from a recorded store and
    never computes.
    """
    d = int(manifest["d"])
    if spec == "analytic":
        n_classes = int(manifest["vocab_size"]) - 1
        return AnalyticOracle.for_classes(n_classes, d)
    if spec == "toy":
        return ToyTransformerOracle(seed=seed, d_model=d)
    if spec.startswith("replay:"):
        return ReplayOracle(ReplayStore(spec.split(":", 1)[1]))
    raise InvalidInput(f"unknown oracle selector {spec!r} (analytic, toy, replay:DIR)")


def _load_images(path: str):
    images, manifest = load_corpus(path)
    return images, manifest


def _thresholds_from_args(args) -> tuple[Thresholds, int]:
    th, k_pool = PROFILES[args.profile]
    over = {}
    for name in ("tau_prob", "tau_out", "tau_jsd", "tau_in"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if over:
        base = th.to_json_dict()
        base.update(over)
        th = Thresholds(**base)
    if getattr(args, "k_pool", None) is not None:
        k_pool = args.k_pool
    return th, k_pool


def cmd_synth_gen(args) -> int:
    images = generate_corpus(
        args.n_images, grid=args.grid, n_classes=args.classes, seed=args.seed, d=args.dim
    )
    save_corpus(
        args.out,
        images,
        n_classes=args.classes,
        d=args.dim,
        generator_meta={
            "seed": args.seed,
            "grid": args.grid,
            "n_classes": args.classes,
            "n_images": args.n_images,
        },
    )
    if not args.quiet:
        print(f"wrote {len(images)} images to {args.out}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    images, manifest = _load_images(args.corpus)
    oracle = _make_oracle(args.oracle, args.seed, manifest)
    cfg = AnalysisConfig(
        k_region=args.k_region,
        k_global=args.k_global,
        null_ablation=args.null_ablation,
    )
    records = analyze_corpus(oracle, images, cfg, jobs=args.jobs)
    write_records(args.out, records)
    if not args.quiet:
        print(f"analyzed {len(images)} images ({len(records)} tokens) -> {args.out}")
        print(f"oracle queries: {oracle.query_count}")
    return EXIT_OK


def cmd_build_codebook(args) -> int:
    images, manifest = _load_images(args.corpus)
    records = read_records(args.records)
    th, k_pool = _thresholds_from_args(args)
    embeddings = {img.image_id: np.asarray(img.tokens, dtype=np.float64) for img in images}
    cb = build_codebook_from_records(
        records, embeddings, th, k_pool=k_pool, model_id=manifest.get("model_id", "unknown")
    )
    from .codebook import save_codebook

    save_codebook(cb, args.out)
    if not args.quiet:
        print(f"codebook: {cb.n_prototypes} prototypes (d={cb.d}) -> {args.out}")
    return EXIT_OK


def cmd_prune(args) -> int:
    images, _ = _load_images(args.corpus)
    cb = load_codebook(args.codebook)
    out = {}
    for img in images:
        tokens = np.asarray(img.tokens, dtype=np.float64)
        if args.budget is not None:
            kept = prune_budget(tokens, cb, min(args.budget, tokens.shape[0]))
        else:
            kept = prune_threshold(tokens, cb, args.r_threshold)
        out[img.image_id] = kept.tolist()
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=0, sort_keys=True)
        fh.write("\n")
    if not args.quiet:
        total = sum(img.tokens.shape[0] for img in images)
        kept_n = sum(len(v) for v in out.values())
        print(f"kept {kept_n}/{total} tokens across {len(images)} images -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    images, _ = _load_images(args.corpus)
    cb = load_codebook(args.codebook)
    r = calibrate_threshold(images, cb, target_avg_kept=args.target_kept)
    print(f"{r:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    images, manifest = _load_images(args.corpus)
    oracle = _make_oracle(args.oracle, args.seed, manifest)
    cb = load_codebook(args.codebook)
    reports = compare_strategies(images, oracle, cb, budget=args.budget)
    meta = {
        "corpus": args.corpus,
        "codebook": args.codebook,
        "oracle": oracle.model_id,
        "budget": args.budget,
    }
    if args.out_json:
        write_report_json(args.out_json, reports, meta=meta)
    if args.out_csv:
        write_report_csv(args.out_csv, reports)
    if not args.quiet:
        for r in reports:
            seed = "mean" if r.seed is None else f"s{r.seed}"
            acc = "-" if r.toy_accuracy is None else f"{r.toy_accuracy:.3f}"
            print(
                f"{r.strategy:9s} {seed:>4s} jsd={r.faithfulness_jsd:.6f} "
                f"acc={acc} flops={r.flops_probe}"
            )
    return EXIT_OK


def cmd_flops(args) -> int:
    print(probing_flops(args.length, args.prototypes, args.dim))
    return EXIT_OK


def cmd_scores(args) -> int:
    images, _ = _load_images(args.corpus)
    cb = load_codebook(args.codebook)
    out = {
        img.image_id: redundancy_scores(np.asarray(img.tokens, np.float64), cb).tolist()
        for img in images
    }
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=0, sort_keys=True)
        fh.write("\n")
    if not args.quiet:
        print(f"scores for {len(out)} images -> {args.out}")
    return EXIT_OK


def cmd_export_replay(args) -> int:
    images, manifest = _load_images(args.corpus)
    inner = _make_oracle(args.oracle, args.seed, manifest)
    recorder = RecordingOracle(inner)
    cfg = AnalysisConfig()
    analyze_corpus(recorder, images, cfg, jobs=args.jobs)
    write_replay_store(args.out, recorder, images)
    if not args.quiet:
        print(f"recorded {len(recorder.recorded)} responses -> {args.out}")
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="redcb", description="redundancy-codebook probing and pruning")
    p.add_argument("--quiet", action="store_true", help="suppress progress output")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sg = sub.add_parser("synth-gen", help="generate a synthetic grid corpus")
    sg.add_argument("--out", required=True)
    sg.add_argument("--n-images", type=int, default=100)
    sg.add_argument("--grid", type=int, default=8)
    sg.add_argument("--classes", type=int, default=4)
    sg.add_argument("--dim", type=int, default=32)
    sg.add_argument("--seed", type=int, default=0)
    sg.set_defaults(func=cmd_synth_gen)

    an = sub.add_parser("analyze", help="probe every token of a corpus")
    an.add_argument("--corpus", required=True)
    an.add_argument("--oracle", default="analytic")
    an.add_argument("--out", required=True)
    an.add_argument("--k-region", type=float, default=1.0)
    an.add_argument("--k-global", type=float, default=16.0)
    an.add_argument("--null-ablation", action="store_true")
    an.add_argument("--jobs", type=int, default=1)
    an.add_argument("--seed", type=int, default=0)
    an.set_defaults(func=cmd_analyze)

    bc = sub.add_parser("build-codebook", help="select candidates and pool prototypes")
    bc.add_argument("--corpus", required=True)
    bc.add_argument("--records", required=True)
    bc.add_argument("--out", required=True)
    bc.add_argument("--profile", choices=sorted(PROFILES), default="default")
    bc.add_argument("--tau-prob", type=float, dest="tau_prob")
    bc.add_argument("--tau-out", type=int, dest="tau_out")
    bc.add_argument("--tau-jsd", type=float, dest="tau_jsd")
    bc.add_argument("--tau-in", type=int, dest="tau_in")
    bc.add_argument("--k-pool", type=int, dest="k_pool")
    bc.set_defaults(func=cmd_build_codebook)

    pr = sub.add_parser("prune", help="prune a corpus against a codebook")
    pr.add_argument("--corpus", required=True)
    pr.add_argument("--codebook", required=True)
    pr.add_argument("--out", required=True)
    group = pr.add_mutually_exclusive_group(required=True)
    group.add_argument("--r-threshold", type=float)
    group.add_argument("--budget", type=int)
    pr.set_defaults(func=cmd_prune)

    ca = sub.add_parser("calibrate", help="find the keep threshold for a token budget")
    ca.add_argument("--corpus", required=True)
    ca.add_argument("--codebook", required=True)
    ca.add_argument("--target-kept", type=float, required=True)
    ca.set_defaults(func=cmd_calibrate)

    cp = sub.add_parser("compare", help="evaluate pruning strategies")
    cp.add_argument("--corpus", required=True)
    cp.add_argument("--codebook", required=True)
    cp.add_argument("--oracle", default="analytic")
    cp.add_argument("--budget", type=int, required=True)
    cp.add_argument("--out-json")
    cp.add_argument("--out-csv")
    cp.add_argument("--seed", type=int, default=0)
    cp.set_defaults(func=cmd_compare)

    fl = sub.add_parser("flops", help="probing cost of one sequence")
    fl.add_argument("--length", type=int, required=True)
    fl.add_argument("--prototypes", type=int, required=True)
    fl.add_argument("--dim", type=int, required=True)
    fl.set_defaults(func=cmd_flops)

    sc = sub.add_parser("scores", help="per-token redundancy scores")
    sc.add_argument("--corpus", required=True)
    sc.add_argument("--codebook", required=True)
    sc.add_argument("--out", required=True)
    sc.set_defaults(func=cmd_scores)

    ex = sub.add_parser("export-replay", help="record oracle responses for offline replay")
    ex.add_argument("--corpus", required=True)
    ex.add_argument("--oracle", default="toy")
    ex.add_argument("--out", required=True)
    ex.add_argument("--jobs", type=int, default=1)
    ex.add_argument("--seed", type=int, default=0)
    ex.set_defaults(func=cmd_export_replay)

    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("REDCB_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse raises for --help (0) and usage errors (1 via _Parser)
        return int(e.code or 0)
    try:
        return args.func(args)
    except MissingRecordError as e:
        log.error("missing replay record: %s", e)
        print(f"redcb: missing replay record: {e}", file=sys.stderr)
        return EXIT_MISSING_RECORD
    except EmptyCandidateSet as e:
        print(f"redcb: empty candidate set: {e}", file=sys.stderr)
        return EXIT_EMPTY
    except (CorruptStoreError, ConsistencyError, OSError) as e:
        print(f"redcb: {e}", file=sys.stderr)
        return EXIT_IO
    except InvalidInput as e:
        print(f"redcb: invalid input: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
