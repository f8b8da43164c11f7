"""Command-line behavior: the full pipeline, exit codes, output formats."""

import json
import struct

import pytest

from redcb.cli import main


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """Run the whole CLI pipeline once and share its outputs."""
    root = tmp_path_factory.mktemp("cli")
    corpus = str(root / "corpus")
    records = str(root / "records.jsonl")
    book = str(root / "book.rcb")
    assert main([
        "--quiet", "synth-gen", "--out", corpus,
        "--n-images", "20", "--grid", "6", "--classes", "3",
        "--dim", "16", "--seed", "1",
    ]) == 0
    assert main([
        "--quiet", "analyze", "--corpus", corpus, "--oracle", "analytic",
        "--out", records, "--jobs", "2",
    ]) == 0
    assert main([
        "--quiet", "build-codebook", "--corpus", corpus, "--records", records,
        "--out", book, "--profile", "synthetic",
    ]) == 0
    return root, corpus, records, book


def test_pipeline_artifacts_exist(pipeline):
    root, corpus, records, book = pipeline
    manifest = json.loads((root / "corpus" / "manifest.json").read_text())
    assert manifest["model_id"] == "synthcorpus"
    assert len(manifest["images"]) == 20
    first = (root / "records.jsonl").read_text().splitlines()[0]
    rec = json.loads(first)
    assert rec["image_id"] == "img0000" and rec["token_idx"] == 0
    raw = (root / "book.rcb").read_bytes()
    assert raw[:4] == b"RCBK"
    assert struct.unpack("<I", raw[4:8])[0] == 1


def test_prune_by_threshold_and_budget(pipeline, tmp_path):
    root, corpus, _, book = pipeline
    out_t = str(tmp_path / "kept_t.json")
    assert main([
        "--quiet", "prune", "--corpus", corpus, "--codebook", book,
        "--r-threshold", "0.9", "--out", out_t,
    ]) == 0
    kept = json.load(open(out_t))
    assert len(kept) == 20
    out_b = str(tmp_path / "kept_b.json")
    assert main([
        "--quiet", "prune", "--corpus", corpus, "--codebook", book,
        "--budget", "7", "--out", out_b,
    ]) == 0
    kept_b = json.load(open(out_b))
    assert all(len(v) == 7 for v in kept_b.values())
    assert all(v == sorted(v) for v in kept_b.values())


def test_prune_flags_are_exclusive(pipeline, tmp_path, capsys):
    root, corpus, _, book = pipeline
    code = main([
        "--quiet", "prune", "--corpus", corpus, "--codebook", book,
        "--r-threshold", "0.5", "--budget", "3",
        "--out", str(tmp_path / "x.json"),
    ])
    assert code == 1
    assert "not allowed with" in capsys.readouterr().err


def test_prune_requires_one_selector(pipeline, tmp_path, capsys):
    root, corpus, _, book = pipeline
    code = main([
        "--quiet", "prune", "--corpus", corpus, "--codebook", book,
        "--out", str(tmp_path / "x.json"),
    ])
    assert code == 1


def test_calibrate_prints_four_decimals(pipeline, capsys):
    root, corpus, _, book = pipeline
    assert main([
        "calibrate", "--corpus", corpus, "--codebook", book,
        "--target-kept", "7.2",
    ]) == 0
    line = capsys.readouterr().out.strip()
    float(line)
    assert len(line.split(".")[1]) == 4


def test_compare_writes_reports(pipeline, tmp_path, capsys):
    root, corpus, _, book = pipeline
    out_json = str(tmp_path / "cmp.json")
    out_csv = str(tmp_path / "cmp.csv")
    assert main([
        "compare", "--corpus", corpus, "--codebook", book,
        "--oracle", "analytic", "--budget", "8",
        "--out-json", out_json, "--out-csv", out_csv,
    ]) == 0
    txt = capsys.readouterr().out
    assert "codebook" in txt and "random" in txt
    blob = json.load(open(out_json))
    assert blob["meta"]["budget"] == 8
    strategies = {r["strategy"] for r in blob["reports"]}
    assert strategies == {"codebook", "clssim", "attention", "random"}
    header = open(out_csv).readline().strip().split(",")
    assert header[:3] == ["strategy", "seed", "budget"]


def test_flops_subcommand(capsys):
    assert main(["flops", "--length", "576", "--prototypes", "969", "--dim", "4096"]) == 0
    assert capsys.readouterr().out.strip() == "4571757504"


def test_missing_corpus_is_io_error(tmp_path, capsys):
    code = main([
        "--quiet", "analyze", "--corpus", str(tmp_path / "nowhere"),
        "--out", str(tmp_path / "r.jsonl"),
    ])
    assert code == 2


def test_unknown_oracle_is_usage_error(pipeline, tmp_path, capsys):
    root, corpus, _, _ = pipeline
    code = main([
        "--quiet", "analyze", "--corpus", corpus, "--oracle", "gpt",
        "--out", str(tmp_path / "r.jsonl"),
    ])
    assert code == 1
    assert "oracle selector" in capsys.readouterr().err


def test_empty_candidates_exit_code(pipeline, tmp_path, capsys):
    root, corpus, records, _ = pipeline
    code = main([
        "--quiet", "build-codebook", "--corpus", corpus, "--records", records,
        "--out", str(tmp_path / "x.rcb"), "--profile", "synthetic",
        "--tau-prob", "1e-9",
    ])
    assert code == 4
    assert "candidate" in capsys.readouterr().err


def test_replay_round_trip_via_cli(tmp_path, capsys):
    corpus = str(tmp_path / "corpus")
    store = str(tmp_path / "store")
    live = str(tmp_path / "live.jsonl")
    replayed = str(tmp_path / "replayed.jsonl")
    assert main([
        "--quiet", "synth-gen", "--out", corpus,
        "--n-images", "2", "--grid", "4", "--classes", "2",
        "--dim", "16", "--seed", "5",
    ]) == 0
    assert main([
        "--quiet", "export-replay", "--corpus", corpus, "--oracle", "toy",
        "--out", store,
    ]) == 0
    assert main([
        "--quiet", "analyze", "--corpus", corpus, "--oracle", "toy",
        "--out", live,
    ]) == 0
    assert main([
        "--quiet", "analyze", "--corpus", corpus, "--oracle", f"replay:{store}",
        "--out", replayed,
    ]) == 0
    a = [json.loads(l) for l in open(live)]
    b = [json.loads(l) for l in open(replayed)]
    assert len(a) == len(b) == 2 * 16
    for ra, rb in zip(a, b):
        assert ra["image_id"] == rb["image_id"]
        assert ra["token_idx"] == rb["token_idx"]
        assert abs(ra["p1"] - rb["p1"]) < 1e-5
        assert abs(ra["jsd_final"] - rb["jsd_final"]) < 1e-5


def test_replay_against_wrong_corpus_is_inconsistent(tmp_path, capsys):
    corpus_a = str(tmp_path / "a")
    corpus_b = str(tmp_path / "b")
    store = str(tmp_path / "store")
    for name, seed in ((corpus_a, 5), (corpus_b, 6)):
        assert main([
            "--quiet", "synth-gen", "--out", name,
            "--n-images", "2", "--grid", "4", "--classes", "2",
            "--dim", "16", "--seed", str(seed),
        ]) == 0
    assert main([
        "--quiet", "export-replay", "--corpus", corpus_a, "--oracle", "toy",
        "--out", store,
    ]) == 0
    # same image ids, different embeddings: the store must refuse to answer
    code = main([
        "--quiet", "analyze", "--corpus", corpus_b,
        "--oracle", f"replay:{store}", "--out", str(tmp_path / "x.jsonl"),
    ])
    assert code == 2
    assert "different corpus" in capsys.readouterr().err


def test_replay_missing_record_exit_code(tmp_path, capsys):
    small = str(tmp_path / "small")
    big = str(tmp_path / "big")
    store = str(tmp_path / "store")
    # per-image seeding makes the small corpus a byte-exact prefix of the
    # big one, so only the third image's records are absent from the store
    for name, n in ((small, "2"), (big, "3")):
        assert main([
            "--quiet", "synth-gen", "--out", name,
            "--n-images", n, "--grid", "4", "--classes", "2",
            "--dim", "16", "--seed", "5",
        ]) == 0
    assert main([
        "--quiet", "export-replay", "--corpus", small, "--oracle", "toy",
        "--out", store,
    ]) == 0
    code = main([
        "--quiet", "analyze", "--corpus", big,
        "--oracle", f"replay:{store}", "--out", str(tmp_path / "x.jsonl"),
    ])
    assert code == 3
    assert "img0002" in capsys.readouterr().err
