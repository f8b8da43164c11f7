"""On-disk store round trips, corruption detection, and replay semantics."""

import json
import zlib

import numpy as np
import pytest

from redcb.errors import (
    CorruptStoreError,
    InvalidInput,
    MissingRecordError,
    UnsupportedVersion,
)
from redcb.oracle import (
    KIND_SINGLE,
    PromptKind,
    RecordingOracle,
    ReplayOracle,
    ReplayStore,
    RequestKey,
    ToyTransformerOracle,
    build_single_token_input,
    grid_visual_input,
)
from redcb.oracle.replay import build_request_records, replay_lookup, write_replay_store
from redcb.wire import (
    CorpusImage,
    RequestRecord,
    load_images,
    load_pad,
    load_requests,
    read_manifest,
    write_labels,
    write_store,
)


def _two_images(d=6):
    rng = np.random.default_rng(11)
    return [
        CorpusImage("imgA", rng.normal(size=(4, d)), (2, 2), ["B", "B", "O:0", "B"]),
        CorpusImage("imgB", rng.normal(size=(6, d)), (2, 3), None),
    ]


def _write_minimal(root, images, requests=None, **over):
    kw = dict(
        model_id="unit-model",
        d=images[0].tokens.shape[1],
        vocab_size=16,
        article_ids=[3, 5],
        repeat_for_single_input=True,
        uses_image_newline=False,
        images=images,
        pad=np.zeros(images[0].tokens.shape[1]),
        requests=requests,
    )
    kw.update(over)
    return write_store(root, **kw)


def test_store_round_trip_is_exact_at_f32(tmp_path):
    images = _two_images()
    _write_minimal(tmp_path, images, extra_manifest={"note": "fixture"})
    write_labels(tmp_path, images)
    man = read_manifest(tmp_path)
    assert man["format_version"] == 1
    assert man["model_id"] == "unit-model"
    assert man["capabilities"] == {
        "repeat_for_single_input": True,
        "uses_image_newline": False,
    }
    assert man["note"] == "fixture"
    assert [e["image_id"] for e in man["images"]] == ["imgA", "imgB"]

    pad = load_pad(tmp_path, man)
    assert pad.shape == (6,) and np.all(pad == 0.0)

    loaded = load_images(tmp_path, man)
    for orig, got in zip(images, loaded):
        assert got.image_id == orig.image_id
        assert got.grid == orig.grid
        assert got.labels == orig.labels
        # storage is little-endian float32; the round trip must be bit exact
        assert np.array_equal(got.tokens, orig.tokens.astype(np.float32))


def test_manifest_is_the_commit_marker(tmp_path):
    images = _two_images()
    _write_minimal(tmp_path, images)
    (tmp_path / "manifest.json").unlink()
    with pytest.raises(CorruptStoreError):
        read_manifest(tmp_path)


def test_unparseable_manifest_raises(tmp_path):
    _write_minimal(tmp_path, _two_images())
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(CorruptStoreError):
        read_manifest(tmp_path)


def test_unknown_format_version_raises(tmp_path):
    _write_minimal(tmp_path, _two_images())
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["format_version"] = 2
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(UnsupportedVersion):
        read_manifest(tmp_path)


def test_truncated_embeddings_detected(tmp_path):
    images = _two_images()
    _write_minimal(tmp_path, images)
    blob = tmp_path / "imgA" / "embeddings.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    man = read_manifest(tmp_path)
    with pytest.raises(CorruptStoreError):
        load_images(tmp_path, man)


def test_bitflip_fails_checksum(tmp_path):
    images = _two_images()
    _write_minimal(tmp_path, images)
    blob = tmp_path / "imgB" / "embeddings.bin"
    raw = bytearray(blob.read_bytes())
    raw[7] ^= 0xFF
    blob.write_bytes(bytes(raw))
    man = read_manifest(tmp_path)
    with pytest.raises(CorruptStoreError):
        load_images(tmp_path, man)


def test_bad_image_id_rejected():
    # ids become directory names, so whitespace and separators are refused
    with pytest.raises(InvalidInput):
        CorpusImage("has space", np.zeros((1, 3)), (1, 1), None)
    with pytest.raises(InvalidInput):
        CorpusImage("a/b", np.zeros((1, 3)), (1, 1), None)


def _request_fixture():
    key = RequestKey("imgA", KIND_SINGLE, 2, None)
    rec = RequestRecord(
        key=key,
        step=2,
        article_skipped=True,
        candidate_ids=np.array([0, 4, 9], dtype=np.int64),
        logits=np.array([0.123456789, -2.5, 7.25]),
    )
    return key, rec


def test_requests_round_trip_preserves_article_flag(tmp_path):
    images = _two_images()
    key, rec = _request_fixture()
    _write_minimal(tmp_path, images, requests=[rec])
    man = read_manifest(tmp_path)
    table = load_requests(tmp_path, man)
    assert set(table) == {key}
    got = table[key]
    assert got.step == 2 and got.article_skipped is True
    assert np.array_equal(got.candidate_ids, rec.candidate_ids)
    # values are rounded to float32 on write, then stored as JSON floats
    assert np.array_equal(got.logits, rec.logits.astype(np.float32).astype(np.float64))


def test_requests_for_unlisted_images_are_skipped(tmp_path):
    images = _two_images()
    key, rec = _request_fixture()
    stray = RequestRecord(
        key=RequestKey("ghost", KIND_SINGLE, 0, None),
        step=1,
        article_skipped=False,
        candidate_ids=np.array([1], dtype=np.int64),
        logits=np.array([0.5]),
    )
    _write_minimal(tmp_path, images, requests=[rec, stray])
    table = load_requests(tmp_path, read_manifest(tmp_path))
    assert set(table) == {key}


def test_duplicate_request_key_is_corruption(tmp_path):
    images = _two_images()
    key, rec = _request_fixture()
    _write_minimal(tmp_path, images, requests=[rec])
    line = (tmp_path / "requests.jsonl").read_text().strip()
    (tmp_path / "requests.jsonl").write_text(line + "\n" + line + "\n")
    with pytest.raises(CorruptStoreError):
        load_requests(tmp_path, read_manifest(tmp_path))


def test_replay_lookup_miss_names_the_key(tmp_path):
    images = _two_images()
    key, rec = _request_fixture()
    _write_minimal(tmp_path, images, requests=[rec])
    store = ReplayStore(tmp_path)
    assert replay_lookup(store, key).article_skipped is True
    with pytest.raises(MissingRecordError, match="imgB"):
        replay_lookup(store, RequestKey("imgB", KIND_SINGLE, 0, None))


def test_replay_oracle_requires_a_key(tmp_path):
    images = _two_images()
    key, rec = _request_fixture()
    _write_minimal(tmp_path, images, requests=[rec])
    oracle = ReplayOracle(ReplayStore(tmp_path))
    # a keyless query cannot be looked up, so it is a missing record
    with pytest.raises(MissingRecordError):
        oracle.first_step_logits(
            grid_visual_input(images[0].tokens, images[0].grid, use_newline=False),
            PromptKind.DESCRIBE_IMAGE,
        )


def test_ablate_records_cover_their_source_head():
    # Pairing rule: an ablation record must carry its source's top ids so the
    # two responses can be compared on the source-defined head vocabulary.
    oracle = ToyTransformerOracle(seed=3, d_model=16, n_heads=4, vocab_size=40)
    rng = np.random.default_rng(5)
    tokens = rng.normal(size=(4, 16))
    rec = RecordingOracle(oracle)
    src_key = RequestKey("img0", "region_src", 1, (0, 1, 2, 3))
    abl_key = RequestKey("img0", "region_ablate", 1, (0, 1, 2, 3))
    vis = grid_visual_input(tokens, (2, 2), use_newline=False)
    rec.first_step_logits(vis, PromptKind.DESCRIBE_REGION, key=src_key)
    ablated = tokens.copy()
    ablated[1] = 0.0
    rec.first_step_logits(
        grid_visual_input(ablated, (2, 2), use_newline=False),
        PromptKind.DESCRIBE_REGION,
        key=abl_key,
    )

    records = build_request_records(rec.recorded, k_top=5, m_cover=3)
    by_key = {r.key: r for r in records}
    src_ids = set(by_key[src_key].candidate_ids[:3].tolist())
    abl_ids = set(by_key[abl_key].candidate_ids.tolist())
    assert src_ids <= abl_ids
    # canonical ordering: grouped by image, then kind string
    kinds = [r.key.kind for r in records]
    assert kinds == sorted(kinds)


def test_ablate_without_source_is_invalid():
    oracle = ToyTransformerOracle(seed=3, d_model=16, n_heads=4, vocab_size=40)
    rec = RecordingOracle(oracle)
    abl_key = RequestKey("img0", "global_ablate", None, (0,))
    vis = grid_visual_input(np.ones((2, 16)), (1, 2), use_newline=False)
    rec.first_step_logits(vis, PromptKind.DESCRIBE_IMAGE, key=abl_key)
    with pytest.raises(InvalidInput):
        build_request_records(rec.recorded)


def test_recorded_store_replays_single_probe_exactly(tmp_path):
    # End-to-end smoke at one probe: record a toy model, write a store, and
    # check the replayed top-1 probability agrees to float32 resolution.
    oracle = ToyTransformerOracle(
        seed=9, d_model=16, n_heads=4, vocab_size=40, repeat_for_single_input=True
    )
    rng = np.random.default_rng(2)
    tokens = rng.normal(size=(4, 16))
    image = CorpusImage("img0", tokens, (2, 2), None)
    rec = RecordingOracle(oracle)
    key = RequestKey("img0", KIND_SINGLE, 0, None)
    vis = build_single_token_input(tokens[0], oracle.capabilities, reference_length=4)
    live = rec.first_step_logits(vis, PromptKind.DESCRIBE_SINGLE_TOKEN, key=key)
    write_replay_store(tmp_path, rec, [image], k_top=10)

    replayed = ReplayOracle(ReplayStore(tmp_path))
    got = replayed.first_step_logits(vis, PromptKind.DESCRIBE_SINGLE_TOKEN, key=key)
    assert got.step == live.step and got.article_skipped == live.article_skipped
    order = np.argsort(live.logits.values)[::-1][:10]
    live_ids = live.logits.candidate_ids[order]
    assert set(got.logits.candidate_ids.tolist()) == set(live_ids.tolist())
    for cid in live_ids:
        a = live.logits.values[live.logits.candidate_ids == cid].item()
        b = got.logits.values[got.logits.candidate_ids == cid].item()
        assert abs(a - b) < 1e-6


def test_replay_store_capabilities_match_recorded_oracle(tmp_path):
    oracle = ToyTransformerOracle(
        seed=9,
        d_model=16,
        n_heads=4,
        vocab_size=40,
        uses_image_newline=True,
        article_ids=frozenset({3}),
    )
    rec = RecordingOracle(oracle)
    tokens = np.ones((2, 16))
    image = CorpusImage("img0", tokens, (1, 2), None)
    key = RequestKey("img0", "global_src", None, None)
    rec.first_step_logits(
        grid_visual_input(tokens, (1, 2), use_newline=True),
        PromptKind.DESCRIBE_IMAGE,
        key=key,
    )
    write_replay_store(tmp_path, rec, [image])
    store = ReplayStore(tmp_path)
    caps = store.capabilities()
    assert caps.uses_image_newline is True
    assert caps.repeat_for_single_input is False
    assert caps.article_ids == frozenset({3})
    assert np.array_equal(store.pad, oracle.pad_embedding)


def test_sparse_logits_survive_json_f32_rounding():
    vals = np.array([1.0000001, -3.7e-3, 2.0])
    rec = RequestRecord(
        key=RequestKey("imgA", "global_src", None, None),
        step=1,
        article_skipped=False,
        candidate_ids=np.array([7, 1, 2], dtype=np.int64),
        logits=vals,
    )
    blob = json.dumps(rec.to_json_dict())
    back = RequestRecord.from_json_dict(json.loads(blob))
    assert np.array_equal(back.logits, vals.astype(np.float32).astype(np.float64))
    assert back.key == rec.key
