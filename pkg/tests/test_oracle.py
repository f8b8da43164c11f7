import numpy as np
import pytest

from redcb.errors import InvalidInput, ShapeError
from redcb.numerics import top1_probability
from redcb.oracle import (
    AnalyticOracle,
    OracleCapabilities,
    PromptKind,
    RequestKey,
    VisualInput,
    background_direction,
    build_single_token_input,
    class_directions,
    grid_visual_input,
)

C, D, BETA = 4, 32, 5.0


@pytest.fixture(scope="module")
def oracle():
    return AnalyticOracle.for_classes(C, D, beta=BETA)


def test_class_directions_are_orthonormal():
    dirs = class_directions(C, D)
    bg = background_direction(C, D)
    np.testing.assert_allclose(dirs @ dirs.T, np.eye(C), atol=1e-15)
    np.testing.assert_allclose(dirs @ bg, np.zeros(C), atol=0)
    with pytest.raises(InvalidInput):
        class_directions(31, 32)


def test_pure_class_token_probability(oracle):
    # frozen closed form: e^5 / (e^5 + 4), the zero column contributes e^0
    v = class_directions(C, D)[1]
    resp = oracle.first_step_logits(
        build_single_token_input(v, oracle.capabilities, 64),
        PromptKind.DESCRIBE_SINGLE_TOKEN,
    )
    p1 = top1_probability(resp.logits, 50)
    assert p1 == pytest.approx(0.9737555469386476, abs=1e-9)
    assert resp.step == 1 and not resp.article_skipped


def test_background_token_probability(oracle):
    v = background_direction(C, D)
    resp = oracle.first_step_logits(
        build_single_token_input(v, oracle.capabilities, 64),
        PromptKind.DESCRIBE_SINGLE_TOKEN,
    )
    np.testing.assert_allclose(resp.logits.values, np.zeros(C + 1), atol=1e-12)
    assert top1_probability(resp.logits, 50) == pytest.approx(0.2, abs=1e-12)


def test_pad_embedding_gives_zero_logits(oracle):
    resp = oracle.first_step_logits(
        VisualInput(oracle.pad_embedding[None, :]), PromptKind.DESCRIBE_IMAGE
    )
    np.testing.assert_allclose(resp.logits.values, np.zeros(C + 1), atol=0)


def test_near_class_tokens_beat_background_statistically(oracle):
    # tokens within 30 degrees of a class direction must outscore pure
    # background; sampled check, >= 99% required
    rng = np.random.default_rng(42)
    dirs = class_directions(C, D)
    bg_p1 = 1.0 / (C + 1)
    wins = 0
    n = 1000
    for _ in range(n):
        c = int(rng.integers(C))
        theta = rng.uniform(0.0, np.pi / 6)
        u = rng.normal(size=D)
        u -= (u @ dirs[c]) * dirs[c]
        u /= np.linalg.norm(u)
        v = np.cos(theta) * dirs[c] + np.sin(theta) * u
        resp = oracle.first_step_logits(VisualInput(v[None, :]), PromptKind.DESCRIBE_SINGLE_TOKEN)
        if top1_probability(resp.logits, 50) > bg_p1:
            wins += 1
    assert wins >= 0.99 * n


def test_analytic_attention_is_a_distribution(oracle):
    rng = np.random.default_rng(1)
    vis = VisualInput(rng.normal(size=(10, D)))
    resp = oracle.first_step_logits(vis, PromptKind.DESCRIBE_IMAGE)
    attn = resp.attention.scores
    assert attn.shape == (1, 1, 10)
    assert np.all(attn >= 0)
    assert attn.sum() == pytest.approx(1.0, abs=1e-9)


def test_analytic_meanpool_matches_hand_value(oracle):
    # half background, half class 0: class-0 logit is beta/2
    v0 = class_directions(C, D)[0]
    bg = background_direction(C, D)
    resp = oracle.first_step_logits(VisualInput(np.vstack([v0, bg])), PromptKind.DESCRIBE_IMAGE)
    np.testing.assert_allclose(
        resp.logits.values, [BETA / 2, 0.0, 0.0, 0.0, 0.0], atol=1e-12
    )


def test_query_count_increments(oracle):
    before = oracle.query_count
    oracle.first_step_logits(
        VisualInput(np.zeros((1, D))), PromptKind.DESCRIBE_IMAGE
    )
    assert oracle.query_count == before + 1


def test_build_single_token_input_repeat_and_newline():
    v = np.ones(8)
    caps = OracleCapabilities(
        repeat_for_single_input=True, uses_image_newline=True, vocab_size=64, embed_dim=8
    )
    vi = build_single_token_input(v, caps, reference_length=576)
    assert vi.tokens.shape == (24, 8)
    assert vi.newline_after == (23,)
    assert np.all(vi.tokens == 1.0)

    plain = OracleCapabilities(vocab_size=64, embed_dim=8)
    vi2 = build_single_token_input(v, plain, reference_length=576)
    assert vi2.tokens.shape == (1, 8)
    assert vi2.newline_after == ()

    # non-square reference length rounds the row width up
    caps2 = OracleCapabilities(repeat_for_single_input=True, vocab_size=64, embed_dim=8)
    assert build_single_token_input(v, caps2, 10).tokens.shape == (4, 8)
    with pytest.raises(InvalidInput):
        build_single_token_input(v, caps, 0)


def test_grid_visual_input_newline_rule():
    tokens = np.arange(18, dtype=float).reshape(9, 2)
    vi = grid_visual_input(tokens, (3, 3), use_newline=True)
    assert vi.newline_after == (2, 5, 8)
    assert vi.grid == (3, 3)
    # subset: newline trails the last survivor of each original row
    vi2 = grid_visual_input(tokens, (3, 3), use_newline=True, keep=np.array([0, 1, 5]))
    assert vi2.newline_after == (1, 2)
    assert vi2.grid is None
    np.testing.assert_array_equal(vi2.tokens, tokens[[0, 1, 5]])
    with pytest.raises(InvalidInput):
        grid_visual_input(tokens, (3, 3), False, keep=np.array([5, 0]))
    with pytest.raises(ShapeError):
        grid_visual_input(tokens, (4, 3), False)


def test_visual_input_validation():
    with pytest.raises(ShapeError):
        VisualInput(np.zeros((0, 4)))
    with pytest.raises(InvalidInput):
        VisualInput(np.zeros((2, 4)), newline_after=(5,))
    with pytest.raises(ShapeError):
        VisualInput(np.zeros((6, 4)), grid=(2, 2))


def test_request_key_validation():
    k = RequestKey("img0", "region_src", 4, region=(np.int64(1), np.int64(2)))
    assert k.region == (1, 2) and isinstance(k.region[0], int)
    with pytest.raises(InvalidInput):
        RequestKey("img0", "bogus")
