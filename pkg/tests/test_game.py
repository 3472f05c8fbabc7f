"""Episode scoring: penalties, cutoffs, records, and their JSONL form."""

import math

import numpy as np
import pytest
import torch

from refgame.agents import CopySpeaker, OracleListener, Speaker
from refgame.game import (
    BottleneckSpec,
    apply_cutoff,
    episode_to_dict,
    load_episode_dicts,
    penalty_length,
    penalty_surprisal,
    play_episode,
    play_episodes,
    record_from_dict,
    score,
    write_episodes,
)
from refgame.lm import DecodeConfig, PolicyModel

from conftest import DESK_DECODE, make_speaker, seeded_rng


@pytest.fixture(scope="module")
def uniform_listener(world, model_config, vocab):
    """Oracle reader whose surprisal meter is an untrained (exactly
    uniform) language model."""
    return OracleListener(world, lm_model=PolicyModel(model_config, seed=0),
                          lm_vocab=vocab)


def test_bottleneck_spec_validation():
    BottleneckSpec()  # defaults are legal
    BottleneckSpec(kind="length", mode="cutoff", weight=0.0, cutoff_budget=5)
    with pytest.raises(ValueError):
        BottleneckSpec(kind="entropy")
    with pytest.raises(ValueError):
        BottleneckSpec(kind="length", mode="soft")
    with pytest.raises(ValueError):
        BottleneckSpec(kind="length", weight=1.5)
    with pytest.raises(ValueError):
        BottleneckSpec(kind="none", weight=0.5)
    with pytest.raises(ValueError):
        BottleneckSpec(kind="none", mode="cutoff", cutoff_budget=5)
    with pytest.raises(ValueError):
        BottleneckSpec(kind="length", mode="cutoff", cutoff_budget=0)
    with pytest.raises(ValueError):
        BottleneckSpec(kind="length", mode="cutoff", weight=0.3, cutoff_budget=5)


def test_score_endpoints_and_linearity():
    rng = seeded_rng("score", 0)
    for _ in range(200):
        r, p = rng.uniform(0, 1), rng.uniform(0, 3)
        assert score(r, p, 0.0) == r
        assert score(r, p, 1.0) == -p
        lam = rng.uniform(0, 1)
        expected = (1 - lam) * r - lam * p
        assert score(r, p, lam) == pytest.approx(expected, rel=1e-15)
    with pytest.raises(ValueError):
        score(0.5, 0.5, -0.1)
    with pytest.raises(ValueError):
        score(0.5, 0.5, 1.1)


def test_penalty_length_ratio():
    ctx = ("a",) * 8
    assert penalty_length(("x", "y"), ctx) == 0.25
    assert penalty_length((), ctx) == 0.0
    assert penalty_length(("x",) * 12, ctx) == 1.5  # longer than source: unclipped
    with pytest.raises(ValueError):
        penalty_length(("x",), ())


def test_penalty_surprisal_uniform_model_reduces_to_length(uniform_listener,
                                                           train_set):
    """With a uniform language model every token costs the same number of
    nats, so the surprisal ratio must equal the token-count ratio."""
    for i, ex in enumerate(train_set[:10]):
        summary = ex.passage[: 2 + i % 5]
        got = penalty_surprisal(summary, ex.passage, uniform_listener)
        want = penalty_length(summary, ex.passage)
        assert got == pytest.approx(want, rel=1e-12)


def test_penalty_surprisal_empty_cases(uniform_listener):
    ctx = ("the", "age", "of")
    assert penalty_surprisal((), ctx, uniform_listener) == 0.0
    with pytest.raises(ValueError):
        penalty_surprisal(("the",), (), uniform_listener)


def test_apply_cutoff_length():
    spec = BottleneckSpec(kind="length", mode="cutoff", cutoff_budget=3.7)
    assert apply_cutoff(("a", "b", "c", "d", "e"), spec, None) == ("a", "b", "c")
    assert apply_cutoff(("a",), spec, None) == ("a",)
    with pytest.raises(ValueError):
        apply_cutoff(("a",), BottleneckSpec(kind="length", weight=0.5), None)


def test_apply_cutoff_surprisal_uniform_counts_tokens(uniform_listener, vocab):
    """Uniform per-token cost log|V| makes the nat budget an exact token
    budget, which pins down the greedy prefix rule."""
    unit = math.log(len(vocab))
    summary = ("the", "age", "of", "mona", "is")
    for k in range(len(summary) + 1):
        spec = BottleneckSpec(kind="surprisal", mode="cutoff",
                              cutoff_budget=k * unit + 1e-9)
        assert apply_cutoff(summary, spec, uniform_listener) == summary[:k]
    tight = BottleneckSpec(kind="surprisal", mode="cutoff", cutoff_budget=unit / 2)
    assert apply_cutoff(summary, tight, uniform_listener) == ()


def test_copy_speaker_oracle_scores_one(world, train_set, stopwords, grammar,
                                        oracle_listener):
    spec = BottleneckSpec(kind="length", mode="penalty", weight=0.0)
    _, records = play_episodes(CopySpeaker(), oracle_listener, train_set[:12],
                               spec, None, stopwords, grammar)
    for rec, ex in zip(records, train_set[:12]):
        assert rec.summary == ex.passage
        assert rec.predicted_answer == ex.gold_answer
        assert rec.reward == 1.0
        assert rec.penalty == 1.0  # summary is the whole passage
        assert rec.score == 1.0  # lambda 0: reward only
        assert rec.summary_logprobs == ()
        assert rec.grammatical_error_rate == 0.0
        assert rec.metric_report.rouge_l_f1 == 1.0


def test_lambda_one_score_is_negative_penalty(train_set, stopwords, grammar,
                                              oracle_listener):
    spec = BottleneckSpec(kind="length", mode="penalty", weight=1.0)
    _, records = play_episodes(CopySpeaker(), oracle_listener, train_set[:6],
                               spec, None, stopwords, grammar)
    for rec in records:
        assert rec.score == -rec.penalty


def test_cutoff_mode_score_is_raw_reward(train_set, stopwords, grammar,
                                         oracle_listener):
    spec = BottleneckSpec(kind="length", mode="cutoff", cutoff_budget=3)
    _, records = play_episodes(CopySpeaker(), oracle_listener, train_set[:8],
                               spec, None, stopwords, grammar)
    for rec, ex in zip(records, train_set[:8]):
        assert rec.summary == ex.passage[:3]
        assert rec.score == rec.reward
        # penalty is measured on what the listener actually read
        assert rec.penalty == 3 / len(ex.passage)


def test_surprisal_fields_only_for_surprisal_kind(train_set, stopwords, grammar,
                                                  uniform_listener):
    length_spec = BottleneckSpec(kind="length", mode="penalty", weight=0.5)
    _, recs = play_episodes(CopySpeaker(), uniform_listener, train_set[:3],
                            length_spec, None, stopwords, grammar)
    assert all(r.surprisal_summary is None for r in recs)
    surp_spec = BottleneckSpec(kind="surprisal", mode="penalty", weight=0.5)
    _, recs = play_episodes(CopySpeaker(), uniform_listener, train_set[:3],
                            surp_spec, None, stopwords, grammar)
    for r in recs:
        assert r.surprisal_summary is not None and r.surprisal_context > 0
        assert r.penalty == pytest.approx(
            r.surprisal_summary / r.surprisal_context, rel=1e-12)


def test_play_episode_deterministic(pretrained_model, vocab, train_set,
                                    stopwords, grammar, oracle_listener):
    speaker = make_speaker(pretrained_model, vocab, seed=4)
    spec = BottleneckSpec(kind="length", mode="penalty", weight=0.3)
    a = play_episode(speaker, oracle_listener, train_set[0], spec, 11,
                     stopwords, grammar)
    b = play_episode(speaker, oracle_listener, train_set[0], spec, 11,
                     stopwords, grammar)
    assert a == b
    seeds_differ = any(
        play_episode(speaker, oracle_listener, train_set[0], spec, s,
                     stopwords, grammar).summary != a.summary
        for s in (12, 13, 14))
    assert seeds_differ


def test_policy_speaker_records_logprobs(pretrained_model, vocab, train_set,
                                         stopwords, grammar, oracle_listener):
    speaker = make_speaker(pretrained_model, vocab, seed=4)
    spec = BottleneckSpec(kind="length", mode="penalty", weight=0.0)
    gen = torch.Generator().manual_seed(2)
    result, records = play_episodes(speaker, oracle_listener, train_set[:5],
                                    spec, gen, stopwords, grammar)
    assert result is not None and result.n_rows() == 5
    for rec in records:
        # one action per kept token, plus <eos> when generation terminated
        assert len(rec.summary) <= len(rec.summary_logprobs) <= len(rec.summary) + 1
        assert all(lp <= 0.0 for lp in rec.summary_logprobs)


def test_episode_jsonl_round_trip(tmp_path, pretrained_model, vocab, train_set,
                                  stopwords, grammar, uniform_listener):
    speaker = make_speaker(pretrained_model, vocab, seed=9)
    spec = BottleneckSpec(kind="surprisal", mode="penalty", weight=0.5)
    gen = torch.Generator().manual_seed(6)
    _, records = play_episodes(speaker, uniform_listener, train_set[:6], spec,
                               gen, stopwords, grammar)
    path = tmp_path / "episodes.jsonl"
    write_episodes(path, records)
    dicts = load_episode_dicts(path)
    assert [record_from_dict(d) for d in dicts] == records
    # appending extends rather than truncates
    write_episodes(path, records[:2], append=True)
    assert len(load_episode_dicts(path)) == 8


def test_episode_dict_shape(train_set, stopwords, grammar, oracle_listener):
    spec = BottleneckSpec(kind="length", mode="penalty", weight=0.1)
    rec = play_episode(CopySpeaker(), oracle_listener, train_set[0], spec, 0,
                       stopwords, grammar)
    d = episode_to_dict(rec)
    assert d["lambda"] == 0.1
    assert d["bottleneck"]["kind"] == "length"
    assert isinstance(d["passage"], str) and isinstance(d["summary"], str)
    assert set(d["metric_report"]) == {
        "rouge_l_f1", "bleu", "edit_distance_norm", "function_word_fraction",
        "mean_sentence_length_tokens", "mean_word_length_chars", "token_count"}
    assert d["score"] == pytest.approx(0.9 * d["reward"] - 0.1 * d["penalty"])


def test_short_speaker_budget_lowers_penalty(pretrained_model, vocab, train_set,
                                             stopwords, grammar,
                                             oracle_listener):
    """A speaker capped at very few tokens must produce lower length
    penalties than one allowed to run long."""
    short_cfg = DecodeConfig(max_new_tokens=3, min_length=1, top_k=50,
                             top_p=0.95, epsilon_cutoff=0.0, seed=0)
    long_cfg = DecodeConfig(max_new_tokens=24, min_length=12, top_k=50,
                            top_p=0.95, epsilon_cutoff=0.0, seed=0)
    spec = BottleneckSpec(kind="length", mode="penalty", weight=0.5)
    pens = {}
    for name, cfg in (("short", short_cfg), ("long", long_cfg)):
        speaker = Speaker(model=pretrained_model, vocab=vocab, decode=cfg)
        gen = torch.Generator().manual_seed(3)
        _, recs = play_episodes(speaker, oracle_listener, train_set[:16], spec,
                                gen, stopwords, grammar)
        pens[name] = np.mean([r.penalty for r in recs])
    assert pens["short"] < pens["long"]
