"""PPO machinery: statistics, rollouts, updates, alternation."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from refgame.agents import CopySpeaker
from refgame.corpus import pretraining_corpus
from refgame.game import BottleneckSpec
from refgame.lm import PretrainConfig, clone_model, fingerprint, pretrain_lm
from refgame.rl import (
    RUN_LOG_COLUMNS,
    AdaptiveKLController,
    AlternationSchedule,
    PPOConfig,
    RunningStats,
    TrainState,
    collect_rollouts,
    normalize_scores,
    ppo_update,
    surrogate_loss,
    train,
    train_mixed,
)

from conftest import make_speaker, seeded_rng

LENGTH0 = BottleneckSpec(kind="length", mode="penalty", weight=0.0)
TINY_PPO = PPOConfig(learning_rate=1e-3, ppo_epochs=2, minibatch_size=4,
                     batch_size=8, kl_coefficient=0.1, total_steps=3, seed=23)


@pytest.fixture()
def rollout_env(pretrained_model, vocab, oracle_listener, train_set, stopwords,
                grammar):
    speaker = make_speaker(pretrained_model, vocab, seed=6)
    ref = clone_model(speaker.model)
    return dict(speaker=speaker, listener=oracle_listener, dataset=train_set,
                ref=ref, stopwords=stopwords, grammar=grammar)


def _collect(env, cfg, seed=5, kl_coefficient=0.1, stats=None):
    return collect_rollouts(
        env["speaker"], env["listener"], env["dataset"], LENGTH0, cfg, seed,
        stats if stats is not None else RunningStats(), kl_coefficient,
        env["ref"], env["stopwords"], env["grammar"])


def test_ppo_config_validation():
    with pytest.raises(ValueError):
        PPOConfig(minibatch_size=5, batch_size=8)
    with pytest.raises(ValueError):
        PPOConfig(clip_range=0.0)
    with pytest.raises(ValueError):
        PPOConfig(ppo_epochs=0)
    with pytest.raises(ValueError):
        PPOConfig(total_steps=-1)
    with pytest.raises(ValueError):
        PPOConfig(kl_coefficient=-0.1)


def test_running_stats_matches_numpy():
    rng = seeded_rng("running_stats")
    stats = RunningStats()
    seen = []
    for _ in range(10):
        chunk = rng.normal(loc=3.0, scale=2.0, size=rng.integers(1, 50)).tolist()
        stats.update(chunk)
        seen.extend(chunk)
        assert stats.mean == pytest.approx(np.mean(seen), rel=1e-12)
        assert stats.std == pytest.approx(np.std(seen), rel=1e-12)
    restored = RunningStats.from_dict(stats.to_dict())
    assert (restored.count, restored.mean, restored.m2) == \
        (stats.count, stats.mean, stats.m2)


def test_normalize_scores_modes():
    scores = torch.tensor([1.0, 2.0, 3.0, 6.0], dtype=torch.float64)
    base = PPOConfig(minibatch_size=4, batch_size=8)

    cfg = dataclasses.replace(base, use_score_normalization=False,
                              use_score_scaling=False)
    out = normalize_scores(scores.clone(), RunningStats(), cfg)
    assert torch.equal(out, scores)

    cfg = dataclasses.replace(base, use_score_normalization=False,
                              use_score_scaling=True)
    out = normalize_scores(scores.clone(), RunningStats(), cfg)
    assert torch.allclose(out, scores / np.std([1, 2, 3, 6]), rtol=1e-12)

    cfg = dataclasses.replace(base, use_score_normalization=True)
    stats = RunningStats()
    out = normalize_scores(scores.clone(), stats, cfg)
    assert torch.allclose(out, (scores - 3.0) / np.std([1, 2, 3, 6]), rtol=1e-12)
    assert stats.count == 4  # batch entered the running stream first

    # constant stream: degenerate std treated as 1
    out = normalize_scores(torch.full((3,), 2.5, dtype=torch.float64),
                           RunningStats(), cfg)
    assert torch.equal(out, torch.zeros(3, dtype=torch.float64))


def test_normalization_uses_history():
    cfg = PPOConfig(minibatch_size=4, batch_size=8)
    stats = RunningStats()
    normalize_scores(torch.tensor([0.0, 10.0], dtype=torch.float64), stats, cfg)
    out = normalize_scores(torch.tensor([5.0], dtype=torch.float64), stats, cfg)
    # mean of {0, 10, 5} is 5, so the new score sits exactly at the mean
    assert out.item() == 0.0


def test_adaptive_kl_controller():
    ctl = AdaptiveKLController(initial=0.2, target=6.0, horizon=10_000)
    ctl.update(current_kl=6.0, batch_size=256)  # on target: no change
    assert ctl.value == 0.2
    ctl.update(current_kl=60.0, batch_size=256)  # way above: clipped +20%
    assert ctl.value == pytest.approx(0.2 * (1 + 0.2 * 256 / 10_000))
    up = ctl.value
    ctl.update(current_kl=0.0, batch_size=256)  # way below: clipped -20%
    assert ctl.value == pytest.approx(up * (1 - 0.2 * 256 / 10_000))
    down = ctl.value
    ctl.update(current_kl=6.6, batch_size=100)  # 10% above, inside the clip
    assert ctl.value == pytest.approx(down * (1 + 0.1 * 100 / 10_000))


def test_collect_rollouts_shapes_and_returns(rollout_env):
    cfg = dataclasses.replace(TINY_PPO, batch_size=8)
    # nudge the reference away from the policy so KL shaping is nonzero and
    # the suffix-sum check below exercises the full reward structure
    gen = torch.Generator().manual_seed(77)
    with torch.no_grad():
        for p in rollout_env["ref"].parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    batch = _collect(rollout_env, cfg, seed=5)
    assert batch.mean_sequence_kl() != 0.0
    mask = batch.gen_mask
    assert batch.old_logprobs.shape == mask.shape
    assert batch.raw_scores.shape == (8,)

    # returns are suffix sums of (KL shaping + terminal score); check a
    # brute-force recomputation per row
    rewards = -0.1 * batch.kl_per_token.clone()
    lengths = mask.sum(dim=1)
    for i in range(8):
        L = int(lengths[i])
        assert L >= 1
        rewards[i, L - 1] += batch.shaped_scores[i]
        for t in range(mask.shape[1]):
            want = float(rewards[i, t:L].sum()) if t < L else 0.0
            assert float(batch.returns[i, t]) == pytest.approx(want, abs=1e-12)
    # advantage identity
    assert torch.allclose(batch.advantages, (batch.returns - batch.old_values) * mask)


def test_collect_rollouts_deterministic(rollout_env):
    a = _collect(rollout_env, TINY_PPO, seed=5)
    b = _collect(rollout_env, TINY_PPO, seed=5)
    assert torch.equal(a.result.input_ids, b.result.input_ids)
    assert torch.equal(a.old_logprobs, b.old_logprobs)
    assert [r.summary for r in a.records] == [r.summary for r in b.records]
    c = _collect(rollout_env, TINY_PPO, seed=6)
    assert not torch.equal(a.result.input_ids, c.result.input_ids)


def test_collect_rejects_non_policy(rollout_env):
    env = dict(rollout_env)
    env["speaker"] = CopySpeaker()
    with pytest.raises(ValueError, match="not a trainable policy"):
        _collect(env, TINY_PPO)


def test_kl_zero_against_identical_reference(rollout_env):
    """The reference starts as a copy of the speaker, so the first batch's
    KL must vanish and the shaped reward sits only on the final token."""
    batch = _collect(rollout_env, TINY_PPO, seed=7, kl_coefficient=0.3)
    assert batch.mean_sequence_kl() == pytest.approx(0.0, abs=1e-10)
    mask = batch.gen_mask
    lengths = mask.sum(dim=1)
    for i in range(batch.result.n_rows()):
        L = int(lengths[i])
        inner = batch.returns[i, :L]
        assert torch.allclose(inner, torch.full_like(inner, float(batch.shaped_scores[i])),
                              atol=1e-10)


def test_first_minibatch_ratio_is_one(rollout_env):
    batch = _collect(rollout_env, TINY_PPO, seed=9)
    rows = torch.arange(4)
    _, stats = surrogate_loss(rollout_env["speaker"].model, batch, TINY_PPO, rows)
    assert stats["max_ratio"] == pytest.approx(1.0, abs=1e-12)
    assert stats["clip_fraction"] == 0.0


def test_ppo_update_skips_above_ratio_threshold(rollout_env):
    # separate the reference from the policy: the KL shaping then gives
    # every token a nonzero reward, so advantages cannot collapse to zero
    # (a batch of all-equal scores normalizes to zero advantage, zero
    # gradient, and a legitimately unchanged model)
    gen = torch.Generator().manual_seed(3)
    with torch.no_grad():
        for p in rollout_env["ref"].parameters():
            p.add_(0.01 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    batch = _collect(rollout_env, TINY_PPO, seed=11)
    assert float(batch.advantages.abs().max()) > 0
    speaker = rollout_env["speaker"]
    before = fingerprint(speaker.model)
    cfg = dataclasses.replace(TINY_PPO, ratio_threshold=0.5)  # 1.0 > 0.5: all skip
    stats = ppo_update(speaker, batch, cfg, update_seed=1)
    assert stats["skipped_minibatches"] == cfg.ppo_epochs * (8 // 4)
    assert stats["applied_minibatches"] == 0
    assert fingerprint(speaker.model) == before  # nothing was applied

    # threshold far above any reachable ratio: no spurious skips
    permissive = dataclasses.replace(TINY_PPO, ratio_threshold=1e9)
    stats = ppo_update(speaker, batch, permissive, update_seed=1)
    assert stats["skipped_minibatches"] == 0
    assert stats["applied_minibatches"] == cfg.ppo_epochs * (8 // 4)
    assert fingerprint(speaker.model) != before


def test_train_zero_steps_no_op(rollout_env, train_set, stopwords, grammar):
    speaker = rollout_env["speaker"]
    before = fingerprint(speaker.model)
    cfg = dataclasses.replace(TINY_PPO, total_steps=0)
    rows = train(speaker, rollout_env["listener"], train_set, LENGTH0, cfg,
                 stopwords, grammar)
    assert rows == []
    assert fingerprint(speaker.model) == before


def test_train_keeps_listener_and_reference_frozen(rollout_env, train_set,
                                                   stopwords, grammar):
    speaker = rollout_env["speaker"]
    ref = rollout_env["ref"]
    listener_before = rollout_env["listener"].fingerprint()
    ref_before = fingerprint(ref)
    rows = train(speaker, rollout_env["listener"], train_set, LENGTH0,
                 TINY_PPO, stopwords, grammar, ref_model=ref)
    assert len(rows) == TINY_PPO.total_steps
    assert rollout_env["listener"].fingerprint() == listener_before
    assert fingerprint(ref) == ref_before
    for row in rows:
        assert tuple(row) == RUN_LOG_COLUMNS
        assert math.isfinite(row["mean_reward"])


def test_train_bit_reproducible(rollout_env, train_set, stopwords, grammar,
                                pretrained_model, vocab):
    logs = []
    for _ in range(2):
        speaker = make_speaker(pretrained_model, vocab, seed=6)
        logs.append(train(speaker, rollout_env["listener"], train_set, LENGTH0,
                          TINY_PPO, stopwords, grammar))
    assert logs[0] == logs[1]


def test_train_resume_matches_uninterrupted(rollout_env, train_set, stopwords,
                                            grammar, pretrained_model, vocab):
    """Stopping after step 1 and resuming from the saved state replays the
    same remaining rollouts (optimizer moments restart, so updates match
    only when each step applies no more than one optimizer step... use
    ratio_threshold to skip every update and isolate the data path)."""
    cfg = dataclasses.replace(TINY_PPO, total_steps=3, ratio_threshold=1e-9)

    speaker_a = make_speaker(pretrained_model, vocab, seed=6)
    full = train(speaker_a, rollout_env["listener"], train_set, LENGTH0, cfg,
                 stopwords, grammar)

    speaker_b = make_speaker(pretrained_model, vocab, seed=6)
    ref = clone_model(speaker_b.model)
    state = TrainState()
    first = train(speaker_b, rollout_env["listener"], train_set, LENGTH0,
                  dataclasses.replace(cfg, total_steps=1), stopwords, grammar,
                  ref_model=ref, state=state)
    rest = train(speaker_b, rollout_env["listener"], train_set, LENGTH0, cfg,
                 stopwords, grammar, ref_model=ref, state=state)
    resumed = first + rest
    assert [r["step"] for r in resumed] == [0, 1, 2]
    assert resumed == full


def test_train_mixed_lm_only_equals_pretrain(pretrained_model, vocab,
                                             oracle_listener, train_set,
                                             stopwords, grammar):
    corpus = pretraining_corpus(train_set[:32], seed=1)
    pre_cfg = PretrainConfig(steps=6, batch_size=4, learning_rate=1e-3, seed=2)

    speaker = make_speaker(pretrained_model, vocab, seed=0)
    plain_model = clone_model(speaker.model)
    plain_losses = pretrain_lm(plain_model, vocab, corpus, pre_cfg)

    out = train_mixed(speaker, corpus, oracle_listener, train_set, LENGTH0,
                      dataclasses.replace(TINY_PPO, total_steps=0), pre_cfg,
                      AlternationSchedule(lm_steps=2, game_steps=0),
                      stopwords, grammar)
    assert out["run_log"] == []
    assert out["lm_losses"] == plain_losses
    assert fingerprint(speaker.model) == fingerprint(plain_model)


def test_train_mixed_interleaves(pretrained_model, vocab, oracle_listener,
                                 train_set, stopwords, grammar):
    corpus = pretraining_corpus(train_set[:32], seed=1)
    pre_cfg = PretrainConfig(steps=4, batch_size=4, learning_rate=1e-4, seed=2)
    speaker = make_speaker(pretrained_model, vocab, seed=0)
    out = train_mixed(speaker, corpus, oracle_listener, train_set, LENGTH0,
                      dataclasses.replace(TINY_PPO, total_steps=2), pre_cfg,
                      AlternationSchedule(lm_steps=2, game_steps=1),
                      stopwords, grammar)
    assert len(out["lm_losses"]) == 4
    assert len(out["run_log"]) == 2
    assert [r["step"] for r in out["run_log"]] == [0, 1]


def test_alternation_schedule_validation():
    with pytest.raises(ValueError):
        AlternationSchedule(lm_steps=0, game_steps=0)
    with pytest.raises(ValueError):
        AlternationSchedule(lm_steps=-1, game_steps=1)


def test_train_state_round_trip():
    stats = RunningStats()
    stats.update([0.25, 0.5])
    state = TrainState(step=7, kl_coefficient=0.125, running_stats=stats)
    restored = TrainState.from_dict(state.to_dict())
    assert restored.step == 7
    assert restored.kl_coefficient == 0.125
    assert restored.running_stats.to_dict() == stats.to_dict()
