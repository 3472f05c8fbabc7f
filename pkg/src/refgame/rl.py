"""PPO training of the speaker on episode scores.

The reward structure follows the usual RLHF shape: the episode's shaped
score lands on the final sampled action (the end token when one was
emitted), every action additionally pays a per-token KL penalty to the
frozen pretraining reference policy, returns are undiscounted
returns-to-go, and advantages subtract the rollout-time value baseline.
Generalized advantage estimation is off and advantages are not whitened —
there is a single terminal reward, so neither buys anything.

Two things are easy to get wrong and are handled explicitly here:

* log-probabilities (old, new, and reference) are always taken from the
  renormalized distribution over the support set the sampler stored, so
  the ratio compares like with like even under aggressive top-k/top-p/
  epsilon filtering;
* the value head is detached from the trunk (lm module contract), so value
  regression cannot move the policy.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .agents import Speaker
from .corpus import Grammar, QAExample
from .game import BottleneckSpec, EpisodeRecord, play_episodes
from .lm import (
    GenerationResult,
    PolicyModel,
    clone_model,
    pretrain_lm,
    renormalized_logprobs,
)

RUN_LOG_COLUMNS = (
    "step", "mean_reward", "mean_penalty", "mean_score", "bleu",
    "edit_distance_norm", "function_word_fraction", "mean_sentence_length",
    "mean_word_length", "grammatical_error_rate", "kl", "clip_fraction",
    "skipped_minibatches",
)


class NonFiniteLossError(RuntimeError):
    """Raised when an update produces a non-finite loss; carries the
    offending minibatch for post-mortem."""

    def __init__(self, message: str, dump: dict):
        super().__init__(message)
        self.dump = dump


@dataclass(frozen=True)
class PPOConfig:
    learning_rate: float = 1.41e-5
    ppo_epochs: int = 4
    minibatch_size: int = 64
    batch_size: int = 512
    clip_range: float = 0.2
    ratio_threshold: float = 10.0
    kl_coefficient: float = 0.2
    kl_target: float = 6.0
    kl_horizon: int = 10_000
    use_score_normalization: bool = True
    use_score_scaling: bool = True
    vf_coef: float = 0.1
    grad_clip: float = 0.0
    total_steps: int = 240
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.minibatch_size < 1:
            raise ValueError("batch_size and minibatch_size must be >= 1")
        if self.batch_size % self.minibatch_size != 0:
            raise ValueError("minibatch_size must divide batch_size")
        if self.clip_range <= 0:
            raise ValueError("clip_range must be positive")
        if self.ppo_epochs < 1:
            raise ValueError("ppo_epochs must be >= 1")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")
        if self.kl_coefficient < 0:
            raise ValueError("kl_coefficient must be >= 0")


class RunningStats:
    """Welford online mean/std over all scores seen so far.

    Population standard deviation; checkpointable via to_dict/from_dict so
    resumed runs continue the same stream.
    """

    def __init__(self, count: int = 0, mean: float = 0.0, m2: float = 0.0):
        self.count = count
        self.mean = mean
        self.m2 = m2

    def update(self, values: Sequence[float]) -> None:
        for x in values:
            self.count += 1
            delta = x - self.mean
            self.mean += delta / self.count
            self.m2 += delta * (x - self.mean)

    @property
    def std(self) -> float:
        if self.count == 0:
            return 0.0
        return math.sqrt(self.m2 / self.count)

    def to_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    @classmethod
    def from_dict(cls, payload: dict) -> "RunningStats":
        return cls(int(payload["count"]), float(payload["mean"]), float(payload["m2"]))


def normalize_scores(scores: torch.Tensor, running_stats: RunningStats,
                     cfg: PPOConfig) -> torch.Tensor:
    """Shape raw scores with running statistics (updated with this batch first).

    Scaling divides by the running standard deviation; normalization
    additionally subtracts the running mean. A degenerate std below 1e-8
    acts as 1 so constant scores do not explode.
    """
    running_stats.update([float(x) for x in scores])
    std = running_stats.std
    if std < 1e-8:
        std = 1.0
    if cfg.use_score_normalization:
        return (scores - running_stats.mean) / std
    if cfg.use_score_scaling:
        return scores / std
    return scores


class AdaptiveKLController:
    """Proportional controller nudging the KL coefficient toward a target
    mean sequence KL: err = clip(kl/target - 1, ±0.2); coef *= 1 + err·n/horizon."""

    def __init__(self, initial: float, target: float, horizon: int):
        self.value = initial
        self.target = target
        self.horizon = horizon

    def update(self, current_kl: float, batch_size: int) -> None:
        err = min(max(current_kl / self.target - 1.0, -0.2), 0.2)
        self.value *= 1.0 + err * batch_size / self.horizon


@dataclass
class RolloutBatch:
    """A frozen batch of episodes with everything PPO needs.

    All per-token tensors are [batch, max_new_tokens] float64, masked by
    ``gen_mask``. ``old_logprobs`` and ``old_values`` were captured under
    the behavior policy; ``advantages`` and ``returns`` are fixed at
    collection time (advantage = return-to-go minus rollout value).
    """

    result: GenerationResult
    records: list[EpisodeRecord]
    temperature: float
    raw_scores: torch.Tensor
    shaped_scores: torch.Tensor
    old_logprobs: torch.Tensor
    ref_logprobs: torch.Tensor
    old_values: torch.Tensor
    kl_per_token: torch.Tensor
    returns: torch.Tensor
    advantages: torch.Tensor
    score_mean: float
    score_std: float

    @property
    def gen_mask(self) -> torch.Tensor:
        return self.result.gen_mask

    def mean_sequence_kl(self) -> float:
        per_seq = (self.kl_per_token * self.gen_mask).sum(dim=1)
        return float(per_seq.mean())


def action_logprobs_and_values(
    model: PolicyModel, result: GenerationResult, temperature: float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-action log-probabilities (over the stored supports) and values.

    Differentiable; the action at generation step t is predicted from the
    full-sequence position prompt_len + t - 1.
    """
    logits, values = model(result.input_ids, attention_mask=result.attention_mask)
    p, t = result.prompt_len, result.actions.shape[1]
    step_logits = logits[:, p - 1 : p - 1 + t, :]
    # Dead steps have all-False support; give them a dummy full support so
    # the log-softmax stays finite (they are masked out of every loss).
    support = result.support | ~result.gen_mask.unsqueeze(-1)
    logprobs = renormalized_logprobs(step_logits, support, temperature)
    picked = logprobs.gather(2, result.actions.unsqueeze(2)).squeeze(2)
    picked = picked * result.gen_mask
    step_values = values[:, p - 1 : p - 1 + t] * result.gen_mask
    return picked, step_values


def collect_rollouts(
    speaker: Speaker, listener, dataset: Sequence[QAExample],
    bottleneck: BottleneckSpec, cfg: PPOConfig, seed: int,
    running_stats: RunningStats, kl_coefficient: float,
    ref_model: PolicyModel, stopwords: frozenset, grammar: Grammar,
) -> RolloutBatch:
    """Sample a batch of episodes (with replacement) and fix its targets."""
    if cfg.batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not dataset:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    idx = rng.integers(len(dataset), size=cfg.batch_size)
    examples = [dataset[int(i)] for i in idx]
    generator = torch.Generator().manual_seed(int(rng.integers(np.iinfo(np.int64).max)))
    result, records = play_episodes(
        speaker, listener, examples, bottleneck, generator, stopwords, grammar)
    if result is None:
        raise ValueError("speaker is not a trainable policy")

    raw_scores = torch.tensor([r.score for r in records], dtype=torch.float64)
    shaped = normalize_scores(raw_scores, running_stats, cfg)

    with torch.no_grad():
        old_logprobs, old_values = action_logprobs_and_values(
            speaker.model, result, speaker.decode.temperature)
        ref_logprobs, _ = action_logprobs_and_values(
            ref_model, result, speaker.decode.temperature)

    mask = result.gen_mask
    kl_per_token = (old_logprobs - ref_logprobs) * mask
    rewards = -kl_coefficient * kl_per_token
    lengths = mask.sum(dim=1)
    for i in range(rewards.shape[0]):
        if lengths[i] > 0:
            rewards[i, int(lengths[i]) - 1] += shaped[i]
    returns = torch.flip(torch.cumsum(torch.flip(rewards, [1]), dim=1), [1]) * mask
    advantages = (returns - old_values) * mask
    return RolloutBatch(
        result=result,
        records=records,
        temperature=speaker.decode.temperature,
        raw_scores=raw_scores,
        shaped_scores=shaped,
        old_logprobs=old_logprobs,
        ref_logprobs=ref_logprobs,
        old_values=old_values,
        kl_per_token=kl_per_token,
        returns=returns,
        advantages=advantages,
        score_mean=float(raw_scores.mean()),
        score_std=float(raw_scores.std(unbiased=False)),
    )


def surrogate_loss(
    model: PolicyModel, batch: RolloutBatch, cfg: PPOConfig,
    rows: torch.Tensor,
) -> tuple[torch.Tensor, dict]:
    """Clipped-surrogate + value loss for a subset of episodes.

    Returns the differentiable loss and diagnostics (max ratio, clip
    fraction, loss components). Maximizing min(r·A, clip(r)·A) appears
    here as minimizing its negation.
    """
    sub = batch.result.select(rows)
    new_logprobs, new_values = action_logprobs_and_values(model, sub, batch.temperature)
    mask = sub.gen_mask
    n_tokens = mask.sum()
    old = batch.old_logprobs[rows]
    adv = batch.advantages[rows]
    ret = batch.returns[rows]
    ratio = torch.exp(torch.where(mask, new_logprobs - old, torch.zeros_like(old)))
    clipped = torch.clamp(ratio, 1.0 - cfg.clip_range, 1.0 + cfg.clip_range)
    per_token = -torch.min(ratio * adv, clipped * adv)
    policy_loss = (per_token * mask).sum() / n_tokens
    value_loss = 0.5 * (((new_values - ret) ** 2) * mask).sum() / n_tokens
    loss = policy_loss + cfg.vf_coef * value_loss
    clip_hits = ((ratio < 1.0 - cfg.clip_range) | (ratio > 1.0 + cfg.clip_range)) & mask
    stats = {
        "policy_loss": float(policy_loss.detach()),
        "value_loss": float(value_loss.detach()),
        "max_ratio": float(ratio.detach()[mask].max()) if n_tokens > 0 else 1.0,
        "clip_fraction": float(clip_hits.sum() / n_tokens) if n_tokens > 0 else 0.0,
    }
    return loss, stats


def ppo_update(
    speaker: Speaker, batch: RolloutBatch, cfg: PPOConfig,
    optimizer: torch.optim.Optimizer | None = None, update_seed: int = 0,
) -> dict:
    """Run ppo_epochs of shuffled minibatch updates on one rollout batch.

    A minibatch whose max probability ratio exceeds ratio_threshold is
    skipped (no step) and counted. Returns aggregate statistics including
    the batch's mean sequence KL to the reference policy.
    """
    if optimizer is None:
        optimizer = torch.optim.Adam(speaker.model.parameters(), lr=cfg.learning_rate)
    n = batch.result.n_rows()
    skipped = 0
    applied = 0
    policy_losses, value_losses, clip_fractions = [], [], []
    for epoch in range(cfg.ppo_epochs):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=update_seed, spawn_key=(epoch,)))
        order = rng.permutation(n)
        for lo in range(0, n, cfg.minibatch_size):
            rows = torch.tensor(order[lo : lo + cfg.minibatch_size], dtype=torch.long)
            loss, stats = surrogate_loss(speaker.model, batch, cfg, rows)
            if stats["max_ratio"] > cfg.ratio_threshold:
                skipped += 1
                continue
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite PPO loss (epoch {epoch})",
                    dump={"rows": rows.tolist(), "stats": stats,
                          "scores": batch.raw_scores[rows].tolist()},
                )
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(speaker.model.parameters(), cfg.grad_clip)
            optimizer.step()
            applied += 1
            policy_losses.append(stats["policy_loss"])
            value_losses.append(stats["value_loss"])
            clip_fractions.append(stats["clip_fraction"])
    return {
        "policy_loss": float(np.mean(policy_losses)) if policy_losses else 0.0,
        "value_loss": float(np.mean(value_losses)) if value_losses else 0.0,
        "clip_fraction": float(np.mean(clip_fractions)) if clip_fractions else 0.0,
        "skipped_minibatches": skipped,
        "applied_minibatches": applied,
        "mean_kl": batch.mean_sequence_kl(),
    }


def _mean(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def log_row(step: int, records: Sequence[EpisodeRecord], update_stats: dict) -> dict:
    reports = [r.metric_report for r in records]
    return {
        "step": step,
        "mean_reward": _mean([r.reward for r in records]),
        "mean_penalty": _mean([r.penalty for r in records]),
        "mean_score": _mean([r.score for r in records]),
        "bleu": _mean([m.bleu for m in reports]),
        "edit_distance_norm": _mean([m.edit_distance_norm for m in reports]),
        "function_word_fraction": _mean([m.function_word_fraction for m in reports]),
        "mean_sentence_length": _mean([m.mean_sentence_length_tokens for m in reports]),
        "mean_word_length": _mean([m.mean_word_length_chars for m in reports]),
        "grammatical_error_rate": _mean([r.grammatical_error_rate for r in records]),
        "kl": update_stats["mean_kl"],
        "clip_fraction": update_stats["clip_fraction"],
        "skipped_minibatches": update_stats["skipped_minibatches"],
    }


@dataclass
class TrainState:
    """Mutable cross-step state, restorable from a checkpoint."""

    step: int = 0
    kl_coefficient: float | None = None
    running_stats: RunningStats = field(default_factory=RunningStats)

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "kl_coefficient": self.kl_coefficient,
            "running_stats": self.running_stats.to_dict(),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainState":
        return cls(
            step=int(payload["step"]),
            kl_coefficient=payload["kl_coefficient"],
            running_stats=RunningStats.from_dict(payload["running_stats"]),
        )


def train(
    speaker: Speaker, listener, dataset: Sequence[QAExample],
    bottleneck: BottleneckSpec, cfg: PPOConfig, stopwords: frozenset,
    grammar: Grammar, ref_model: PolicyModel | None = None,
    state: TrainState | None = None,
    on_step: Callable[[dict, list[EpisodeRecord], TrainState], None] | None = None,
) -> list[dict]:
    """Run collect → normalize → update cycles; returns one log row per step.

    The reference policy defaults to a frozen copy of the speaker taken at
    entry. Step i derives all of its randomness from (cfg.seed, i), so a
    run is bit-reproducible and a resumed run continues exactly where it
    stopped (optimizer moments excepted — they restart on resume).
    """
    if ref_model is None:
        ref_model = clone_model(speaker.model)
    ref_model.eval()
    for p in ref_model.parameters():
        p.requires_grad_(False)
    if state is None:
        state = TrainState()
    if state.kl_coefficient is None:
        state.kl_coefficient = cfg.kl_coefficient
    kl_ctl = AdaptiveKLController(state.kl_coefficient, cfg.kl_target, cfg.kl_horizon)
    optimizer = torch.optim.Adam(speaker.model.parameters(), lr=cfg.learning_rate)
    rows = []
    for step in range(state.step, cfg.total_steps):
        step_seed = int(np.random.SeedSequence(
            entropy=cfg.seed, spawn_key=(step,)).generate_state(1, np.uint64)[0])
        batch = collect_rollouts(
            speaker, listener, dataset, bottleneck, cfg, step_seed,
            state.running_stats, kl_ctl.value, ref_model, stopwords, grammar)
        stats = ppo_update(speaker, batch, cfg, optimizer, update_seed=step_seed)
        kl_ctl.update(stats["mean_kl"], cfg.batch_size)
        state.step = step + 1
        state.kl_coefficient = kl_ctl.value
        row = log_row(step, batch.records, stats)
        rows.append(row)
        if on_step is not None:
            on_step(row, batch.records, state)
    return rows


@dataclass(frozen=True)
class AlternationSchedule:
    """Blocks of ``lm_steps`` next-token steps then ``game_steps`` PPO steps."""

    lm_steps: int = 1
    game_steps: int = 1

    def __post_init__(self):
        if self.lm_steps < 0 or self.game_steps < 0:
            raise ValueError("schedule steps must be >= 0")
        if self.lm_steps == 0 and self.game_steps == 0:
            raise ValueError("schedule must include at least one kind of step")


def train_mixed(
    speaker: Speaker, lm_corpus: Sequence[Sequence[str]], listener,
    dataset: Sequence[QAExample], bottleneck: BottleneckSpec,
    ppo_cfg: PPOConfig, pretrain_cfg, schedule: AlternationSchedule,
    stopwords: frozenset, grammar: Grammar,
    on_step: Callable[[dict, list[EpisodeRecord], TrainState], None] | None = None,
) -> dict:
    """Interleave next-token pretraining and game training per the schedule.

    Runs until both budgets (pretrain_cfg.steps language-model steps,
    ppo_cfg.total_steps game steps) are exhausted. With a (k, 0) schedule
    this degenerates to plain pretraining. Returns {"run_log": game rows,
    "lm_losses": per-LM-step losses}.
    """
    if not lm_corpus:
        raise ValueError("empty language-model corpus")
    if not dataset:
        raise ValueError("empty game dataset")
    ref_model = clone_model(speaker.model)
    ref_model.eval()
    for p in ref_model.parameters():
        p.requires_grad_(False)
    state = TrainState(kl_coefficient=ppo_cfg.kl_coefficient)
    kl_ctl = AdaptiveKLController(ppo_cfg.kl_coefficient, ppo_cfg.kl_target,
                                  ppo_cfg.kl_horizon)
    lm_optimizer = torch.optim.Adam(speaker.model.parameters(),
                                    lr=pretrain_cfg.learning_rate)
    game_optimizer = torch.optim.Adam(speaker.model.parameters(),
                                      lr=ppo_cfg.learning_rate)
    lm_done, game_done = 0, 0
    lm_losses: list[float] = []
    rows: list[dict] = []
    while lm_done < pretrain_cfg.steps or game_done < ppo_cfg.total_steps:
        progressed = False
        lm_chunk = min(schedule.lm_steps, pretrain_cfg.steps - lm_done)
        if lm_chunk > 0:
            chunk_cfg = dataclasses.replace(pretrain_cfg, steps=lm_done + lm_chunk)
            lm_losses.extend(pretrain_lm(
                speaker.model, speaker.vocab, lm_corpus, chunk_cfg,
                start_step=lm_done, optimizer=lm_optimizer))
            lm_done += lm_chunk
            progressed = True
        game_chunk = min(schedule.game_steps, ppo_cfg.total_steps - game_done)
        for _ in range(game_chunk):
            step_seed = int(np.random.SeedSequence(
                entropy=ppo_cfg.seed, spawn_key=(game_done,)).generate_state(1, np.uint64)[0])
            batch = collect_rollouts(
                speaker, listener, dataset, bottleneck, ppo_cfg, step_seed,
                state.running_stats, kl_ctl.value, ref_model, stopwords, grammar)
            stats = ppo_update(speaker, batch, ppo_cfg, game_optimizer,
                               update_seed=step_seed)
            kl_ctl.update(stats["mean_kl"], ppo_cfg.batch_size)
            row = log_row(game_done, batch.records, stats)
            rows.append(row)
            game_done += 1
            state.step = game_done
            state.kl_coefficient = kl_ctl.value
            progressed = True
            if on_step is not None:
                on_step(row, batch.records, state)
        if not progressed:
            raise RuntimeError("alternation schedule makes no progress")
    return {"run_log": rows, "lm_losses": lm_losses}
