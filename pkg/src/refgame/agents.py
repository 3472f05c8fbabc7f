"""Speaker and listener agents.

The speaker is a policy language model prompted with
``<bos> passage <sep>`` that samples a summary. Listeners answer a question
from the summary alone and never train during speaker optimization. Two
listeners are provided:

* ``OracleListener`` reads with fixed rules over the world's vocabulary
  (entity/attribute/value proximity), so reward is exact and free;
* ``LearnedListener`` is a question-answering fine-tune of a pretrained
  language model, greedy-decoded, with imperfections of its own.

Both expose ``answer_batch`` and a ``surprisal_of`` hook so the game can
price messages in nats under the listener's language model.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import QAExample, World, target_fact_index
from .lm import (
    DecodeConfig,
    GenerationResult,
    PolicyModel,
    Vocabulary,
    clone_model,
    fingerprint,
    generate_batch,
    load_checkpoint,
    save_checkpoint,
    surprisal,
    surprisal_batch,
    token_surprisals,
)
from .textmetrics import TokenSequence, split_sentences

logger = logging.getLogger(__name__)

UNKNOWN_ANSWER = ("unknown",)


@dataclass
class Speaker:
    """Policy model plus its decoding configuration."""

    model: PolicyModel
    vocab: Vocabulary
    decode: DecodeConfig

    def prompt_ids(self, passage: TokenSequence) -> list[int]:
        return [self.vocab.bos_id] + self.vocab.encode(passage) + [self.vocab.sep_id]

    def summarize(
        self, passages: Sequence[TokenSequence], generator: torch.Generator,
    ) -> tuple[GenerationResult, list[tuple[str, ...]]]:
        if any(len(p) == 0 for p in passages):
            raise ValueError("cannot summarize an empty passage")
        prompts = [self.prompt_ids(p) for p in passages]
        result = generate_batch(self.model, self.vocab, prompts, self.decode, generator)
        summaries = [result.generated_tokens(self.vocab, i) for i in range(result.n_rows())]
        return result, summaries


class CopySpeaker:
    """Diagnostic speaker that repeats the passage verbatim.

    Useful as an upper-reference point in evaluations; it is not a policy
    and cannot be trained.
    """

    def summarize(
        self, passages: Sequence[TokenSequence], generator: torch.Generator | None = None,
    ) -> tuple[None, list[tuple[str, ...]]]:
        return None, [tuple(p) for p in passages]


def _question_target(question: TokenSequence, entities: Sequence[str],
                     attributes: Sequence[str]) -> tuple[str, str] | None:
    entity = next((t for t in question if t in entities), None)
    attribute = next((t for t in question if t in attributes), None)
    if entity is None or attribute is None:
        return None
    return entity, attribute


class OracleListener:
    """Rule-based reader over the world's typed vocabulary.

    To answer "what is the <attribute> of <entity> ?" it considers every
    occurrence of the entity, requires an occurrence of the attribute word
    and of some value of that attribute's type, each within ``window``
    tokens of the entity, and picks the candidate minimizing the summed
    distances (ties broken by position). No candidate means "unknown".
    Function words play no role, so telegraphic messages stay readable.

    ``noise_rate`` optionally corrupts correct reads to a random other
    value of the same attribute; corruption is a pure function of the
    (summary, question) pair and ``noise_seed``.
    """

    def __init__(self, world: World, window: int = 6, noise_rate: float = 0.0,
                 noise_seed: int = 0, lm_model: PolicyModel | None = None,
                 lm_vocab: Vocabulary | None = None):
        if not 0.0 <= noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if window < 1:
            raise ValueError("window must be >= 1")
        self.world = world
        self.window = window
        self.noise_rate = noise_rate
        self.noise_seed = noise_seed
        # Freeze a private copy so attaching a live model never mutates it.
        self.lm_model = clone_model(lm_model) if lm_model is not None else None
        self.lm_vocab = lm_vocab
        if self.lm_model is not None:
            self.lm_model.eval()
            for p in self.lm_model.parameters():
                p.requires_grad_(False)

    def answer(self, summary: TokenSequence, question: TokenSequence) -> tuple[str, ...]:
        target = _question_target(question, self.world.all_entities(), self.world.attributes)
        if target is None:
            return UNKNOWN_ANSWER
        entity, attribute = target
        values = set(self.world.values[attribute])
        best: tuple[int, int, int, str] | None = None
        for i, tok in enumerate(summary):
            if tok != entity:
                continue
            attr_dists = [abs(j - i) for j, t in enumerate(summary)
                          if t == attribute and abs(j - i) <= self.window]
            if not attr_dists:
                continue
            d_attr = min(attr_dists)
            for k, t in enumerate(summary):
                if t in values and abs(k - i) <= self.window:
                    candidate = (d_attr + abs(k - i), i, k, t)
                    if best is None or candidate < best:
                        best = candidate
        if best is None:
            return UNKNOWN_ANSWER
        value = best[3]
        if self.noise_rate > 0.0:
            key = f"{self.noise_seed}|{' '.join(summary)}|{' '.join(question)}"
            digest = hashlib.sha256(key.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
            if rng.random() < self.noise_rate:
                others = [v for v in self.world.values[attribute] if v != value]
                if others:
                    value = others[int(rng.integers(len(others)))]
        return (value,)

    def answer_batch(self, summaries: Sequence[TokenSequence],
                     questions: Sequence[TokenSequence]) -> list[tuple[str, ...]]:
        return [self.answer(s, q) for s, q in zip(summaries, questions)]

    def surprisal_of(self, text: TokenSequence) -> float:
        if self.lm_model is None or self.lm_vocab is None:
            raise ValueError("this listener has no language model attached; "
                             "surprisal pricing needs one")
        return surprisal(self.lm_model, self.lm_vocab, text)

    def surprisal_batch_of(self, texts: Sequence[TokenSequence]) -> list[float]:
        if self.lm_model is None or self.lm_vocab is None:
            raise ValueError("this listener has no language model attached; "
                             "surprisal pricing needs one")
        return surprisal_batch(self.lm_model, self.lm_vocab, texts)

    def token_surprisals_of(self, text: TokenSequence) -> list[float]:
        if self.lm_model is None or self.lm_vocab is None:
            raise ValueError("this listener has no language model attached; "
                             "surprisal pricing needs one")
        return token_surprisals(self.lm_model, self.lm_vocab, text)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        rules = {
            "window": self.window,
            "noise_rate": self.noise_rate,
            "noise_seed": self.noise_seed,
            "entities": self.world.all_entities(),
            "attributes": self.world.attributes,
            "values": {k: list(v) for k, v in self.world.values.items()},
        }
        digest.update(json.dumps(rules, sort_keys=True).encode("utf-8"))
        if self.lm_model is not None:
            digest.update(fingerprint(self.lm_model).encode("utf-8"))
        return digest.hexdigest()


@dataclass(frozen=True)
class ListenerTrainConfig:
    """Question-answering fine-tune settings.

    Context augmentation probabilities must sum to 1: the question is paired
    with the full passage, just the answer token, the passage with stopwords
    stripped, or a random sentence subset that keeps the target sentence.
    The variety makes the reader robust to the compressed and degraded
    messages it will be scored on. ``prefix_loss_weight`` keeps plain
    language-modeling pressure on the context span so the model remains a
    usable surprisal meter.
    """

    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    grad_clip: float = 1.0
    prefix_loss_weight: float = 0.5
    max_answer_tokens: int = 4
    seed: int = 0
    p_full: float = 0.5
    p_answer_only: float = 0.15
    p_stopword_removed: float = 0.15
    p_sentence_subset: float = 0.2

    def __post_init__(self):
        total = self.p_full + self.p_answer_only + self.p_stopword_removed + self.p_sentence_subset
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"augmentation probabilities sum to {total}, expected 1")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.max_answer_tokens < 1:
            raise ValueError("max_answer_tokens must be >= 1")


def _augmented_context(example: QAExample, config: ListenerTrainConfig,
                       stopwords: frozenset, rng: np.random.Generator) -> tuple[str, ...]:
    passage = tuple(example.passage)
    roll = rng.random()
    if roll < config.p_full:
        return passage
    if roll < config.p_full + config.p_answer_only:
        return tuple(example.gold_answer)
    if roll < config.p_full + config.p_answer_only + config.p_stopword_removed:
        return tuple(t for t in passage if t not in stopwords)
    sentences = split_sentences(passage)
    keep = [rng.random() < 0.5 for _ in sentences]
    keep[target_fact_index(example)] = True
    return tuple(tok for s, k in zip(sentences, keep) if k for tok in s)


class LearnedListener:
    """Frozen question-answering model: greedy answers, own-surprisal pricing.

    The reader consumes ``<bos> summary <sep> question`` (the question's
    trailing "?" marks where the answer starts) and decodes greedily until
    ``<eos>`` or ``max_answer_tokens``. Surprisal defaults to the same
    weights, i.e. the listener prices messages under its own language model.
    """

    def __init__(self, model: PolicyModel, vocab: Vocabulary,
                 max_answer_tokens: int = 4,
                 surprisal_model: PolicyModel | None = None):
        # Own a frozen copy: the caller's model stays trainable, and nothing
        # the caller does later can shift this reader's behavior.
        self.model = clone_model(model)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.vocab = vocab
        self.max_answer_tokens = max_answer_tokens
        if surprisal_model is None:
            self.surprisal_model = self.model
        else:
            self.surprisal_model = clone_model(surprisal_model)
            self.surprisal_model.eval()
            for p in self.surprisal_model.parameters():
                p.requires_grad_(False)

    def answer(self, summary: TokenSequence, question: TokenSequence) -> tuple[str, ...]:
        return self.answer_batch([summary], [question])[0]

    def answer_batch(self, summaries: Sequence[TokenSequence],
                     questions: Sequence[TokenSequence]) -> list[tuple[str, ...]]:
        vocab = self.vocab
        prompts = []
        for s, q in zip(summaries, questions):
            prompts.append([vocab.bos_id] + vocab.encode(s) + [vocab.sep_id]
                           + vocab.encode(q))
        width = max(len(p) for p in prompts)
        ids = torch.full((len(prompts), width), vocab.pad_id, dtype=torch.long)
        mask = torch.zeros((len(prompts), width), dtype=torch.bool)
        for i, p in enumerate(prompts):
            ids[i, width - len(p):] = torch.tensor(p, dtype=torch.long)
            mask[i, width - len(p):] = True
        answers: list[list[int]] = [[] for _ in prompts]
        alive = torch.ones(len(prompts), dtype=torch.bool)
        banned = torch.tensor([vocab.pad_id, vocab.bos_id, vocab.sep_id], dtype=torch.long)
        for _ in range(self.max_answer_tokens):
            if not alive.any():
                break
            with torch.no_grad():
                logits, _ = self.model(ids, attention_mask=mask, pad_id=vocab.pad_id)
            last = logits[:, -1, :].clone()
            last[:, banned] = float("-inf")
            choice = last.argmax(dim=-1)
            for i in range(len(prompts)):
                if alive[i] and int(choice[i]) != vocab.eos_id:
                    answers[i].append(int(choice[i]))
            alive = alive & (choice != vocab.eos_id)
            step_tok = torch.where(alive, choice, torch.full_like(choice, vocab.pad_id))
            ids = torch.cat([ids, step_tok.unsqueeze(1)], dim=1)
            mask = torch.cat([mask, alive.unsqueeze(1)], dim=1)
        return [vocab.decode(a) if a else UNKNOWN_ANSWER for a in answers]

    def surprisal_of(self, text: TokenSequence) -> float:
        return surprisal(self.surprisal_model, self.vocab, text)

    def surprisal_batch_of(self, texts: Sequence[TokenSequence]) -> list[float]:
        return surprisal_batch(self.surprisal_model, self.vocab, texts)

    def token_surprisals_of(self, text: TokenSequence) -> list[float]:
        return token_surprisals(self.surprisal_model, self.vocab, text)

    def fingerprint(self) -> str:
        return fingerprint(self.model)


def listener_surprisal(listener, text: TokenSequence) -> float:
    """Surprisal of ``text`` under the listener's frozen language model."""
    return listener.surprisal_of(text)


def exact_match_accuracy(listener, examples: Sequence[QAExample],
                         batch_size: int = 64) -> float:
    """Fraction of examples answered exactly right from the full passage."""
    correct = 0
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo : lo + batch_size]
        preds = listener.answer_batch([ex.passage for ex in chunk],
                                      [ex.question for ex in chunk])
        correct += sum(1 for p, ex in zip(preds, chunk)
                       if tuple(p) == tuple(ex.gold_answer))
    return correct / len(examples)


def train_listener(
    base_model: PolicyModel, vocab: Vocabulary, examples: Sequence[QAExample],
    config: ListenerTrainConfig, stopwords: frozenset,
    holdout: Sequence[QAExample] = (),
    log_fn: Callable[[int, float], None] | None = None,
) -> tuple[LearnedListener, list[float]]:
    """Fine-tune a copy of ``base_model`` for question answering.

    The base model is left untouched; the returned listener is frozen.
    Loss is next-token cross-entropy with answer-span targets at full
    weight and context/question targets at ``prefix_loss_weight``.

    If ``holdout`` examples are given, the listener's exact-match accuracy
    on uncorrupted passages is measured; below 0.9 the listener is still
    returned but carries ``accuracy_warning = True`` and a warning is
    logged.
    """
    if not examples:
        raise ValueError("no training examples")
    model = clone_model(base_model)
    model.train()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    losses = []
    for step in range(config.steps):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(step,)))
        idx = rng.integers(len(examples), size=config.batch_size)
        rows, answer_starts = [], []
        for i in idx:
            ex = examples[int(i)]
            context = _augmented_context(ex, config, stopwords, rng)
            prefix = ([vocab.bos_id] + vocab.encode(context) + [vocab.sep_id]
                      + vocab.encode(ex.question))
            rows.append(prefix + vocab.encode(ex.gold_answer) + [vocab.eos_id])
            answer_starts.append(len(prefix))
        width = max(len(r) for r in rows)
        ids = torch.full((len(rows), width), vocab.pad_id, dtype=torch.long)
        for i, row in enumerate(rows):
            ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        inputs, targets = ids[:, :-1], ids[:, 1:]
        logits, _ = model(inputs, pad_id=vocab.pad_id)
        logprobs = F.log_softmax(logits, dim=-1)
        picked = logprobs.gather(2, targets.clamp(min=0).unsqueeze(2)).squeeze(2)
        weights = torch.zeros_like(picked)
        for i, row in enumerate(rows):
            n_targets = len(row) - 1
            weights[i, : n_targets] = config.prefix_loss_weight
            weights[i, answer_starts[i] - 1 : n_targets] = 1.0
        loss = -(picked * weights).sum() / weights.sum()
        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
        if log_fn is not None:
            log_fn(step, losses[-1])
    listener = LearnedListener(model, vocab, max_answer_tokens=config.max_answer_tokens)
    listener.holdout_accuracy = None
    listener.accuracy_warning = False
    if holdout:
        listener.holdout_accuracy = exact_match_accuracy(listener, holdout)
        if listener.holdout_accuracy < 0.9:
            listener.accuracy_warning = True
            logger.warning(
                "listener held-out exact-match accuracy %.3f is below the "
                "0.9 target", listener.holdout_accuracy)
    return listener, losses


def save_listener(path: str | Path, listener: LearnedListener,
                  extra: dict | None = None) -> None:
    meta = {"role": "listener", "max_answer_tokens": listener.max_answer_tokens}
    meta.update(extra or {})
    save_checkpoint(path, listener.model, listener.vocab, extra=meta)


def load_listener(path: str | Path) -> LearnedListener:
    model, vocab, extra = load_checkpoint(path)
    if extra.get("role") != "listener":
        raise ValueError(f"{path}: checkpoint does not hold a listener")
    return LearnedListener(model, vocab,
                           max_answer_tokens=int(extra.get("max_answer_tokens", 4)))
