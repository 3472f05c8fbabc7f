"""One summarization-game episode: speak, (maybe truncate), listen, score.

The speaker sees only the passage; the listener sees only the summary and
the question. Communication cost enters either as a penalty mixed into the
score, SCORE = (1 - lambda) * reward - lambda * penalty, or as a hard
cutoff that truncates the summary before the listener reads it (in cutoff
mode the score is the raw reward; the budget does the limiting).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .corpus import Fact, Grammar, QAExample, grammatical_error_rate
from .lm import GenerationResult
from .textmetrics import (
    MetricReport,
    TokenSequence,
    detokenize,
    measure,
    rouge_l_f1,
)

BOTTLENECK_KINDS = ("none", "length", "surprisal")
BOTTLENECK_MODES = ("penalty", "cutoff")


@dataclass(frozen=True)
class BottleneckSpec:
    """What communication costs and how the cost is applied.

    ``weight`` is the lambda of the score formula and must be 0 when kind
    is "none". Cutoff mode prices nothing into the score; it truncates, so
    it requires a positive ``cutoff_budget`` (tokens for kind=length, nats
    for kind=surprisal) and a zero weight.
    """

    kind: str = "none"
    mode: str = "penalty"
    weight: float = 0.0
    cutoff_budget: float = 0.0

    def __post_init__(self):
        if self.kind not in BOTTLENECK_KINDS:
            raise ValueError(f"kind must be one of {BOTTLENECK_KINDS}, got {self.kind!r}")
        if self.mode not in BOTTLENECK_MODES:
            raise ValueError(f"mode must be one of {BOTTLENECK_MODES}, got {self.mode!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError("weight (lambda) must be in [0, 1]")
        if self.kind == "none":
            if self.weight != 0.0:
                raise ValueError("kind 'none' requires weight 0")
            if self.mode == "cutoff":
                raise ValueError("kind 'none' cannot use cutoff mode")
        if self.mode == "cutoff":
            if self.cutoff_budget <= 0:
                raise ValueError("cutoff mode requires a positive cutoff_budget")
            if self.weight != 0.0:
                raise ValueError("cutoff mode ignores the score weight; set it to 0")


def penalty_length(summary: TokenSequence, context: TokenSequence) -> float:
    """Token-count ratio |summary| / |context|; unclipped."""
    if len(context) == 0:
        raise ValueError("context must be nonempty")
    return len(summary) / len(context)


def penalty_surprisal(summary: TokenSequence, context: TokenSequence, listener) -> float:
    """Listener-surprisal ratio S(summary) / S(context); unclipped.

    The empty summary has zero surprisal, hence zero penalty. A context
    with non-positive surprisal has no meaningful ratio and is an error.
    """
    denominator = listener.surprisal_of(context)
    if denominator <= 0.0:
        raise ValueError(f"context surprisal must be positive, got {denominator}")
    if len(summary) == 0:
        return 0.0
    return listener.surprisal_of(summary) / denominator


def score(reward: float, penalty: float, weight: float) -> float:
    """(1 - weight) * reward - weight * penalty."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight (lambda) must be in [0, 1]")
    return (1.0 - weight) * reward - weight * penalty


def apply_cutoff(summary: TokenSequence, bottleneck: BottleneckSpec, listener) -> tuple[str, ...]:
    """Longest summary prefix whose cost fits the cutoff budget."""
    if bottleneck.mode != "cutoff":
        raise ValueError("apply_cutoff requires a cutoff-mode bottleneck")
    summary = tuple(summary)
    if bottleneck.kind == "length":
        return summary[: int(math.floor(bottleneck.cutoff_budget))]
    per_token = listener.token_surprisals_of(summary)
    n = 0
    while n < len(summary) and math.fsum(per_token[: n + 1]) <= bottleneck.cutoff_budget:
        n += 1
    return summary[:n]


@dataclass(frozen=True)
class EpisodeRecord:
    """Everything needed to audit one episode after the fact.

    ``summary`` is the message the listener actually read (post-cutoff when
    that mode is active), and the penalty is measured on it.
    ``metric_report`` measures the summary against its source passage —
    the drift diagnostics, not the reward. ``summary_logprobs`` are the
    behavior policy's per-action log-probabilities (empty for speakers
    that are not policies). Surprisal fields are populated only when the
    bottleneck prices surprisal.
    """

    example: QAExample
    summary: tuple[str, ...]
    summary_logprobs: tuple[float, ...]
    predicted_answer: tuple[str, ...]
    reward: float
    penalty: float
    score: float
    bottleneck: BottleneckSpec
    metric_report: MetricReport
    grammatical_error_rate: float
    surprisal_summary: float | None = None
    surprisal_context: float | None = None


def play_episodes(
    speaker, listener, examples: Sequence[QAExample], bottleneck: BottleneckSpec,
    generator: torch.Generator, stopwords: frozenset, grammar: Grammar,
) -> tuple[GenerationResult | None, list[EpisodeRecord]]:
    """Play one episode per example with a shared sampling generator.

    Returns the raw generation batch (None for non-policy speakers) plus
    one record per episode. Batched for speed; the records depend only on
    (speaker, listener, examples, bottleneck, generator state).
    """
    passages = [ex.passage for ex in examples]
    questions = [ex.question for ex in examples]
    result, summaries = speaker.summarize(passages, generator)
    if bottleneck.mode == "cutoff":
        summaries = [apply_cutoff(s, bottleneck, listener) for s in summaries]
    answers = listener.answer_batch(summaries, questions)
    rewards = [rouge_l_f1(a, ex.gold_answer) for a, ex in zip(answers, examples)]

    surp_s: list[float | None] = [None] * len(examples)
    surp_c: list[float | None] = [None] * len(examples)
    if bottleneck.kind == "length":
        penalties = [penalty_length(s, p) for s, p in zip(summaries, passages)]
    elif bottleneck.kind == "surprisal":
        surp_s = listener.surprisal_batch_of(summaries)
        surp_c = listener.surprisal_batch_of(passages)
        penalties = []
        for ss, sc in zip(surp_s, surp_c):
            if sc <= 0.0:
                raise ValueError(f"context surprisal must be positive, got {sc}")
            penalties.append(ss / sc)
    else:
        penalties = [0.0] * len(examples)

    records = []
    for i, ex in enumerate(examples):
        reward = rewards[i]
        if bottleneck.mode == "cutoff":
            episode_score = reward
        else:
            episode_score = score(reward, penalties[i], bottleneck.weight)
        logprobs: tuple[float, ...] = ()
        if result is not None:
            logprobs = tuple(
                float(x) for x in result.logprobs[i][result.gen_mask[i]])
        records.append(EpisodeRecord(
            example=ex,
            summary=tuple(summaries[i]),
            summary_logprobs=logprobs,
            predicted_answer=tuple(answers[i]),
            reward=reward,
            penalty=penalties[i],
            score=episode_score,
            bottleneck=bottleneck,
            metric_report=measure(summaries[i], ex.passage, stopwords),
            grammatical_error_rate=grammatical_error_rate(summaries[i], grammar),
            surprisal_summary=surp_s[i],
            surprisal_context=surp_c[i],
        ))
    return result, records


def play_episode(
    speaker, listener, example: QAExample, bottleneck: BottleneckSpec,
    seed: int, stopwords: frozenset, grammar: Grammar,
) -> EpisodeRecord:
    """Single-episode convenience wrapper; deterministic in ``seed``."""
    generator = torch.Generator().manual_seed(seed)
    _, records = play_episodes(
        speaker, listener, [example], bottleneck, generator, stopwords, grammar)
    return records[0]


def episode_to_dict(record: EpisodeRecord) -> dict:
    ex = record.example
    report = record.metric_report
    return {
        "passage": detokenize(ex.passage),
        "question": detokenize(ex.question),
        "gold_answer": detokenize(ex.gold_answer),
        "facts": [list(f) for f in ex.fact_table],
        "summary": detokenize(record.summary),
        "summary_logprobs": list(record.summary_logprobs),
        "predicted_answer": detokenize(record.predicted_answer),
        "reward": record.reward,
        "penalty": record.penalty,
        "score": record.score,
        "lambda": record.bottleneck.weight,
        "bottleneck": {
            "kind": record.bottleneck.kind,
            "mode": record.bottleneck.mode,
            "lambda": record.bottleneck.weight,
            "cutoff_budget": record.bottleneck.cutoff_budget,
        },
        "metric_report": {
            "rouge_l_f1": report.rouge_l_f1,
            "bleu": report.bleu,
            "edit_distance_norm": report.edit_distance_norm,
            "function_word_fraction": report.function_word_fraction,
            "mean_sentence_length_tokens": report.mean_sentence_length_tokens,
            "mean_word_length_chars": report.mean_word_length_chars,
            "token_count": report.token_count,
        },
        "grammatical_error_rate": record.grammatical_error_rate,
        "surprisal_summary": record.surprisal_summary,
        "surprisal_context": record.surprisal_context,
    }


def write_episodes(path: str | Path, records: Iterable[EpisodeRecord],
                   append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(episode_to_dict(record)) + "\n")


def load_episode_dicts(path: str | Path) -> list[dict]:
    """Parse an episode JSONL file for audits; errors name line numbers."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                raise ValueError(f"{path}: line {lineno}: blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ValueError(f"{path}: line {lineno}: expected an object")
            out.append(obj)
    return out


def record_from_dict(obj: dict) -> EpisodeRecord:
    """Rebuild an EpisodeRecord from its JSONL form."""
    from .textmetrics import tokenize

    example = QAExample(
        passage=tokenize(obj["passage"]),
        question=tokenize(obj["question"]),
        gold_answer=tokenize(obj["gold_answer"]),
        fact_table=tuple(Fact(*f) for f in obj["facts"]),
    )
    b = obj["bottleneck"]
    report = obj["metric_report"]
    return EpisodeRecord(
        example=example,
        summary=tokenize(obj["summary"]),
        summary_logprobs=tuple(obj["summary_logprobs"]),
        predicted_answer=tokenize(obj["predicted_answer"]),
        reward=obj["reward"],
        penalty=obj["penalty"],
        score=obj["score"],
        bottleneck=BottleneckSpec(
            kind=b["kind"], mode=b["mode"], weight=b["lambda"],
            cutoff_budget=b["cutoff_budget"],
        ),
        metric_report=MetricReport(**report),
        grammatical_error_rate=obj["grammatical_error_rate"],
        surprisal_summary=obj["surprisal_summary"],
        surprisal_context=obj["surprisal_context"],
    )
