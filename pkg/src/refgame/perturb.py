"""Corruption operators over passages and the listener-degradation study.

Before trusting a trained speaker's compressed messages, we ask a simpler
question: how does the listener behave when handed the raw passage after
controlled damage? Each operator here produces such a damaged passage; the
study feeds it to the listener *as if it were a summary* and scores the
answers. Baselines (the gold answer verbatim, the untouched passage,
nothing at all) anchor the scale.
"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import QAExample
from .stats import bootstrap_mean_ci
from .textmetrics import (
    SENTENCE_TERMINATORS,
    TokenSequence,
    default_stopwords,
    rouge_l_f1,
)

PERTURBATION_KINDS = (
    "target_baseline", "full_baseline", "empty_baseline", "stopword_removal",
    "truncation", "scramble", "word_deletion",
)


@dataclass(frozen=True)
class PerturbationSpec:
    """One corruption condition.

    ``m``/``c`` parameterize truncation (repeat count, removable fraction),
    ``s`` the pairwise swap probability, ``d`` the per-token deletion
    probability; each is ignored by the kinds that do not use it.
    """

    kind: str = "full_baseline"
    m: int = 1
    c: float = 0.25
    s: float = 0.1
    d: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if self.m < 0:
            raise ValueError("m must be >= 0")
        for name in ("c", "s", "d"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


_BASELINE_KINDS = frozenset({"target_baseline", "full_baseline", "empty_baseline"})


def _truncate(tokens: list[str], m: int, c: float, rng: np.random.Generator) -> list[str]:
    # m rounds of span removal, each applied to the current (shrinking)
    # sequence: start uniform over positions, span length uniform over
    # 0..floor(c * (len - start)) inclusive.
    for _ in range(m):
        if not tokens:
            break
        start = int(rng.integers(len(tokens)))
        max_n = int(np.floor(c * (len(tokens) - start)))
        n = int(rng.integers(max_n + 1))
        tokens = tokens[:start] + tokens[start + n:]
    return tokens


def _scramble(tokens: list[str], s: float, rng: np.random.Generator) -> list[str]:
    # Swap word pairs inside each sentence, leaving sentence order and the
    # terminator tokens in place. Pairs are visited in lexicographic order
    # (i ascending, then j) and swaps are applied sequentially, so later
    # pairs see the effect of earlier swaps.
    out = list(tokens)
    sentence_start = 0
    for end in list(_sentence_ends(tokens)):
        positions = [k for k in range(sentence_start, end)
                     if tokens[k] not in SENTENCE_TERMINATORS]
        for a in range(len(positions)):
            for b in range(a + 1, len(positions)):
                if rng.random() < s:
                    i, j = positions[a], positions[b]
                    out[i], out[j] = out[j], out[i]
        sentence_start = end
    return out


def _sentence_ends(tokens: Sequence[str]):
    """Exclusive end index of each sentence (terminators close a sentence;
    a trailing fragment counts as one)."""
    start = 0
    for k, tok in enumerate(tokens):
        if tok in SENTENCE_TERMINATORS:
            yield k + 1
            start = k + 1
    if start < len(tokens):
        yield len(tokens)


def perturb(
    context: TokenSequence, spec: PerturbationSpec,
    gold_answer: TokenSequence = (), stopwords: frozenset | None = None,
) -> tuple[str, ...]:
    """Apply one corruption condition to a passage.

    Deterministic in (context, spec, spec.seed). Baseline kinds accept an
    empty context; the destructive kinds require a nonempty one.
    """
    if spec.kind == "target_baseline":
        return tuple(gold_answer)
    if spec.kind == "full_baseline":
        return tuple(context)
    if spec.kind == "empty_baseline":
        return ()
    if not context:
        raise ValueError(f"{spec.kind} requires a nonempty context")
    if spec.kind == "stopword_removal":
        if stopwords is None:
            stopwords = default_stopwords()
        return tuple(tok for tok in context if tok not in stopwords)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed))
    if spec.kind == "truncation":
        return tuple(_truncate(list(context), spec.m, spec.c, rng))
    if spec.kind == "scramble":
        return tuple(_scramble(list(context), spec.s, rng))
    if spec.kind == "word_deletion":
        keep = rng.random(len(context)) >= spec.d
        return tuple(tok for tok, k in zip(context, keep) if k)
    raise AssertionError(f"unhandled kind {spec.kind}")  # pragma: no cover


def default_grid() -> list[tuple[str, PerturbationSpec]]:
    """The standard (level label, spec) grid: three baselines, stop-word
    removal, and low/medium/high corruption for each destructive kind."""
    grid: list[tuple[str, PerturbationSpec]] = [
        ("-", PerturbationSpec(kind="target_baseline")),
        ("-", PerturbationSpec(kind="full_baseline")),
        ("-", PerturbationSpec(kind="empty_baseline")),
        ("-", PerturbationSpec(kind="stopword_removal")),
    ]
    for label, (m, c) in zip(("low", "medium", "high"),
                             ((1, 0.25), (2, 0.5), (4, 0.75))):
        grid.append((label, PerturbationSpec(kind="truncation", m=m, c=c)))
    for label, s in zip(("low", "medium", "high"), (0.1, 0.3, 0.6)):
        grid.append((label, PerturbationSpec(kind="scramble", s=s)))
    for label, d in zip(("low", "medium", "high"), (0.1, 0.3, 0.6)):
        grid.append((label, PerturbationSpec(kind="word_deletion", d=d)))
    return grid


@dataclass(frozen=True)
class DegradationRow:
    kind: str
    level: str
    mean: float
    ci_low: float
    ci_high: float
    n: int


@dataclass(frozen=True)
class DegradationTable:
    rows: tuple[DegradationRow, ...]

    def row(self, kind: str, level: str = "-") -> DegradationRow:
        for r in self.rows:
            if r.kind == kind and r.level == level:
                return r
        raise KeyError(f"no row for kind={kind!r} level={level!r}")

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["spec", "level", "mean", "ci_low", "ci_high", "n"])
            for r in self.rows:
                writer.writerow([r.kind, r.level, repr(r.mean), repr(r.ci_low),
                                 repr(r.ci_high), r.n])

    def format_text(self) -> str:
        lines = [f"{'condition':<28} {'mean':>8} {'95% CI':>19} {'n':>6}"]
        for r in self.rows:
            name = r.kind if r.level == "-" else f"{r.kind} ({r.level})"
            lines.append(
                f"{name:<28} {r.mean:8.4f} [{r.ci_low:7.4f}, {r.ci_high:7.4f}] {r.n:6d}")
        return "\n".join(lines)


def feasibility_study(
    listener, dataset: Sequence[QAExample],
    grid: Sequence[tuple[str, PerturbationSpec]] | None = None,
    n_episodes: int = 500, seed: int = 0,
    stopwords: frozenset | None = None, batch_size: int = 64,
) -> DegradationTable:
    """Score the listener on perturbed passages, one row per condition.

    Episode i of every condition uses the same example (sampled with
    replacement from ``dataset``) so conditions differ only in the damage
    done; the per-episode perturbation seed is derived from (seed,
    condition index, episode index). Performance is the answer's overlap
    score against the gold answer; CIs are percentile bootstraps over the
    per-episode scores.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if not dataset:
        raise ValueError("dataset is empty")
    if grid is None:
        grid = default_grid()
    if stopwords is None:
        stopwords = default_stopwords()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0,)))
    examples = [dataset[int(i)] for i in rng.integers(len(dataset), size=n_episodes)]
    rows = []
    for cond_idx, (level, spec) in enumerate(grid):
        scores = []
        for lo in range(0, n_episodes, batch_size):
            chunk = examples[lo : lo + batch_size]
            summaries = []
            for off, ex in enumerate(chunk):
                ep_seed = int(np.random.SeedSequence(
                    entropy=seed, spawn_key=(1, cond_idx, lo + off),
                ).generate_state(1, np.uint64)[0])
                ep_spec = dataclasses.replace(spec, seed=ep_seed)
                summaries.append(perturb(ex.passage, ep_spec, ex.gold_answer,
                                         stopwords=stopwords))
            answers = listener.answer_batch(summaries, [ex.question for ex in chunk])
            scores.extend(rouge_l_f1(ans, ex.gold_answer)
                          for ans, ex in zip(answers, chunk))
        mean, lo_ci, hi_ci = bootstrap_mean_ci(scores, seed=seed + cond_idx)
        rows.append(DegradationRow(spec.kind, level, mean, lo_ci, hi_ci, n_episodes))
    return DegradationTable(tuple(rows))
