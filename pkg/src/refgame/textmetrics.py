"""Scalar text measurements used for reward, penalty, and drift diagnostics.

All operations work on token sequences: lists or tuples of lowercase string
tokens. Tokenization is whitespace splitting after lowercasing; the
synthetic corpus is built so this is lossless. Everything here is a pure
function over immutable inputs and safe to call concurrently.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

TokenSequence = Sequence[str]
StopwordList = frozenset

#: Tokens that end a sentence when splitting token streams.
SENTENCE_TERMINATORS = frozenset({".", "!", "?"})

#: Tokens excluded from word-length statistics.
PUNCTUATION_TOKENS = frozenset({".", "!", "?", ",", ";", ":"})


def tokenize(text: str) -> tuple[str, ...]:
    """Lowercase and split on whitespace."""
    return tuple(text.lower().split())


def detokenize(tokens: TokenSequence) -> str:
    return " ".join(tokens)


def load_stopwords(path: str | Path) -> StopwordList:
    """Read a stopword file: one token per line, '#' starts a comment."""
    words = []
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            words.append(line.lower())
    return frozenset(words)


_DEFAULT_STOPWORDS: StopwordList | None = None


def default_stopwords() -> StopwordList:
    """The packaged stopword list: the grammar's function words plus a
    standard English closed-class inventory."""
    global _DEFAULT_STOPWORDS
    if _DEFAULT_STOPWORDS is None:
        ref = resources.files("refgame") / "data" / "stopwords.txt"
        with resources.as_file(ref) as path:
            _DEFAULT_STOPWORDS = load_stopwords(path)
    return _DEFAULT_STOPWORDS


def _lcs_length(a: tuple, b: tuple) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                cur.append(prev[j - 1] + 1)
            else:
                cur.append(max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l_f1(hypothesis: TokenSequence, reference: TokenSequence) -> float:
    """ROUGE-L F1 between two token sequences.

    F1 = 2PR / (P + R) with P = LCS/|hypothesis| and R = LCS/|reference|,
    where LCS is the longest common subsequence length. Returns 0.0 when
    either sequence is empty or the LCS is empty, so degenerate outputs
    still yield a defined reward.
    """
    if not hypothesis or not reference:
        return 0.0
    lcs = _lcs_length(tuple(hypothesis), tuple(reference))
    if lcs == 0:
        return 0.0
    precision = lcs / len(hypothesis)
    recall = lcs / len(reference)
    return 2.0 * precision * recall / (precision + recall)


def _ngram_counts(tokens: tuple, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: TokenSequence, reference: TokenSequence, max_order: int = 4) -> float:
    """Smoothed sentence BLEU between two token sequences.

    Modified n-gram precisions up to ``max_order`` combined by geometric
    mean, with a brevity penalty. Counts for n >= 2 get add-one smoothing
    so short sequences produce a defined value; orders with no n-grams at
    all (hypothesis shorter than n) are skipped. Zero unigram overlap gives
    0.0.
    """
    hyp = tuple(hypothesis)
    ref = tuple(reference)
    if not hyp or not ref:
        return 0.0
    log_precisions = []
    for n in range(1, max_order + 1):
        hyp_counts = _ngram_counts(hyp, n)
        total = sum(hyp_counts.values())
        if total == 0:
            continue
        ref_counts = _ngram_counts(ref, n)
        matches = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
        if n == 1:
            if matches == 0:
                return 0.0
            precision = matches / total
        else:
            precision = (matches + 1) / (total + 1)
        log_precisions.append(math.log(precision))
    score = math.exp(sum(log_precisions) / len(log_precisions))
    if len(hyp) < len(ref):
        score *= math.exp(1.0 - len(ref) / len(hyp))
    return score


def _levenshtein(a: tuple, b: tuple) -> int:
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cost = 0 if x == y else 1
            cur.append(min(prev[j] + 1, cur[-1] + 1, prev[j - 1] + cost))
        prev = cur
    return prev[-1]


def edit_distance_norm(a: TokenSequence, b: TokenSequence) -> float:
    """Token-level Levenshtein distance normalized by the longer length.

    The distance counts whole-token insertions, deletions, and
    substitutions. Interpretation note: the distance is over tokens, not
    characters. Returns 0.0 when both sequences are empty.
    """
    if not a and not b:
        return 0.0
    return _levenshtein(tuple(a), tuple(b)) / max(len(a), len(b))


def function_word_fraction(text: TokenSequence, stopwords: StopwordList) -> float:
    """Fraction of tokens that appear in the stopword list; 0.0 for empty text."""
    if not stopwords:
        raise ValueError("stopword list must be nonempty")
    if not text:
        return 0.0
    return sum(1 for tok in text if tok in stopwords) / len(text)


def split_sentences(text: TokenSequence) -> list[tuple[str, ...]]:
    """Split a token stream into sentences at terminator tokens.

    Each sentence keeps its terminator; a trailing fragment without one
    forms a final sentence.
    """
    sentences = []
    current: list[str] = []
    for tok in text:
        current.append(tok)
        if tok in SENTENCE_TERMINATORS:
            sentences.append(tuple(current))
            current = []
    if current:
        sentences.append(tuple(current))
    return sentences


def sentence_and_word_stats(text: TokenSequence) -> tuple[float, float]:
    """Mean sentence length in tokens and mean word length in characters.

    Sentence lengths exclude terminator tokens; word lengths exclude all
    punctuation tokens. Returns (0.0, 0.0) for empty text.
    """
    if not text:
        return 0.0, 0.0
    sentences = split_sentences(text)
    lengths = [sum(1 for tok in s if tok not in SENTENCE_TERMINATORS) for s in sentences]
    words = [tok for tok in text if tok not in PUNCTUATION_TOKENS]
    mean_sentence = sum(lengths) / len(lengths) if lengths else 0.0
    mean_word = sum(len(w) for w in words) / len(words) if words else 0.0
    return mean_sentence, mean_word


@dataclass(frozen=True)
class MetricReport:
    """Drift diagnostics for one text, measured against a reference."""

    rouge_l_f1: float
    bleu: float
    edit_distance_norm: float
    function_word_fraction: float
    mean_sentence_length_tokens: float
    mean_word_length_chars: float
    token_count: int


def measure(text: TokenSequence, reference: TokenSequence, stopwords: StopwordList) -> MetricReport:
    """Full MetricReport for ``text`` measured against ``reference``."""
    mean_sentence, mean_word = sentence_and_word_stats(text)
    return MetricReport(
        rouge_l_f1=rouge_l_f1(text, reference),
        bleu=bleu(text, reference),
        edit_distance_norm=edit_distance_norm(text, reference),
        function_word_fraction=function_word_fraction(text, stopwords),
        mean_sentence_length_tokens=mean_sentence,
        mean_word_length_chars=mean_word,
        token_count=len(text),
    )
