"""Synthetic fact world: grammar, passage/question generation, and parsing.

A world is a set of entities with typed attributes. Facts are rendered with
one fixed template per category:

    the <attribute> of <entity> is <value> .
    what is the <attribute> of <entity> ?

The function words (the, of, is, what) are mandatory for grammaticality but
carry no information about the answer, which is what makes telegraphic
compression measurable. A context-free grammar over the world's vocabulary,
with one value nonterminal per attribute, accepts exactly the well-formed
fact sentences and questions; an Earley parser provides the exact
grammaticality oracle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .textmetrics import detokenize, split_sentences, tokenize

FUNCTION_WORDS = ("the", "of", "is", "what")

_ENTITY_POOL = (
    "alice", "bob", "carol", "david", "erin", "frank", "grace", "henry",
    "iris", "jack", "karen", "leo", "mona", "nina", "oscar", "paula",
    "quinn", "rosa", "sam", "tina",
)

_ATTRIBUTE_POOL = (
    "color", "size", "shape", "flavor", "origin", "material", "texture",
    "weight", "sound", "smell", "age", "mood", "height", "speed", "price",
    "style",
)

_VALUE_POOLS = {
    "color": ("red", "blue", "green", "yellow", "purple", "orange", "white",
              "black", "silver", "brown"),
    "size": ("tiny", "small", "medium", "large", "huge", "giant", "compact",
             "narrow", "wide", "vast"),
    "shape": ("round", "square", "oval", "flat", "curved", "pointed",
              "hollow", "twisted", "angular", "spiral"),
    "flavor": ("sweet", "sour", "bitter", "salty", "spicy", "mild", "tangy",
               "smoky", "fruity", "savory"),
    "origin": ("northern", "southern", "eastern", "western", "coastal",
               "alpine", "urban", "rural", "island", "desert"),
    "material": ("wooden", "metal", "glass", "stone", "plastic", "ceramic",
                 "leather", "woolen", "paper", "rubber"),
    "texture": ("smooth", "rough", "soft", "hard", "fuzzy", "slick",
                "grainy", "silky", "bumpy", "crisp"),
    "weight": ("light", "heavy", "feather", "leaden", "hefty", "dainty",
               "weighty", "airy", "dense", "slight"),
    "sound": ("quiet", "loud", "humming", "buzzing", "ringing", "silent",
              "booming", "whispering", "chirping", "roaring"),
    "smell": ("floral", "musty", "fresh", "pungent", "minty", "earthy",
              "smelly", "perfumed", "acrid", "clean"),
    "age": ("new", "old", "ancient", "modern", "young", "vintage", "recent",
            "antique", "current", "dated"),
    "mood": ("happy", "sad", "calm", "angry", "cheerful", "gloomy", "serene",
             "tense", "joyful", "moody"),
    "height": ("tall", "short", "towering", "stubby", "lofty", "squat",
               "elevated", "low", "high", "raised"),
    "speed": ("fast", "slow", "rapid", "sluggish", "swift", "brisk",
              "speedy", "leisurely", "hasty", "steady"),
    "price": ("cheap", "costly", "pricey", "bargain", "premium", "budget",
              "lavish", "modest", "valuable", "affordable"),
    "style": ("classic", "trendy", "formal", "casual", "elegant", "plain",
              "ornate", "sleek", "rustic", "fancy"),
}


class Fact(NamedTuple):
    entity: str
    attribute: str
    value: str


@dataclass(frozen=True)
class WorldSpec:
    """Size parameters for a synthetic world, plus the seed that fixes it.

    ``n_entities`` counts the foreground entities questions may ask about; a
    separate background pool of max(2, ceil(n_entities / 2)) entities only
    ever appears in distractor sentences, which is what forces genuine
    compression (the optimal summary is not the whole passage).
    """

    n_entities: int = 6
    n_attributes: int = 4
    n_values_per_attribute: int = 6
    facts_per_passage: int = 3
    distractor_sentences: int = 2
    seed: int = 0

    def __post_init__(self):
        for name, lo in (("n_entities", 1), ("n_attributes", 1),
                         ("n_values_per_attribute", 2), ("facts_per_passage", 1),
                         ("distractor_sentences", 0)):
            if getattr(self, name) < lo:
                raise ValueError(f"{name} must be >= {lo}, got {getattr(self, name)}")
        if self.facts_per_passage > self.n_entities * self.n_attributes:
            raise ValueError(
                "facts_per_passage exceeds the number of distinct "
                "(entity, attribute) pairs"
            )

    @property
    def n_background(self) -> int:
        return max(2, math.ceil(self.n_entities / 2))


def _take(pool: tuple[str, ...], n: int, fallback: str, rng: np.random.Generator) -> tuple[str, ...]:
    """Draw n distinct words, preferring the curated pool."""
    if n <= len(pool):
        idx = rng.choice(len(pool), size=n, replace=False)
        return tuple(pool[i] for i in sorted(idx))
    extra = tuple(f"{fallback}{i}" for i in range(n - len(pool)))
    return pool + extra


@dataclass(frozen=True)
class World:
    """A concrete world: named entities, attributes, and typed value pools."""

    spec: WorldSpec
    entities: tuple[str, ...]
    background_entities: tuple[str, ...]
    attributes: tuple[str, ...]
    values: dict[str, tuple[str, ...]]

    def __post_init__(self):
        pools = [FUNCTION_WORDS, self.entities, self.background_entities,
                 self.attributes, *self.values.values()]
        seen: set[str] = set()
        for pool in pools:
            for word in pool:
                if word in seen:
                    raise ValueError(f"vocabulary collision on {word!r}")
                seen.add(word)

    def all_entities(self) -> tuple[str, ...]:
        return self.entities + self.background_entities

    def terminals(self) -> tuple[str, ...]:
        """Every surface token the world can produce, in a fixed order."""
        out = list(FUNCTION_WORDS) + [".", "?"]
        out.extend(self.entities)
        out.extend(self.background_entities)
        out.extend(self.attributes)
        for attr in self.attributes:
            out.extend(self.values[attr])
        return tuple(out)


def build_world(spec: WorldSpec) -> World:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(0,)))
    n_total = spec.n_entities + spec.n_background
    entities = _take(_ENTITY_POOL, n_total, "person", rng)
    attributes = _take(_ATTRIBUTE_POOL, spec.n_attributes, "attr", rng)
    values = {}
    for attr in attributes:
        pool = _VALUE_POOLS.get(attr, ())
        values[attr] = _take(pool, spec.n_values_per_attribute, f"{attr}val", rng)
    if spec.distractor_sentences > spec.n_background * spec.n_attributes:
        raise ValueError(
            "distractor_sentences exceeds the number of distinct background "
            "(entity, attribute) pairs"
        )
    return World(
        spec=spec,
        entities=entities[: spec.n_entities],
        background_entities=entities[spec.n_entities :],
        attributes=attributes,
        values=values,
    )


def save_world(path: str | Path, world: World) -> None:
    payload = {
        "spec": {
            "n_entities": world.spec.n_entities,
            "n_attributes": world.spec.n_attributes,
            "n_values_per_attribute": world.spec.n_values_per_attribute,
            "facts_per_passage": world.spec.facts_per_passage,
            "distractor_sentences": world.spec.distractor_sentences,
            "seed": world.spec.seed,
        },
        "entities": list(world.entities),
        "background_entities": list(world.background_entities),
        "attributes": list(world.attributes),
        "values": {k: list(v) for k, v in world.values.items()},
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def load_world(path: str | Path) -> World:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return World(
        spec=WorldSpec(**payload["spec"]),
        entities=tuple(payload["entities"]),
        background_entities=tuple(payload["background_entities"]),
        attributes=tuple(payload["attributes"]),
        values={k: tuple(v) for k, v in payload["values"].items()},
    )


def fact_sentence(fact: Fact) -> tuple[str, ...]:
    return ("the", fact.attribute, "of", fact.entity, "is", fact.value, ".")


def question_sentence(entity: str, attribute: str) -> tuple[str, ...]:
    return ("what", "is", "the", attribute, "of", entity, "?")


@dataclass(frozen=True)
class QAExample:
    """One game instance.

    ``fact_table`` lists the facts the passage states, in sentence order and
    with distractors included, so each fact is rendered by exactly one
    passage sentence. ``gold_answer`` is the value of the (entity,
    attribute) pair the question names.
    """

    passage: tuple[str, ...]
    question: tuple[str, ...]
    gold_answer: tuple[str, ...]
    fact_table: tuple[Fact, ...]


def target_fact_index(example: QAExample) -> int:
    """Index into fact_table (== passage sentence index) of the asked fact."""
    question = set(example.question)
    answer = detokenize(example.gold_answer)
    for i, fact in enumerate(example.fact_table):
        if fact.value == answer and fact.entity in question and fact.attribute in question:
            return i
    raise ValueError("example's question does not match any fact in its table")


def target_sentence(example: QAExample) -> tuple[str, ...]:
    """The passage sentence that states the asked-about fact."""
    return split_sentences(example.passage)[target_fact_index(example)]


def generate_dataset(
    world: World | WorldSpec, n_examples: int, offset: int = 0,
) -> list[QAExample]:
    """Sample examples i.i.d.; example i depends only on (world seed, offset + i).

    Distinct ``offset`` ranges give non-overlapping streams, which is how
    train and evaluation splits are drawn from one world.
    """
    if isinstance(world, WorldSpec):
        world = build_world(world)
    if n_examples < 1:
        raise ValueError("n_examples must be >= 1")
    spec = world.spec
    fg_pairs = [(e, a) for e in world.entities for a in world.attributes]
    bg_pairs = [(e, a) for e in world.background_entities for a in world.attributes]
    out = []
    for i in range(offset, offset + n_examples):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=spec.seed, spawn_key=(1, i)))
        fg_idx = rng.choice(len(fg_pairs), size=spec.facts_per_passage, replace=False)
        facts = []
        for j in fg_idx:
            entity, attr = fg_pairs[j]
            value = world.values[attr][rng.integers(len(world.values[attr]))]
            facts.append(Fact(entity, attr, value))
        target = facts[int(rng.integers(len(facts)))]
        if spec.distractor_sentences:
            bg_idx = rng.choice(len(bg_pairs), size=spec.distractor_sentences, replace=False)
            for j in bg_idx:
                entity, attr = bg_pairs[j]
                value = world.values[attr][rng.integers(len(world.values[attr]))]
                facts.append(Fact(entity, attr, value))
        order = rng.permutation(len(facts))
        facts = [facts[j] for j in order]
        passage = tuple(tok for f in facts for tok in fact_sentence(f))
        out.append(
            QAExample(
                passage=passage,
                question=question_sentence(target.entity, target.attribute),
                gold_answer=(target.value,),
                fact_table=tuple(facts),
            )
        )
    return out


def save_jsonl(examples: Iterable[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({
                "passage": detokenize(ex.passage),
                "question": detokenize(ex.question),
                "answer": detokenize(ex.gold_answer),
                "facts": [list(f) for f in ex.fact_table],
            }) + "\n")


def load_jsonl(path: str | Path) -> list[QAExample]:
    """Read a QA example JSONL file, rejecting malformed lines by number."""
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
            missing = {"passage", "question", "answer", "facts"} - obj.keys()
            if missing:
                raise ValueError(
                    f"{path}: line {lineno}: missing keys {sorted(missing)}"
                )
            for key in ("passage", "question", "answer"):
                if not isinstance(obj[key], str):
                    raise ValueError(f"{path}: line {lineno}: {key} must be a string")
            facts = []
            for f in obj["facts"]:
                if (not isinstance(f, (list, tuple)) or len(f) != 3
                        or not all(isinstance(x, str) for x in f)):
                    raise ValueError(
                        f"{path}: line {lineno}: facts entries must be "
                        "[entity, attribute, value] string triples"
                    )
                facts.append(Fact(*f))
            out.append(QAExample(
                passage=tokenize(obj["passage"]),
                question=tokenize(obj["question"]),
                gold_answer=tokenize(obj["answer"]),
                fact_table=tuple(facts),
            ))
    return out


def pretraining_corpus(
    examples: Iterable[QAExample], seed: int, keep_probability: float = 0.5,
    separator: str = "<sep>", n_demonstrations: int = 1,
    telegraphic_probability: float = 0.25,
) -> list[tuple[str, ...]]:
    """Token sequences for language-model pretraining.

    Each sequence is ``passage <sep> demonstration`` where the
    demonstration is a uniformly thinned, order-preserving subset of the
    passage's sentences (each kept with ``keep_probability``, at least one
    kept). Training on these initializes the speaker as a stochastic
    extractive summarizer rather than a verbatim copier, leaving visible
    headroom for the reward to improve.

    ``n_demonstrations`` emits that many independently thinned subsets per
    passage. One demonstration lets a long pretraining run memorize the
    passage-to-subset mapping and collapse to deterministic sampling;
    several keep the conditional genuinely stochastic, which the policy
    gradient later needs for exploration.

    With ``telegraphic_probability`` a demonstration is rendered in a
    compressed register: function words dropped, content words and sentence
    terminators kept. Large text corpora contain such registers (headlines,
    notes), and the speaker can only trade grammar for brevity later if the
    register is reachable under its own policy. The mix prices the two
    registers differently per channel: the compressed one halves token
    count but, being the rarer register, costs *more* nats under the
    pretrained model.
    """
    if not 0.0 < keep_probability <= 1.0:
        raise ValueError("keep_probability must be in (0, 1]")
    if n_demonstrations < 1:
        raise ValueError("n_demonstrations must be >= 1")
    if not 0.0 <= telegraphic_probability <= 1.0:
        raise ValueError("telegraphic_probability must be in [0, 1]")
    out = []
    for i, ex in enumerate(examples):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        sentences = split_sentences(ex.passage)
        for _ in range(n_demonstrations):
            keep = [bool(rng.random() < keep_probability) for _ in sentences]
            if not any(keep):
                keep[int(rng.integers(len(sentences)))] = True
            demo = tuple(tok for s, k in zip(sentences, keep) if k for tok in s)
            if rng.random() < telegraphic_probability:
                demo = tuple(t for t in demo if t not in FUNCTION_WORDS)
            out.append(tuple(ex.passage) + (separator,) + demo)
    return out


@dataclass(frozen=True)
class Grammar:
    """A context-free grammar with hashable, order-stable productions.

    ``productions`` is a tuple of (lhs, rhs) pairs; symbols that appear as
    an lhs are nonterminals, everything else is a terminal.
    ``function_words`` records which terminals are function words, so the
    telegraphic-drift diagnostic and the grammar stay coupled.
    """

    start: str
    productions: tuple[tuple[str, tuple[str, ...]], ...]
    function_words: frozenset[str] = frozenset(FUNCTION_WORDS)

    def __post_init__(self):
        for lhs, rhs in self.productions:
            if not rhs:
                raise ValueError(f"empty right-hand side for {lhs!r}")

    def nonterminals(self) -> frozenset[str]:
        return frozenset(lhs for lhs, _ in self.productions)

    def terminals(self) -> frozenset[str]:
        nts = self.nonterminals()
        return frozenset(
            sym for _, rhs in self.productions for sym in rhs if sym not in nts
        )


def grammar_from_world(world: World) -> Grammar:
    """The exact grammar of well-formed fact sentences and questions.

    Value nonterminals are typed per attribute, so a sentence pairing an
    attribute with another category's value does not parse, and every
    sentence in the language has exactly one derivation.
    """
    prods: list[tuple[str, tuple[str, ...]]] = []
    for attr in world.attributes:
        prods.append(("S", (f"FACT_{attr}",)))
        prods.append(("S", (f"QUESTION_{attr}",)))
    for entity in world.all_entities():
        prods.append(("ENTITY", (entity,)))
    for attr in world.attributes:
        prods.append((f"FACT_{attr}", ("the", attr, "of", "ENTITY", "is", f"VALUE_{attr}", ".")))
        prods.append((f"QUESTION_{attr}", ("what", "is", "the", attr, "of", "ENTITY", "?")))
        for value in world.values[attr]:
            prods.append((f"VALUE_{attr}", (value,)))
    return Grammar(start="S", productions=tuple(prods))


def save_grammar(path: str | Path, grammar: Grammar) -> None:
    lines = [
        "# Context-free grammar; '|' separates alternatives.",
        f"@start {grammar.start}",
        "@functionwords " + " ".join(sorted(grammar.function_words)),
    ]
    by_lhs: dict[str, list[tuple[str, ...]]] = {}
    order: list[str] = []
    for lhs, rhs in grammar.productions:
        if lhs not in by_lhs:
            by_lhs[lhs] = []
            order.append(lhs)
        by_lhs[lhs].append(rhs)
    for lhs in order:
        alts = " | ".join(" ".join(rhs) for rhs in by_lhs[lhs])
        lines.append(f"{lhs} -> {alts}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_grammar(path: str | Path) -> Grammar:
    start = None
    function_words: frozenset[str] = frozenset(FUNCTION_WORDS)
    prods: list[tuple[str, tuple[str, ...]]] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("@start"):
            start = line.split()[1]
            continue
        if line.startswith("@functionwords"):
            function_words = frozenset(line.split()[1:])
            continue
        if "->" not in line:
            raise ValueError(f"{path}: line {lineno}: expected 'LHS -> rhs'")
        lhs, rhs_text = (part.strip() for part in line.split("->", 1))
        if not lhs or " " in lhs:
            raise ValueError(f"{path}: line {lineno}: bad left-hand side {lhs!r}")
        for alt in rhs_text.split("|"):
            symbols = tuple(alt.split())
            if not symbols:
                raise ValueError(f"{path}: line {lineno}: empty alternative")
            prods.append((lhs, symbols))
    if start is None:
        if not prods:
            raise ValueError(f"{path}: no productions")
        start = prods[0][0]
    return Grammar(start=start, productions=tuple(prods), function_words=function_words)


@lru_cache(maxsize=None)
def _production_index(grammar: Grammar) -> dict[str, tuple[tuple[str, ...], ...]]:
    index: dict[str, list[tuple[str, ...]]] = {}
    for lhs, rhs in grammar.productions:
        index.setdefault(lhs, []).append(rhs)
    return {lhs: tuple(alts) for lhs, alts in index.items()}


@lru_cache(maxsize=1 << 16)
def is_grammatical(tokens: tuple[str, ...], grammar: Grammar) -> bool:
    """Exact recognition by an Earley parser; empty input never parses."""
    if not tokens:
        return False
    index = _production_index(grammar)
    nonterminals = index.keys()
    # State: (lhs, rhs, dot, origin). The augmented start rule's completion
    # at position len(tokens) with origin 0 means acceptance.
    augmented = ("", (grammar.start,))
    chart: list[set[tuple]] = [set() for _ in range(len(tokens) + 1)]
    chart[0].add((augmented[0], augmented[1], 0, 0))
    for k in range(len(tokens) + 1):
        worklist = list(chart[k])
        while worklist:
            lhs, rhs, dot, origin = worklist.pop()
            if dot < len(rhs):
                sym = rhs[dot]
                if sym in nonterminals:
                    for alt in index[sym]:
                        state = (sym, alt, 0, k)
                        if state not in chart[k]:
                            chart[k].add(state)
                            worklist.append(state)
                    # Nullable completion is not needed: the Grammar type
                    # rejects empty right-hand sides.
                elif k < len(tokens) and tokens[k] == sym:
                    chart[k + 1].add((lhs, rhs, dot + 1, origin))
            else:
                for p_lhs, p_rhs, p_dot, p_origin in list(chart[origin]):
                    if p_dot < len(p_rhs) and p_rhs[p_dot] == lhs:
                        state = (p_lhs, p_rhs, p_dot + 1, p_origin)
                        if state not in chart[k]:
                            chart[k].add(state)
                            worklist.append(state)
    return ("", augmented[1], 1, 0) in chart[len(tokens)]


def grammatical_error_rate(text: Iterable[str], grammar: Grammar) -> float:
    """Fraction of sentences an exact parser rejects; 0.0 for empty text.

    Sentences are terminator-delimited spans; a trailing span with no
    terminator counts as a sentence (and cannot parse).
    """
    sentences = split_sentences(tuple(text))
    if not sentences:
        return 0.0
    bad = sum(1 for s in sentences if not is_grammatical(s, grammar))
    return bad / len(sentences)


def enumerate_language(grammar: Grammar, max_sentences: int = 100_000) -> list[tuple[str, ...]]:
    """Exhaustively expand the grammar into its (finite) sentence language.

    Used as an independent oracle against the chart parser and to check
    unambiguity: raises if two distinct derivations yield the same
    sentence, or if expansion exceeds ``max_sentences`` (a loose guard
    against accidentally recursive grammars).
    """
    index = _production_index(grammar)
    seen: dict[tuple[str, ...], int] = {}

    def expand(symbols: tuple[str, ...]) -> Iterable[tuple[str, ...]]:
        for i, sym in enumerate(symbols):
            if sym in index:
                for alt in index[sym]:
                    yield from expand(symbols[:i] + alt + symbols[i + 1:])
                return
        yield symbols

    for sentence in expand((grammar.start,)):
        seen[sentence] = seen.get(sentence, 0) + 1
        if len(seen) > max_sentences:
            raise ValueError("language larger than max_sentences; "
                             "is the grammar recursive?")
    duplicates = [s for s, count in seen.items() if count > 1]
    if duplicates:
        raise ValueError(f"grammar is ambiguous; e.g. {duplicates[0]!r}")
    return sorted(seen)
