"""Tiny causal language model, masked-support decoding, and checkpoints.

The model is a decoder-only pre-LayerNorm transformer held entirely in
float64 on CPU. Two deliberate initialization choices matter downstream:

* the output projection starts at exactly zero, so an untrained model
  assigns the exactly uniform distribution over the vocabulary at every
  position (this makes surprisal identities checkable in closed form), and
* the scalar value head reads a detached copy of the trunk's final hidden
  state, so value regression never backpropagates into the policy.

Decoding restricts sampling to the intersection of three independently
computed truncation filters (top-k, nucleus, epsilon cutoff) and records
the surviving support set per step, so later policy-gradient updates can
recompute log-probabilities of the same renormalized distribution the
sampler actually used.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIAL_TOKENS = (PAD, BOS, EOS, SEP)

_CHECKPOINT_MAGIC = b"RGCHKPT1"


class Vocabulary:
    """Fixed token inventory with the special tokens up front."""

    def __init__(self, content_tokens: Sequence[str]):
        tokens = list(SPECIAL_TOKENS)
        for tok in content_tokens:
            if tok in SPECIAL_TOKENS:
                raise ValueError(f"{tok!r} collides with a special token")
            if tok in tokens[len(SPECIAL_TOKENS):]:
                raise ValueError(f"duplicate token {tok!r}")
            tokens.append(tok)
        self.tokens = tuple(tokens)
        self._ids = {tok: i for i, tok in enumerate(self.tokens)}
        self.pad_id = self._ids[PAD]
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.sep_id = self._ids[SEP]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self._ids[tok] for tok in tokens]
        except KeyError as exc:
            raise ValueError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def content_ids(self) -> list[int]:
        return list(range(len(SPECIAL_TOKENS), len(self.tokens)))


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 128
    max_seq_len: int = 160

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff",
                     "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.qkv = nn.Linear(cfg.d_model, 3 * cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.up = nn.Linear(cfg.d_model, cfg.d_ff)
        self.down = nn.Linear(cfg.d_ff, cfg.d_model)
        self.n_heads = cfg.n_heads

    def forward(self, x: torch.Tensor, allowed: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(d, dim=-1)
        q = q.view(b, t, h, d // h).transpose(1, 2)
        k = k.view(b, t, h, d // h).transpose(1, 2)
        v = v.view(b, t, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(d // h)
        scores = scores.masked_fill(~allowed.unsqueeze(1), float("-inf"))
        x = x + self.proj((torch.softmax(scores, dim=-1) @ v).transpose(1, 2).reshape(b, t, d))
        y = self.ln2(x)
        x = x + self.down(F.gelu(self.up(y)))
        return x


class PolicyModel(nn.Module):
    """Decoder-only transformer with a detached scalar value head.

    Works with left- or right-padded batches: position ids count real
    tokens, and attention reaches only real (non-pad) keys at or before the
    query position. Every query can also attend to itself, which keeps the
    softmax defined on rows whose prefix is all padding.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Embedding(config.vocab_size, config.d_model)
        self.pos_emb = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList(_Block(config) for _ in range(config.n_layers))
        self.ln_f = nn.LayerNorm(config.d_model)
        self.lm_head = nn.Linear(config.d_model, config.vocab_size)
        self.value_head = nn.Linear(config.d_model, 1)
        self.double()
        self._init_weights(seed)

    def _init_weights(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters()):
                if name.startswith(("lm_head.", "value_head.")):
                    p.zero_()
                elif p.dim() >= 2 or "emb" in name:
                    p.normal_(0.0, 0.02, generator=gen)
                elif name.endswith(".bias"):
                    p.zero_()
                # LayerNorm weights keep their default ones.

    def forward(
        self, input_ids: torch.Tensor, attention_mask: torch.Tensor | None = None,
        pad_id: int = 0,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (logits [b, t, vocab], values [b, t])."""
        if input_ids.dim() != 2:
            raise ValueError("input_ids must be [batch, time]")
        b, t = input_ids.shape
        if t > self.config.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len "
                             f"{self.config.max_seq_len}")
        if attention_mask is None:
            attention_mask = input_ids != pad_id
        attention_mask = attention_mask.bool()
        positions = (attention_mask.long().cumsum(dim=1) - 1).clamp(min=0)
        causal = torch.tril(torch.ones(t, t, dtype=torch.bool))
        allowed = causal.unsqueeze(0) & attention_mask.unsqueeze(1)
        eye = torch.eye(t, dtype=torch.bool).unsqueeze(0)
        allowed = allowed | eye
        x = self.tok_emb(input_ids) + self.pos_emb(positions)
        for block in self.blocks:
            x = block(x, allowed)
        x = self.ln_f(x)
        logits = self.lm_head(x)
        values = self.value_head(x.detach()).squeeze(-1)
        return logits, values


def clone_model(model: PolicyModel) -> PolicyModel:
    copy = PolicyModel(model.config, seed=0)
    copy.load_state_dict({k: v.clone() for k, v in model.state_dict().items()})
    return copy


def fingerprint(model: PolicyModel) -> str:
    """sha256 over the sorted parameter tensors; equal iff weights are
    byte-identical, which is how frozen models are audited."""
    digest = hashlib.sha256()
    state = model.state_dict()
    for name in sorted(state):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(state[name].detach().numpy()).tobytes())
    return digest.hexdigest()


def save_checkpoint(
    path: str | Path, model: PolicyModel, vocab: Vocabulary,
    extra: dict | None = None,
) -> None:
    """Write a self-describing binary checkpoint.

    Layout: an 8-byte magic, a big-endian uint64 header length, a JSON
    header (model config, vocabulary, array manifest in sorted order, free
    extra metadata), then each array's raw C-order bytes. Raw float64 bytes
    round-trip bit-exactly, which torch.save does not promise across
    versions.
    """
    state = {k: np.ascontiguousarray(v.detach().numpy())
             for k, v in model.state_dict().items()}
    header = {
        "config": {
            "vocab_size": model.config.vocab_size,
            "d_model": model.config.d_model,
            "n_heads": model.config.n_heads,
            "n_layers": model.config.n_layers,
            "d_ff": model.config.d_ff,
            "max_seq_len": model.config.max_seq_len,
        },
        "vocab": list(vocab.tokens[len(SPECIAL_TOKENS):]),
        "arrays": [
            {"name": name, "shape": list(state[name].shape),
             "dtype": str(state[name].dtype)}
            for name in sorted(state)
        ],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack(">Q", len(blob)))
        fh.write(blob)
        for entry in header["arrays"]:
            fh.write(state[entry["name"]].tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyModel, Vocabulary, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack(">Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        state = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            dtype = np.dtype(entry["dtype"])
            data = fh.read(count * dtype.itemsize)
            array = np.frombuffer(data, dtype=dtype).reshape(shape).copy()
            state[entry["name"]] = torch.from_numpy(array)
    vocab = Vocabulary(header["vocab"])
    model = PolicyModel(ModelConfig(**header["config"]), seed=0)
    model.load_state_dict(state)
    return model, vocab, header.get("extra", {})


def next_token_logprobs(model: PolicyModel, vocab: Vocabulary,
                        prefix: Sequence[str]) -> torch.Tensor:
    """log p(token | <bos>, prefix) over the whole vocabulary."""
    ids = torch.tensor([[vocab.bos_id] + vocab.encode(prefix)], dtype=torch.long)
    with torch.no_grad():
        logits, _ = model(ids, pad_id=vocab.pad_id)
    return F.log_softmax(logits[0, -1, :], dim=-1)


def token_surprisals(model: PolicyModel, vocab: Vocabulary, tokens: Sequence[str],
                     conditioning: Sequence[str] = ()) -> list[float]:
    """Per-token surprisal -log p(tok_i | <bos>, conditioning, tok_<i) in nats."""
    return token_surprisals_batch(model, vocab, [tokens], conditioning)[0]


def token_surprisals_batch(
    model: PolicyModel, vocab: Vocabulary, texts: Sequence[Sequence[str]],
    conditioning: Sequence[str] = (),
) -> list[list[float]]:
    """Batched per-token surprisals; each row is right-padded internally."""
    prefix = [vocab.bos_id] + vocab.encode(conditioning)
    rows = [prefix + vocab.encode(t) for t in texts]
    width = max(len(r) for r in rows)
    ids = torch.full((len(rows), width), vocab.pad_id, dtype=torch.long)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = torch.tensor(row, dtype=torch.long)
    with torch.no_grad():
        logits, _ = model(ids, pad_id=vocab.pad_id)
        logprobs = F.log_softmax(logits, dim=-1)
    out = []
    skip = len(prefix) - 1
    for i, row in enumerate(rows):
        n = len(row) - 1
        targets = torch.tensor(row[1:], dtype=torch.long)
        picked = logprobs[i, :n].gather(1, targets.unsqueeze(1)).squeeze(1)
        out.append([-float(x) for x in picked[skip:]])
    return out


def surprisal(model: PolicyModel, vocab: Vocabulary, tokens: Sequence[str],
              conditioning: Sequence[str] = ()) -> float:
    """Total surprisal of a text in nats, summed with compensated addition.

    The empty text has surprisal 0. Under a freshly initialized (uniform)
    model this equals len(tokens) * log(vocab_size) up to float error.
    """
    if not tokens:
        return 0.0
    return math.fsum(token_surprisals(model, vocab, tokens, conditioning))


def surprisal_batch(model: PolicyModel, vocab: Vocabulary,
                    texts: Sequence[Sequence[str]],
                    conditioning: Sequence[str] = ()) -> list[float]:
    nonempty = [i for i, t in enumerate(texts) if len(t) > 0]
    out = [0.0] * len(texts)
    if nonempty:
        per_token = token_surprisals_batch(
            model, vocab, [texts[i] for i in nonempty], conditioning)
        for i, vals in zip(nonempty, per_token):
            out[i] = math.fsum(vals)
    return out


@dataclass(frozen=True)
class DecodeConfig:
    """Sampling controls.

    ``num_beams`` selects best-of-n: that many independent samples are
    drawn and the one with the highest total sequence log-probability is
    kept (stochastic rollouts need tractable action log-probabilities, so
    true beam search is not offered). ``min_length`` bans the end token
    until that many content tokens exist. A ``top_k`` at or above the
    vocabulary size keeps every token.
    """

    max_new_tokens: int = 200
    min_length: int = 2
    temperature: float = 1.0
    top_k: int = 50
    top_p: float = 0.1
    epsilon_cutoff: float = 3e-3
    num_beams: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if not 0 <= self.min_length <= self.max_new_tokens:
            raise ValueError("min_length must be in [0, max_new_tokens]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if not 0 <= self.epsilon_cutoff < 1:
            raise ValueError("epsilon_cutoff must be in [0, 1)")
        if self.num_beams < 1:
            raise ValueError("num_beams must be >= 1")


def support_mask(
    logits: torch.Tensor, config: DecodeConfig, banned_ids: Sequence[int],
) -> torch.Tensor:
    """Boolean support of the filtered sampling distribution, per row.

    Filters are computed independently on the same temperature-scaled,
    ban-adjusted distribution and then intersected:

    * top-k: the k highest-probability tokens (0 disables),
    * nucleus: the smallest prefix of the probability-sorted vocabulary
      whose mass reaches top_p,
    * epsilon: tokens with probability >= epsilon_cutoff.

    If the intersection is empty the single most probable token is kept, so
    sampling always has support.
    """
    scaled = logits / config.temperature
    if banned_ids:
        scaled = scaled.clone()
        scaled[:, list(banned_ids)] = float("-inf")
    probs = torch.softmax(scaled, dim=-1)
    keep = torch.ones_like(probs, dtype=torch.bool)
    if config.top_k < probs.shape[-1]:
        top_idx = torch.topk(probs, config.top_k, dim=-1).indices
        in_top_k = torch.zeros_like(keep)
        in_top_k.scatter_(1, top_idx, True)
        keep &= in_top_k
    if config.top_p < 1.0:
        sorted_probs, sorted_idx = torch.sort(probs, dim=-1, descending=True)
        cumulative = sorted_probs.cumsum(dim=-1)
        keep_sorted = (cumulative - sorted_probs) < config.top_p
        nucleus = torch.zeros_like(keep)
        nucleus.scatter_(1, sorted_idx, keep_sorted)
        keep &= nucleus
    if config.epsilon_cutoff > 0.0:
        keep &= probs >= config.epsilon_cutoff
    keep &= probs > 0  # banned tokens never enter the support
    empty = ~keep.any(dim=-1)
    if empty.any():
        argmax = probs.argmax(dim=-1)
        keep[empty] = False
        keep[empty, argmax[empty]] = True
    return keep


def renormalized_logprobs(
    logits: torch.Tensor, support: torch.Tensor, temperature: float,
) -> torch.Tensor:
    """log-probabilities of the distribution renormalized over ``support``.

    This is the distribution the sampler actually drew from; recomputing
    log-probabilities under a stored support keeps later gradient updates
    on-policy with respect to the filtered sampler.
    """
    scaled = logits / temperature
    masked = scaled.masked_fill(~support, float("-inf"))
    return F.log_softmax(masked, dim=-1)


@dataclass
class GenerationResult:
    """One batch of sampled continuations plus what the sampler saw.

    ``input_ids``/``attention_mask`` cover prompt and generation and are
    left-padded to a common prompt width ``prompt_len``. The per-step
    tensors are right-padded over generation steps; ``gen_mask`` marks real
    actions. ``actions`` includes the end token when one was emitted;
    ``logprobs`` are log-probabilities under the renormalized filtered
    distribution; ``support`` stores the boolean sampling support per step.
    """

    input_ids: torch.Tensor
    attention_mask: torch.Tensor
    prompt_len: int
    actions: torch.Tensor
    logprobs: torch.Tensor
    gen_mask: torch.Tensor
    support: torch.Tensor

    def n_rows(self) -> int:
        return self.input_ids.shape[0]

    def select(self, rows: torch.Tensor) -> "GenerationResult":
        """Row-subset view (used for best-of-n selection and minibatching)."""
        return GenerationResult(
            input_ids=self.input_ids[rows],
            attention_mask=self.attention_mask[rows],
            prompt_len=self.prompt_len,
            actions=self.actions[rows],
            logprobs=self.logprobs[rows],
            gen_mask=self.gen_mask[rows],
            support=self.support[rows],
        )

    def action_list(self, row: int) -> list[int]:
        mask = self.gen_mask[row]
        return [int(a) for a in self.actions[row][mask]]

    def generated_tokens(self, vocab: Vocabulary, row: int) -> tuple[str, ...]:
        """Generated content tokens, excluding any trailing end token."""
        ids = self.action_list(row)
        if ids and ids[-1] == vocab.eos_id:
            ids = ids[:-1]
        return vocab.decode(ids)

    def total_logprob(self, row: int) -> float:
        return float(self.logprobs[row][self.gen_mask[row]].sum())


def _pad_prompts(prompts: Sequence[Sequence[int]], pad_id: int) -> tuple[torch.Tensor, torch.Tensor]:
    width = max(len(p) for p in prompts)
    ids = torch.full((len(prompts), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(prompts), width), dtype=torch.bool)
    for i, p in enumerate(prompts):
        ids[i, width - len(p):] = torch.tensor(list(p), dtype=torch.long)
        mask[i, width - len(p):] = True
    return ids, mask


def generate_batch(
    model: PolicyModel, vocab: Vocabulary, prompts: Sequence[Sequence[int]],
    config: DecodeConfig, generator: torch.Generator,
) -> GenerationResult:
    """Sample one continuation per prompt under masked-support decoding.

    Prompts are left-padded so all rows advance in lockstep; a single-row
    batch runs the identical code path, so batching does not change what a
    given (model, prompt, generator state) produces. With num_beams > 1,
    each prompt is expanded into that many independent samples and the one
    with the highest total log-probability is returned.
    """
    if config.num_beams > 1:
        expanded = [p for p in prompts for _ in range(config.num_beams)]
        result = _sample_batch(model, vocab, expanded, config, generator)
        best = []
        for i in range(len(prompts)):
            rows = range(i * config.num_beams, (i + 1) * config.num_beams)
            best.append(max(rows, key=result.total_logprob))
        return result.select(torch.tensor(best, dtype=torch.long))
    return _sample_batch(model, vocab, prompts, config, generator)


def _sample_batch(
    model: PolicyModel, vocab: Vocabulary, prompts: Sequence[Sequence[int]],
    config: DecodeConfig, generator: torch.Generator,
) -> GenerationResult:
    for p in prompts:
        if len(p) == 0:
            raise ValueError("prompts must be nonempty")
    ids, mask = _pad_prompts(prompts, vocab.pad_id)
    n = ids.shape[0]
    prompt_len = ids.shape[1]
    # The token budget cannot outrun the position table.
    budget = min(config.max_new_tokens, model.config.max_seq_len - prompt_len)
    if budget < 1:
        raise ValueError(
            f"prompt of width {prompt_len} fills the model's "
            f"{model.config.max_seq_len}-position context window")
    always_banned = [vocab.pad_id, vocab.bos_id, vocab.sep_id]
    actions = torch.full((n, budget), vocab.pad_id, dtype=torch.long)
    logprobs = torch.zeros((n, budget), dtype=torch.float64)
    gen_mask = torch.zeros((n, budget), dtype=torch.bool)
    support = torch.zeros((n, budget, len(vocab)), dtype=torch.bool)
    alive = torch.ones(n, dtype=torch.bool)
    used = 0
    for step in range(budget):
        if not alive.any():
            break
        used = step + 1
        with torch.no_grad():
            logits, _ = model(ids, attention_mask=mask, pad_id=vocab.pad_id)
        last = logits[:, -1, :]
        banned = list(always_banned)
        if step < config.min_length:
            banned.append(vocab.eos_id)
        keep = support_mask(last, config, banned)
        logp = renormalized_logprobs(last, keep, config.temperature)
        probs = logp.exp()
        probs = torch.where(keep, probs, torch.zeros_like(probs))
        choice = torch.multinomial(probs, 1, generator=generator).squeeze(1)
        chosen_logp = logp.gather(1, choice.unsqueeze(1)).squeeze(1)
        actions[alive, step] = choice[alive]
        logprobs[alive, step] = chosen_logp[alive]
        gen_mask[alive, step] = True
        support[alive, step] = keep[alive]
        next_tok = torch.where(alive, choice, torch.full_like(choice, vocab.pad_id))
        ids = torch.cat([ids, next_tok.unsqueeze(1)], dim=1)
        mask = torch.cat([mask, alive.unsqueeze(1)], dim=1)
        alive = alive & (choice != vocab.eos_id)
    # Trim the step axis to the steps actually taken so downstream logit
    # slices line up with input_ids exactly.
    return GenerationResult(
        input_ids=ids, attention_mask=mask, prompt_len=prompt_len,
        actions=actions[:, :used], logprobs=logprobs[:, :used],
        gen_mask=gen_mask[:, :used], support=support[:, :used],
    )


def generate(
    model: PolicyModel, vocab: Vocabulary, prompt: Sequence[str],
    config: DecodeConfig,
) -> tuple[tuple[str, ...], list[float]]:
    """Single-prompt sampling, seeded by ``config.seed``.

    Returns the generated content tokens and their log-probabilities under
    the filtered, renormalized sampling distribution. The end-of-sequence
    action's log-probability is dropped here to keep the two return values
    aligned; ``generate_batch`` exposes the full rollout detail.
    """
    if not prompt:
        raise ValueError("prompt must be nonempty")
    gen = torch.Generator().manual_seed(config.seed)
    ids = [vocab.bos_id] + vocab.encode(prompt)
    result = generate_batch(model, vocab, [ids], config, gen)
    tokens = result.generated_tokens(vocab, 0)
    logps = [float(x) for x in result.logprobs[0][result.gen_mask[0]]]
    return tokens, logps[: len(tokens)]


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 1500
    batch_size: int = 32
    learning_rate: float = 3e-3
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.learning_rate < 0 or self.grad_clip <= 0:
            raise ValueError("learning_rate must be >= 0 and grad_clip > 0")


def batch_cross_entropy(model: PolicyModel, vocab: Vocabulary,
                        sequences: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean next-token cross-entropy over already-encoded id sequences."""
    width = max(len(row) for row in sequences)
    ids = torch.full((len(sequences), width), vocab.pad_id, dtype=torch.long)
    for i, row in enumerate(sequences):
        ids[i, : len(row)] = torch.tensor(list(row), dtype=torch.long)
    inputs, targets = ids[:, :-1], ids[:, 1:]
    logits, _ = model(inputs, pad_id=vocab.pad_id)
    keep = targets != vocab.pad_id
    return F.cross_entropy(logits[keep], targets[keep])


def encode_corpus(vocab: Vocabulary, corpus: Sequence[Sequence[str]]) -> list[list[int]]:
    """Wrap each text as <bos> tokens <eos>; texts may mention <sep> inline."""
    return [[vocab.bos_id] + vocab.encode(seq) + [vocab.eos_id] for seq in corpus]


def held_out_ce(model: PolicyModel, vocab: Vocabulary,
                corpus: Sequence[Sequence[str]], batch_size: int = 64) -> float:
    """Mean next-token cross-entropy of a text corpus, without gradients."""
    encoded = encode_corpus(vocab, corpus)
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(encoded), batch_size):
            chunk = encoded[lo : lo + batch_size]
            n = sum(len(row) - 1 for row in chunk)
            total += float(batch_cross_entropy(model, vocab, chunk)) * n
            count += n
    return total / count


def pretrain_lm(
    model: PolicyModel, vocab: Vocabulary, corpus: Sequence[Sequence[str]],
    config: PretrainConfig, start_step: int = 0,
    log_fn: Callable[[int, float], None] | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> list[float]:
    """Teacher-forced next-token training on a corpus of token sequences.

    Returns the per-step losses. Step i draws its batch from a child seed
    of ``config.seed``, so a resumed run consumes the same batches it would
    have seen uninterrupted (the optimizer state starts fresh on resume;
    only step numbering carries over). Passing ``optimizer`` lets callers
    interleave this with other objectives without resetting moments. A
    non-finite loss aborts with the offending step in the message.
    """
    if not corpus:
        raise ValueError("empty training corpus")
    encoded = encode_corpus(vocab, corpus)
    if optimizer is None:
        optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    losses = []
    for step in range(start_step, config.steps):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=config.seed, spawn_key=(step,)))
        idx = rng.integers(len(encoded), size=config.batch_size)
        loss = batch_cross_entropy(model, vocab, [encoded[int(i)] for i in idx])
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite pretraining loss at step {step}: {loss}")
        optimizer.zero_grad()
        loss.backward()
        if config.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        optimizer.step()
        losses.append(float(loss.detach()))
        if log_fn is not None:
            log_fn(step, losses[-1])
    return losses
