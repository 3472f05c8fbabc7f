"""Shared fixtures.

The light fixtures (world, vocabulary, datasets) are cheap and session
scoped. The heavy ones (pretrained speaker, fine-tuned listener, training
runs) are also session scoped so the acceptance tests share one instance;
they are built lazily, so unit-test-only sessions never pay for them.
"""

import dataclasses

import numpy as np
import pytest
import torch

from refgame.agents import ListenerTrainConfig, OracleListener, Speaker, train_listener
from refgame.corpus import (
    WorldSpec,
    build_world,
    generate_dataset,
    grammar_from_world,
    pretraining_corpus,
)
from refgame.game import BottleneckSpec
from refgame.lm import (
    DecodeConfig,
    ModelConfig,
    PolicyModel,
    PretrainConfig,
    Vocabulary,
    pretrain_lm,
)
from refgame.rl import PPOConfig
from refgame.textmetrics import default_stopwords

torch.set_num_threads(4)

# Desk-scale experiment shape shared by the long-running tests. Tuned so the
# speaker has reward headroom after pretraining and the listener reaches
# high holdout accuracy within minutes on a CPU.
DESK_MODEL = dict(d_model=32, n_heads=2, n_layers=2, d_ff=64, max_seq_len=96)
DESK_DECODE = DecodeConfig(max_new_tokens=32, min_length=2, top_k=50, top_p=0.95,
                           epsilon_cutoff=3e-3, num_beams=1, temperature=1.0, seed=0)
DESK_PRETRAIN = PretrainConfig(steps=2500, batch_size=32, learning_rate=3e-3, seed=5)
DESK_LISTENER = ListenerTrainConfig(steps=1500, batch_size=32, learning_rate=3e-3,
                                    seed=7)
DESK_PPO = PPOConfig(learning_rate=3e-4, ppo_epochs=4, minibatch_size=16,
                     batch_size=32, clip_range=0.2, ratio_threshold=10.0,
                     kl_coefficient=0.05, total_steps=200, seed=17)


@pytest.fixture(scope="session")
def world():
    return build_world(WorldSpec(seed=0))


@pytest.fixture(scope="session")
def vocab(world):
    return Vocabulary(world.terminals())


@pytest.fixture(scope="session")
def grammar(world):
    return grammar_from_world(world)


@pytest.fixture(scope="session")
def stopwords():
    return default_stopwords()


@pytest.fixture(scope="session")
def train_set(world):
    return generate_dataset(world, 256)


@pytest.fixture(scope="session")
def holdout_set(world):
    return generate_dataset(world, 64, offset=256)


@pytest.fixture(scope="session")
def model_config(vocab):
    return ModelConfig(vocab_size=len(vocab), **DESK_MODEL)


def _cache_key(*parts) -> str:
    """Hash of both the requested configuration and the source files whose
    behavior the cached artifact bakes in. Editing any of those modules
    invalidates the cache, so a stale checkpoint can never mask a change."""
    import hashlib
    from pathlib import Path

    src = Path(__file__).resolve().parent.parent / "src" / "refgame"
    h = hashlib.sha256()
    for name in ("lm.py", "agents.py", "corpus.py", "textmetrics.py"):
        h.update((src / name).read_bytes())
    for part in parts:
        h.update(repr(part).encode())
    return h.hexdigest()[:16]


def _cache_dir():
    from pathlib import Path

    path = Path(__file__).resolve().parent / ".cache"
    path.mkdir(exist_ok=True)
    return path


@pytest.fixture(scope="session")
def pretrained_model(model_config, vocab, train_set):
    from refgame.lm import load_checkpoint, save_checkpoint

    path = _cache_dir() / f"pretrained-{_cache_key(model_config, DESK_PRETRAIN)}.ckpt"
    if path.exists():
        model, _, _ = load_checkpoint(path)
        return model
    model = PolicyModel(model_config, seed=101)
    corpus = pretraining_corpus(train_set, seed=3, n_demonstrations=4)
    pretrain_lm(model, vocab, corpus, DESK_PRETRAIN)
    save_checkpoint(path, model, vocab)
    return model


@pytest.fixture(scope="session")
def pretrained_ckpt_path(pretrained_model, model_config):
    """Path of the cached pretrained checkpoint (built by pretrained_model)."""
    return _cache_dir() / f"pretrained-{_cache_key(model_config, DESK_PRETRAIN)}.ckpt"


@pytest.fixture(scope="session")
def listener_base_model(model_config, vocab, train_set):
    """Reader initialization: same pretraining recipe, grammatical register
    only. The compressed register exists so the speaker can explore it; a
    reader fine-tuned from a single-register model extracts answers more
    reliably."""
    from refgame.lm import load_checkpoint, save_checkpoint

    key = _cache_key("reader-base", model_config, DESK_PRETRAIN)
    path = _cache_dir() / f"listener-base-{key}.ckpt"
    if path.exists():
        model, _, _ = load_checkpoint(path)
        return model
    model = PolicyModel(model_config, seed=101)
    corpus = pretraining_corpus(train_set, seed=3, n_demonstrations=4,
                                telegraphic_probability=0.0)
    pretrain_lm(model, vocab, corpus, DESK_PRETRAIN)
    save_checkpoint(path, model, vocab)
    return model


@pytest.fixture(scope="session")
def learned_listener(listener_base_model, vocab, train_set, holdout_set,
                     stopwords):
    from refgame.agents import load_listener, save_listener

    key = _cache_key("reader-base", DESK_MODEL, DESK_PRETRAIN, DESK_LISTENER)
    path = _cache_dir() / f"listener-{key}.ckpt"
    if path.exists():
        listener = load_listener(path)
        listener.holdout_accuracy = float(
            path.with_suffix(".acc").read_text())
        return listener
    listener, _ = train_listener(listener_base_model, vocab, train_set,
                                 DESK_LISTENER, stopwords, holdout=holdout_set)
    save_listener(path, listener)
    path.with_suffix(".acc").write_text(repr(listener.holdout_accuracy))
    return listener


@pytest.fixture(scope="session")
def learned_listener_path(learned_listener):
    """Path of the cached listener checkpoint (built by learned_listener)."""
    key = _cache_key("reader-base", DESK_MODEL, DESK_PRETRAIN, DESK_LISTENER)
    return _cache_dir() / f"listener-{key}.ckpt"


@pytest.fixture(scope="session")
def oracle_listener(world, pretrained_model, vocab):
    return OracleListener(world, lm_model=pretrained_model, lm_vocab=vocab)


def make_speaker(pretrained_model, vocab, seed=0):
    """Fresh trainable copy of the pretrained speaker."""
    from refgame.lm import clone_model

    return Speaker(model=clone_model(pretrained_model), vocab=vocab,
                   decode=dataclasses.replace(DESK_DECODE, seed=seed))


def seeded_rng(test_name: str, case: int = 0) -> np.random.Generator:
    """Deterministic per-test randomness without global seeding."""
    import zlib

    return np.random.default_rng(
        np.random.SeedSequence(entropy=zlib.crc32(test_name.encode()),
                               spawn_key=(case,)))


def pytest_terminal_summary(terminalreporter):
    """Echo the one-line verdicts of the end-to-end audit tests."""
    import sys

    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance checks")
        for line in verdicts:
            terminalreporter.write_line(line)
