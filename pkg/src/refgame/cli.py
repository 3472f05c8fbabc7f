"""Command-line entry point for the whole experiment pipeline.

Subcommands: pretrain, train-listener, train, train-mixed, feasibility,
sweep, report. Every run directory is self-describing: it receives the
fully resolved config, an environment/version stamp, CSV logs, and
checkpoints before anything long-running starts, and commands never mutate
their input files.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure. Set
REFGAME_LOG_LEVEL (DEBUG/INFO/WARNING/...) to change verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import zlib
from pathlib import Path

import numpy as np
import yaml

from .agents import (
    OracleListener,
    Speaker,
    load_listener,
    save_listener,
    train_listener,
)
from .config import ConfigError, ExperimentConfig, load_config, save_resolved
from .corpus import (
    World,
    build_world,
    generate_dataset,
    grammar_from_world,
    pretraining_corpus,
    save_world,
)
from .game import BottleneckSpec, write_episodes
from .lm import (
    PolicyModel,
    Vocabulary,
    clone_model,
    fingerprint,
    load_checkpoint,
    pretrain_lm,
    save_checkpoint,
)
from .perturb import feasibility_study
from .report import RunLogWriter, environment_stamp, make_report, write_json
from .rl import TrainState, train, train_mixed
from .textmetrics import default_stopwords

logger = logging.getLogger("refgame")


def stage_seed(run_seed: int, stage: str) -> int:
    """Derive an independent stage seed from the single run seed."""
    seq = np.random.SeedSequence(
        entropy=run_seed, spawn_key=(zlib.crc32(stage.encode()),))
    return int(seq.generate_state(1, np.uint64)[0])


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; remap to this tool's 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


@dataclasses.dataclass
class Workspace:
    """World, vocabulary, grammar and datasets shared by every command."""

    cfg: ExperimentConfig
    world: World
    vocab: Vocabulary
    grammar: object
    stopwords: frozenset
    train_set: list
    holdout_set: list


def prepare(cfg: ExperimentConfig) -> Workspace:
    world = build_world(cfg.world)
    vocab = Vocabulary(world.terminals())
    grammar = grammar_from_world(world)
    train_set = generate_dataset(world, cfg.dataset.n_train)
    holdout_set = generate_dataset(world, cfg.dataset.n_holdout,
                                   offset=cfg.dataset.n_train)
    return Workspace(cfg=cfg, world=world, vocab=vocab, grammar=grammar,
                     stopwords=default_stopwords(), train_set=train_set,
                     holdout_set=holdout_set)


def _init_run_dir(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_resolved(cfg, out / "resolved_config.yaml")
    write_json(out / "env_stamp.json", environment_stamp())


def _check_vocab(ws: Workspace, vocab: Vocabulary, path) -> None:
    if vocab != ws.vocab:
        raise ValueError(
            f"{path}: checkpoint vocabulary does not match the configured world")


class _CsvLoss:
    """Tiny step,loss logger used by the pretrain/listener stages."""

    def __init__(self, path: Path, append: bool):
        fresh = not (append and path.exists())
        self._fh = open(path, "a" if not fresh else "w")
        if fresh:
            self._fh.write("step,loss\n")

    def __call__(self, step: int, loss: float) -> None:
        self._fh.write(f"{step},{loss!r}\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def cmd_pretrain(cfg: ExperimentConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    _init_run_dir(cfg, out)
    ws = prepare(cfg)
    save_world(out / "world.json", ws.world)
    corpus = pretraining_corpus(
        ws.train_set, seed=stage_seed(seed, "corpus"),
        keep_probability=cfg.dataset.keep_probability,
        n_demonstrations=cfg.dataset.n_demonstrations,
        telegraphic_probability=cfg.dataset.telegraphic_probability)
    pcfg = dataclasses.replace(cfg.pretrain, seed=stage_seed(seed, "pretrain"))
    ckpt_path = out / "speaker.ckpt"
    start = 0
    if args.resume and ckpt_path.exists():
        model, vocab, extra = load_checkpoint(ckpt_path)
        _check_vocab(ws, vocab, ckpt_path)
        start = int(extra.get("step", 0))
        logger.info("resuming pretraining at step %d", start)
    else:
        model = PolicyModel(cfg.model_config(len(ws.vocab)),
                            seed=stage_seed(seed, "model"))
    if start >= pcfg.steps:
        logger.info("pretraining already complete (%d steps)", start)
        return 0
    loss_log = _CsvLoss(out / "pretrain_loss.csv", append=args.resume)

    def on_step(step: int, loss: float) -> None:
        loss_log(step, loss)
        if (step + 1) % cfg.checkpoint_interval == 0:
            save_checkpoint(ckpt_path, model, ws.vocab,
                            extra={"stage": "pretrain", "step": step + 1,
                                   "seed": seed})

    try:
        losses = pretrain_lm(model, ws.vocab, corpus, pcfg,
                             start_step=start, log_fn=on_step)
    finally:
        loss_log.close()
    save_checkpoint(ckpt_path, model, ws.vocab,
                    extra={"stage": "pretrain", "step": pcfg.steps, "seed": seed})
    print(f"pretrained {pcfg.steps - start} steps "
          f"(loss {losses[0]:.4f} -> {losses[-1]:.4f}); wrote {ckpt_path}")
    return 0


def cmd_train_listener(cfg: ExperimentConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    _init_run_dir(cfg, out)
    ws = prepare(cfg)
    base_model, vocab, _ = load_checkpoint(args.pretrained)
    _check_vocab(ws, vocab, args.pretrained)
    lcfg = dataclasses.replace(cfg.listener, seed=stage_seed(seed, "listener"))
    loss_log = _CsvLoss(out / "listener_loss.csv", append=False)
    try:
        listener, _ = train_listener(base_model, ws.vocab, ws.train_set, lcfg,
                                     ws.stopwords, holdout=ws.holdout_set,
                                     log_fn=loss_log)
    finally:
        loss_log.close()
    ckpt_path = out / "listener.ckpt"
    save_listener(ckpt_path, listener,
                  extra={"holdout_accuracy": listener.holdout_accuracy,
                         "accuracy_warning": listener.accuracy_warning,
                         "seed": seed})
    write_json(out / "listener_header.json",
               {"holdout_accuracy": listener.holdout_accuracy,
                "accuracy_warning": listener.accuracy_warning,
                "fingerprint": listener.fingerprint(), "seed": seed})
    print(f"listener holdout exact-match accuracy: "
          f"{listener.holdout_accuracy:.4f}"
          + ("  (below target)" if listener.accuracy_warning else ""))
    print(f"wrote {ckpt_path}")
    return 0


def _load_listener_for_run(ws: Workspace, listener_path, speaker_model):
    """Learned listener from a checkpoint, else the rule-based reader with
    the (frozen) pretrained language model attached for surprisal pricing."""
    if listener_path is not None:
        listener = load_listener(listener_path)
        _check_vocab(ws, listener.vocab, listener_path)
        return listener
    return OracleListener(ws.world, lm_model=clone_model(speaker_model),
                          lm_vocab=ws.vocab)


def _run_training(cfg: ExperimentConfig, seed: int, out: Path,
                  pretrained, listener_path, resume: bool) -> dict:
    """One rl.train run in its own directory; returns the final log row."""
    _init_run_dir(cfg, out)
    ws = prepare(cfg)
    base_model, vocab, _ = load_checkpoint(pretrained)
    _check_vocab(ws, vocab, pretrained)
    listener = _load_listener_for_run(ws, listener_path, base_model)
    ref_model = clone_model(base_model)

    decode = dataclasses.replace(cfg.decode, seed=stage_seed(seed, "decode"))
    ppo = dataclasses.replace(cfg.ppo, seed=stage_seed(seed, "ppo"))
    latest_path = out / "speaker_latest.ckpt"
    episodes_path = out / "episodes.jsonl"
    state = None
    if resume and latest_path.exists():
        model, vocab, extra = load_checkpoint(latest_path)
        _check_vocab(ws, vocab, latest_path)
        state = TrainState.from_dict(extra["train_state"])
        logger.info("resuming training at step %d", state.step)
    else:
        model = base_model
        episodes_path.unlink(missing_ok=True)
    speaker = Speaker(model=model, vocab=ws.vocab, decode=decode)

    write_json(out / "run_header.json", {
        "bottleneck_kind": cfg.bottleneck.kind,
        "mode": cfg.bottleneck.mode,
        "lambda": cfg.bottleneck.weight,
        "cutoff_budget": cfg.bottleneck.cutoff_budget,
        "seed": seed,
        "ppo": dataclasses.asdict(ppo),
        "decode": dataclasses.asdict(decode),
        "listener_fingerprint": listener.fingerprint(),
        "reference_fingerprint": fingerprint(ref_model),
        "speaker_checkpoint": str(pretrained),
        "listener_checkpoint": str(listener_path) if listener_path else None,
    })

    log_writer = RunLogWriter(out / "run_log.csv", append=resume)
    last_row = {}

    def on_step(row, records, train_state) -> None:
        nonlocal last_row
        last_row = row
        log_writer.write_row(row)
        write_episodes(episodes_path, records, append=True)
        if (train_state.step % cfg.checkpoint_interval == 0
                or train_state.step == ppo.total_steps):
            save_checkpoint(latest_path, speaker.model, ws.vocab,
                            extra={"train_state": train_state.to_dict(),
                                   "seed": seed})

    try:
        train(speaker, listener, ws.train_set, cfg.bottleneck, ppo,
              ws.stopwords, ws.grammar, ref_model=ref_model, state=state,
              on_step=on_step)
    finally:
        log_writer.close()
    save_checkpoint(out / "speaker_final.ckpt", speaker.model, ws.vocab,
                    extra={"seed": seed, "steps": ppo.total_steps})
    write_json(out / "done.json", {"steps": ppo.total_steps, "final": last_row})
    return last_row


def cmd_train(cfg: ExperimentConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    row = _run_training(cfg, seed, Path(args.out), args.pretrained,
                        args.listener, args.resume)
    if row:
        print(f"finished at step {row['step']}: reward {row['mean_reward']:.4f} "
              f"penalty {row['mean_penalty']:.4f} score {row['mean_score']:.4f}")
    else:
        print("nothing to do (total_steps reached)")
    return 0


def cmd_train_mixed(cfg: ExperimentConfig, args) -> int:
    if args.resume:
        logger.error("train-mixed does not support --resume")
        return 1
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    _init_run_dir(cfg, out)
    ws = prepare(cfg)
    if args.pretrained:
        model, vocab, _ = load_checkpoint(args.pretrained)
        _check_vocab(ws, vocab, args.pretrained)
    else:
        model = PolicyModel(cfg.model_config(len(ws.vocab)),
                            seed=stage_seed(seed, "model"))
    listener = _load_listener_for_run(ws, args.listener, model)
    corpus = pretraining_corpus(
        ws.train_set, seed=stage_seed(seed, "corpus"),
        keep_probability=cfg.dataset.keep_probability,
        n_demonstrations=cfg.dataset.n_demonstrations,
        telegraphic_probability=cfg.dataset.telegraphic_probability)
    decode = dataclasses.replace(cfg.decode, seed=stage_seed(seed, "decode"))
    ppo = dataclasses.replace(cfg.ppo, seed=stage_seed(seed, "ppo"))
    pcfg = dataclasses.replace(cfg.pretrain, seed=stage_seed(seed, "pretrain"))
    speaker = Speaker(model=model, vocab=ws.vocab, decode=decode)
    write_json(out / "run_header.json", {
        "bottleneck_kind": cfg.bottleneck.kind,
        "mode": cfg.bottleneck.mode,
        "lambda": cfg.bottleneck.weight,
        "cutoff_budget": cfg.bottleneck.cutoff_budget,
        "seed": seed,
        "ppo": dataclasses.asdict(ppo),
        "decode": dataclasses.asdict(decode),
        "schedule": dataclasses.asdict(cfg.mixed),
        "listener_fingerprint": listener.fingerprint(),
    })
    episodes_path = out / "episodes.jsonl"
    episodes_path.unlink(missing_ok=True)
    log_writer = RunLogWriter(out / "run_log.csv")
    lm_loss_log = _CsvLoss(out / "lm_loss.csv", append=False)

    def on_step(row, records, train_state) -> None:
        log_writer.write_row(row)
        write_episodes(episodes_path, records, append=True)

    try:
        outcome = train_mixed(speaker, corpus, listener, ws.train_set,
                              cfg.bottleneck, ppo, pcfg, cfg.mixed,
                              ws.stopwords, ws.grammar, on_step=on_step)
        for step, loss in enumerate(outcome["lm_losses"]):
            lm_loss_log(step, loss)
    finally:
        log_writer.close()
        lm_loss_log.close()
    save_checkpoint(out / "speaker_final.ckpt", speaker.model, ws.vocab,
                    extra={"seed": seed, "mixed": True})
    print(f"mixed training done: {len(outcome['lm_losses'])} LM steps, "
          f"{len(outcome['run_log'])} game steps")
    return 0


def cmd_feasibility(cfg: ExperimentConfig, args) -> int:
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    out = Path(args.out)
    _init_run_dir(cfg, out)
    ws = prepare(cfg)
    if args.listener is not None:
        listener = load_listener(args.listener)
        _check_vocab(ws, listener.vocab, args.listener)
    else:
        listener = OracleListener(ws.world)
        logger.warning("no --listener given; using the rule-based reader "
                       "(baseline conditions will hit its ceiling)")
    dataset = ws.holdout_set if ws.holdout_set else ws.train_set
    table = feasibility_study(listener, dataset, grid=cfg.perturbations.grid,
                              n_episodes=cfg.perturbations.n_episodes,
                              seed=stage_seed(seed, "feasibility"),
                              stopwords=ws.stopwords)
    table.to_csv(out / "degradation.csv")
    text = table.format_text()
    (out / "degradation.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    out = Path(args.out)
    _init_run_dir(cfg, out)
    ran, skipped, failed = 0, 0, 0
    for kind in cfg.sweep.kinds:
        for lam in cfg.sweep.lambdas:
            for seed in cfg.seeds:
                cell = out / f"{kind}_lam{lam:g}_seed{seed}"
                if (cell / "done.json").exists():
                    logger.info("skipping completed cell %s", cell.name)
                    skipped += 1
                    continue
                cell_cfg = dataclasses.replace(
                    cfg, bottleneck=BottleneckSpec(kind=kind, mode="penalty",
                                                   weight=lam))
                try:
                    _run_training(cell_cfg, seed, cell, args.pretrained,
                                  args.listener, resume=args.resume)
                    ran += 1
                except Exception as exc:
                    logger.exception("cell %s failed", cell.name)
                    cell.mkdir(parents=True, exist_ok=True)
                    write_json(cell / "failed.json", {"error": repr(exc)})
                    failed += 1
    print(f"sweep: {ran} cells run, {skipped} skipped, {failed} failed")
    return 0 if failed == 0 else 2


def cmd_report(cfg: ExperimentConfig, args) -> int:
    run_dirs = []
    for raw in args.runs:
        path = Path(raw)
        if (path / "run_header.json").exists():
            run_dirs.append(path)
        elif path.is_dir():
            run_dirs.extend(sorted(
                child for child in path.iterdir()
                if (child / "run_header.json").exists()))
        else:
            logger.error("not a run directory: %s", path)
            return 1
    if not run_dirs:
        logger.error("no completed runs found under %s", args.runs)
        return 1
    written = make_report(run_dirs, args.out)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="refgame",
                     description="Reference-game compression experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, resume: bool = True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="output directory")
        if resume:
            p.add_argument("--resume", action="store_true",
                           help="continue from checkpoints in --out")

    p = sub.add_parser("pretrain", help="next-token pretraining of the speaker")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-listener", help="fine-tune the reader for QA")
    common(p, resume=False)
    p.add_argument("--pretrained", required=True,
                   help="speaker checkpoint to start from")
    p.set_defaults(func=cmd_train_listener, resume=False)

    p = sub.add_parser("train", help="train the speaker on game episodes")
    common(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--listener", help="learned listener checkpoint "
                                      "(default: rule-based reader)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-mixed",
                       help="interleave next-token and game training")
    common(p)
    p.add_argument("--pretrained", help="optional warm start")
    p.add_argument("--listener")
    p.set_defaults(func=cmd_train_mixed)

    p = sub.add_parser("feasibility",
                       help="listener degradation under perturbed passages")
    common(p, resume=False)
    p.add_argument("--listener")
    p.set_defaults(func=cmd_feasibility, resume=False)

    p = sub.add_parser("sweep", help="bottleneck kind x lambda x seed grid")
    common(p)
    p.add_argument("--pretrained", required=True)
    p.add_argument("--listener")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="aggregate completed runs")
    p.add_argument("runs", nargs="+",
                   help="run directories (or parents of them)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report, config=None, seed=None)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("REFGAME_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
    except (OSError, ConfigError, yaml.YAMLError) as exc:
        logger.error("config: %s", exc)
        return 1
    try:
        return int(args.func(cfg, args) or 0)
    except KeyboardInterrupt:
        raise
    except Exception:
        logger.exception("%s failed", args.command)
        return 2


if __name__ == "__main__":
    sys.exit(main())
