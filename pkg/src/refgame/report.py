"""Run logs, environment stamps, and cross-seed aggregation/plots.

A run log is a CSV with one row per training step and a fixed column
schema. Floats are written with ``repr`` so that a bit-identical rerun
produces a byte-identical file — diffing two logs is a legitimate
reproducibility check, not just a convenience.

Aggregation groups runs by (bottleneck kind, lambda), treats seeds as the
sample, and reports mean trajectories with percentile-bootstrap 95%
confidence intervals. Bootstrap seeds are derived from the group/step/
metric labels, so re-running the report on the same inputs rewrites the
same bytes.
"""

from __future__ import annotations

import csv
import json
import platform
import sys
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import __version__  # noqa: E402
from .rl import RUN_LOG_COLUMNS  # noqa: E402
from .stats import bootstrap_mean_ci  # noqa: E402

_INT_COLUMNS = frozenset({"step", "skipped_minibatches"})

PLOT_METRICS = ("mean_reward", "mean_penalty", "mean_score",
                "function_word_fraction", "grammatical_error_rate",
                "mean_sentence_length", "kl")


def format_cell(column: str, value) -> str:
    if column in _INT_COLUMNS:
        return str(int(value))
    return repr(float(value))


class RunLogWriter:
    """Streams run-log rows to CSV, one flush per row so partial runs are
    inspectable. ``append=True`` continues an existing file (resume)."""

    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        fresh = not (append and self.path.exists())
        self._fh = open(self.path, "a" if not fresh else "w", newline="")
        if fresh:
            self._fh.write(",".join(RUN_LOG_COLUMNS) + "\n")
            self._fh.flush()

    def write_row(self, row: dict) -> None:
        if set(row) != set(RUN_LOG_COLUMNS):
            missing = set(RUN_LOG_COLUMNS) - set(row)
            extra = set(row) - set(RUN_LOG_COLUMNS)
            raise ValueError(f"bad run-log row (missing {sorted(missing)}, "
                             f"extra {sorted(extra)})")
        cells = [format_cell(col, row[col]) for col in RUN_LOG_COLUMNS]
        self._fh.write(",".join(cells) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_run_log(path, rows: Sequence[dict]) -> None:
    with RunLogWriter(path) as writer:
        for row in rows:
            writer.write_row(row)


def read_run_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != RUN_LOG_COLUMNS:
            raise ValueError(
                f"{path}: unexpected run-log columns {reader.fieldnames}")
        rows = []
        for line in reader:
            rows.append({col: (int(line[col]) if col in _INT_COLUMNS
                               else float(line[col]))
                         for col in RUN_LOG_COLUMNS})
    return rows


def environment_stamp() -> dict:
    import torch
    import yaml

    return {
        "package_version": __version__,
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "numpy": np.__version__,
        "torch": torch.__version__,
        "pyyaml": yaml.__version__,
        "matplotlib": matplotlib.__version__,
    }


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


@dataclass(frozen=True)
class RunRecord:
    """One completed run: its header (kind, lambda, seed, ...) plus log rows."""

    kind: str
    weight: float
    seed: int
    rows: tuple[dict, ...]

    @property
    def group(self) -> tuple[str, float]:
        return (self.kind, self.weight)


def load_run_dir(run_dir) -> RunRecord:
    run_dir = Path(run_dir)
    header = read_json(run_dir / "run_header.json")
    rows = read_run_log(run_dir / "run_log.csv")
    return RunRecord(kind=str(header["bottleneck_kind"]),
                     weight=float(header["lambda"]),
                     seed=int(header["seed"]),
                     rows=tuple(rows))


def _group_runs(records: Sequence[RunRecord]) -> dict[tuple[str, float], list[RunRecord]]:
    groups: dict[tuple[str, float], list[RunRecord]] = {}
    for rec in records:
        groups.setdefault(rec.group, []).append(rec)
    for key, members in groups.items():
        lengths = {len(m.rows) for m in members}
        if len(lengths) != 1:
            raise ValueError(
                f"group kind={key[0]} lambda={key[1]}: unequal run lengths "
                f"{sorted(lengths)} across seeds {[m.seed for m in members]}")
    return groups


def _ci_seed(kind: str, weight: float, step: int, metric: str) -> int:
    return zlib.crc32(f"{kind}:{weight!r}:{step}:{metric}".encode())


def aggregate_runs(records: Sequence[RunRecord]) -> list[dict]:
    """Long-format aggregate: one row per (kind, lambda, step, metric)."""
    if not records:
        raise ValueError("no runs to aggregate")
    out = []
    for (kind, weight), members in sorted(_group_runs(records).items()):
        members = sorted(members, key=lambda m: m.seed)
        n_steps = len(members[0].rows)
        for t in range(n_steps):
            step = members[0].rows[t]["step"]
            for metric in RUN_LOG_COLUMNS:
                if metric == "step":
                    continue
                values = [m.rows[t][metric] for m in members]
                mean, lo, hi = bootstrap_mean_ci(
                    values, seed=_ci_seed(kind, weight, step, metric))
                out.append({"kind": kind, "lambda": weight, "step": step,
                            "metric": metric, "mean": mean, "ci_low": lo,
                            "ci_high": hi, "n_seeds": len(members)})
    return out


def write_aggregate_csv(path, agg_rows: Sequence[dict]) -> None:
    columns = ("kind", "lambda", "step", "metric", "mean", "ci_low",
               "ci_high", "n_seeds")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in agg_rows:
            writer.writerow([row["kind"], repr(float(row["lambda"])),
                             int(row["step"]), row["metric"],
                             repr(float(row["mean"])), repr(float(row["ci_low"])),
                             repr(float(row["ci_high"])), int(row["n_seeds"])])


def final_step_summary(records: Sequence[RunRecord]) -> str:
    """Per (kind, lambda): across-seed means of reward/penalty/score at the
    final logged step."""
    lines = [f"{'kind':<10} {'lambda':>6} {'reward':>8} {'penalty':>8} {'score':>8}"]
    for (kind, weight), members in sorted(_group_runs(records).items()):
        reward = float(np.mean([m.rows[-1]["mean_reward"] for m in members]))
        penalty = float(np.mean([m.rows[-1]["mean_penalty"] for m in members]))
        score = float(np.mean([m.rows[-1]["mean_score"] for m in members]))
        lines.append(f"{kind:<10} {weight:6.2f} {reward:8.4f} {penalty:8.4f} "
                     f"{score:8.4f}")
    return "\n".join(lines)


def plot_metric(records: Sequence[RunRecord], metric: str, out_path) -> None:
    """One figure per metric: mean trajectory per (kind, lambda) with a
    shaded bootstrap CI band."""
    groups = _group_runs(records)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (kind, weight), members in sorted(groups.items()):
        steps = [row["step"] for row in members[0].rows]
        means, los, his = [], [], []
        for t, step in enumerate(steps):
            values = [m.rows[t][metric] for m in members]
            mean, lo, hi = bootstrap_mean_ci(
                values, seed=_ci_seed(kind, weight, step, metric))
            means.append(mean)
            los.append(lo)
            his.append(hi)
        label = f"{kind} λ={weight:g}"
        (line,) = ax.plot(steps, means, label=label)
        ax.fill_between(steps, los, his, alpha=0.2, color=line.get_color())
    ax.set_xlabel("step")
    ax.set_ylabel(metric)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def make_report(run_dirs: Sequence, out_dir) -> list[Path]:
    """Aggregate completed runs into CSV + summary + plots; returns paths."""
    records = [load_run_dir(d) for d in run_dirs]
    if not records:
        raise ValueError("no run directories given")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    agg = aggregate_runs(records)
    csv_path = out_dir / "aggregate.csv"
    write_aggregate_csv(csv_path, agg)
    written.append(csv_path)
    summary_path = out_dir / "summary.txt"
    with open(summary_path, "w") as fh:
        fh.write(final_step_summary(records) + "\n")
    written.append(summary_path)
    for metric in PLOT_METRICS:
        plot_path = out_dir / f"{metric}.png"
        plot_metric(records, metric, plot_path)
        written.append(plot_path)
    return written
