"""Per-step evaluation log shared by the behavioral and neural analyses."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .env import TRACE_COLUMNS, Action, TaskKind, write_trace_csv

# appended after the standard trace columns; needed to tell oven checks apart
# from other interactions
EXTRA_COLUMNS = ("outcome", "at_oven")
ACTION_NAMES = [a.name.lower() for a in Action]


@dataclass
class EvalTrace:
    """Columnar trace.  Missing oven timer / number values are stored as -1."""

    task: TaskKind
    target: int
    episode: np.ndarray
    step: np.ndarray
    trial: np.ndarray
    action: np.ndarray
    oven_timer: np.ndarray
    number_value: np.ndarray
    reward: np.ndarray
    delivery: np.ndarray
    correct_number: np.ndarray
    outcome: np.ndarray
    at_oven: np.ndarray
    hidden: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.step)

    @property
    def n_episodes(self) -> int:
        return int(self.episode.max()) + 1 if len(self) else 0

    def episode_slice(self, ep: int) -> slice:
        idx = np.flatnonzero(self.episode == ep)
        if len(idx) == 0:
            raise KeyError(f"episode {ep} not in trace")
        return slice(int(idx[0]), int(idx[-1]) + 1)

    @classmethod
    def from_rows(cls, task, target, rows, hidden=None) -> "EvalTrace":
        def col(name, dtype, missing=None):
            vals = [r[name] for r in rows]
            if missing is not None:
                vals = [missing if v in ("", None) else v for v in vals]
            return np.asarray(vals, dtype=dtype)

        actions = [r["action"] for r in rows]
        actions = [ACTION_NAMES.index(a) if isinstance(a, str) else int(a) for a in actions]
        return cls(
            task=TaskKind(task),
            target=int(target),
            episode=col("episode", np.int64),
            step=col("step", np.int64),
            trial=col("trial", np.int64),
            action=np.asarray(actions, dtype=np.int64),
            oven_timer=col("oven_timer", np.int64, missing=-1),
            number_value=col("number_value", np.int64, missing=-1),
            reward=col("reward", np.float64),
            delivery=col("delivery", np.int64).astype(bool),
            correct_number=col("correct_number", np.int64).astype(bool),
            outcome=np.asarray([r.get("outcome") or "" for r in rows], dtype=object),
            at_oven=np.asarray([int(r.get("at_oven") or 0) for r in rows], dtype=bool),
            hidden=hidden,
        )

    def rows(self):
        for i in range(len(self)):
            yield {
                "episode": int(self.episode[i]),
                "step": int(self.step[i]),
                "trial": int(self.trial[i]),
                "action": ACTION_NAMES[self.action[i]],
                "oven_timer": "" if self.oven_timer[i] < 0 else int(self.oven_timer[i]),
                "number_value": "" if self.number_value[i] < 0 else int(self.number_value[i]),
                "reward": f"{self.reward[i]:g}",
                "delivery": int(self.delivery[i]),
                "correct_number": int(self.correct_number[i]),
                "outcome": self.outcome[i],
                "at_oven": int(self.at_oven[i]),
            }

    def write_csv(self, path) -> None:
        write_trace_csv(path, self.rows(), EXTRA_COLUMNS)

    def save(self, csv_path) -> Path:
        """Write the CSV and, if present, the hidden states to a ``.npy`` sidecar."""
        csv_path = Path(csv_path)
        self.write_csv(csv_path)
        if self.hidden is not None:
            np.save(hidden_path(csv_path), self.hidden)
        return csv_path

    @classmethod
    def load(cls, csv_path, task, target) -> "EvalTrace":
        csv_path = Path(csv_path)
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        missing = set(TRACE_COLUMNS) - set(rows[0] if rows else TRACE_COLUMNS)
        if missing:
            raise ValueError(f"{csv_path}: missing trace columns {sorted(missing)}")
        sidecar = hidden_path(csv_path)
        hidden = np.load(sidecar) if sidecar.exists() else None
        return cls.from_rows(task, target, rows, hidden)


def step_row(episode: int, action, result) -> dict:
    """Trace row for one ``env.StepResult``."""
    info = result.info
    return {
        "episode": episode,
        "step": info["step"],
        "trial": info["trial_index"],
        "action": int(action),
        "oven_timer": info["oven_timer"],
        "number_value": info["number_value"],
        "reward": result.reward,
        "delivery": int(info["delivery_flag"]),
        "correct_number": int(info["correct_number_flag"]),
        "outcome": info["outcome"].value if info["outcome"] is not None else "",
        "at_oven": int(info["at_oven"]),
    }


def hidden_path(csv_path) -> Path:
    csv_path = Path(csv_path)
    return csv_path.with_name(csv_path.stem + "_hidden.npy")
