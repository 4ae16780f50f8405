"""Behavioral metrics: first oven checks, soup throughput and two-sample t-tests."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import special

from .env import Action, InteractOutcome
from .trace import EvalTrace

INTERACT = int(Action.INTERACT)
TAKE_SOUP = InteractOutcome.TAKE_SOUP.value


class DegenerateSampleError(ValueError):
    """Samples too small or without variance for a t-test."""


@dataclass(frozen=True)
class FirstOvenCheck:
    episode: int
    trial: int
    timer_value: int
    target: int


def _is_oven_interact(trace: EvalTrace, i: int) -> bool:
    return trace.action[i] == INTERACT and bool(trace.at_oven[i])


def _trial_bounds(trace: EvalTrace):
    key = trace.episode * (1 << 20) + trace.trial
    edges = np.flatnonzero(np.diff(key)) + 1
    starts = np.concatenate([[0], edges])
    ends = np.concatenate([edges, [len(trace)]])
    return zip(starts.tolist(), ends.tolist())


def extract_first_oven_checks(trace: EvalTrace, target: Optional[int] = None) -> list:
    """One record per trial at most.

    A candidate is an ``INTERACT`` next to a cooking oven outside the number
    window.  It qualifies when it and every following step are oven
    interacts up to and including the one that takes the soup out; a
    candidate at or past the target qualifies on its own because it takes
    the soup immediately.  A broken run disqualifies that candidate only;
    scanning resumes after the break.
    """
    target = trace.target if target is None else int(target)
    if len(trace) and (trace.outcome == "").all() and (trace.action == INTERACT).any():
        raise ValueError("trace lacks interaction outcomes; cannot locate oven checks")
    checks = []
    for start, end in _trial_bounds(trace):
        i = start
        while i < end:
            candidate = (
                _is_oven_interact(trace, i)
                and trace.oven_timer[i] >= 1
                and trace.number_value[i] < 0
            )
            if not candidate:
                i += 1
                continue
            j = i
            while j < end and _is_oven_interact(trace, j) and trace.outcome[j] != TAKE_SOUP:
                j += 1
            if j < end and _is_oven_interact(trace, j):
                value = int(trace.oven_timer[i])
                if value >= target and j != i:
                    raise ValueError(f"soup not taken at timer {value} >= target {target} (row {i})")
                checks.append(FirstOvenCheck(int(trace.episode[i]), int(trace.trial[i]), value, target))
                break
            i = j + 1
    return checks


def soups_per_episode(trace: EvalTrace):
    """Deliveries per episode.  Returns ``(counts, mean)``."""
    n = trace.n_episodes
    counts = np.bincount(trace.episode[trace.delivery], minlength=n) if n else np.zeros(0, dtype=np.int64)
    return counts, float(counts.mean()) if n else 0.0


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p_two_sided: float
    mean_a: float
    mean_b: float
    n_a: int
    n_b: int
    mode: str = "pooled"


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail probability P(|T| >= |t|) via the regularised incomplete beta."""
    if math.isinf(t):
        return 0.0
    return float(special.betainc(df / 2.0, 0.5, df / (df + t * t)))


def t_test(a, b, mode: str = "pooled") -> TTestResult:
    """Independent two-sample t-test (``mode`` is ``"pooled"`` or ``"welch"``)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise DegenerateSampleError(f"need at least 2 samples per group, got {na} and {nb}")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        raise DegenerateSampleError("both samples have zero variance")
    if mode == "pooled":
        df = float(na + nb - 2)
        sp2 = ((na - 1) * va + (nb - 1) * vb) / df
        se = math.sqrt(sp2 * (1.0 / na + 1.0 / nb))
    elif mode == "welch":
        qa, qb = va / na, vb / nb
        se = math.sqrt(qa + qb)
        df = (qa + qb) ** 2 / (qa**2 / (na - 1) + qb**2 / (nb - 1))
    else:
        raise ValueError(f"unknown t-test mode {mode!r}")
    t = (ma - mb) / se
    return TTestResult(float(t), df, student_t_sf2(t, df), float(ma), float(mb), na, nb, mode)


TraceArg = Union[EvalTrace, Sequence[EvalTrace]]


def _as_list(traces: TraceArg) -> list:
    return [traces] if isinstance(traces, EvalTrace) else list(traces)


@dataclass
class ComparisonRow:
    target: int
    checks_T: list = field(repr=False)
    checks_TN: list = field(repr=False)
    mean_T: float
    mean_TN: float
    t: float
    df: float
    p: float
    soups_T: float
    soups_TN: float
    ratio: float
    flag: Optional[str] = None

    @property
    def n_T(self) -> int:
        return len(self.checks_T)

    @property
    def n_TN(self) -> int:
        return len(self.checks_TN)

    def summary(self) -> dict:
        return {k: getattr(self, k) for k in SUMMARY_COLUMNS}


def compare_conditions(single: TraceArg, dual: TraceArg, target: int, mode: str = "pooled") -> ComparisonRow:
    """First-oven-check statistics and throughput for one target duration.

    Either side may be a single trace or a list of traces (e.g. one per
    training seed); samples are pooled over all trials of all traces.
    """
    sides = []
    for traces in (_as_list(single), _as_list(dual)):
        values, soups = [], []
        for tr in traces:
            values += [c.timer_value for c in extract_first_oven_checks(tr, target)]
            soups.extend(soups_per_episode(tr)[0].tolist())
        sides.append((np.asarray(values, dtype=np.float64), float(np.mean(soups)) if soups else float("nan")))
    (a, soups_t), (b, soups_tn) = sides

    flag = None
    t = df = p = float("nan")
    try:
        # dual first so that a positive t means overproduction under load
        res = t_test(b, a, mode)
        t, df, p = res.t, res.df, res.p_two_sided
    except DegenerateSampleError as exc:
        flag = str(exc)
    mean = lambda x: float(x.mean()) if len(x) else float("nan")
    ratio = soups_tn / soups_t if soups_t > 0 else float("nan")
    return ComparisonRow(int(target), a.tolist(), b.tolist(), mean(a), mean(b), t, df, p, soups_t, soups_tn, ratio, flag)


CHECK_COLUMNS = ("task", "target", "episode", "trial", "value")
SUMMARY_COLUMNS = ("target", "mean_T", "mean_TN", "t", "df", "p", "soups_T", "soups_TN", "ratio")


def write_first_oven_checks_csv(path, records) -> None:
    """``records`` holds ``(task, FirstOvenCheck)`` pairs."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHECK_COLUMNS)
        for task, c in records:
            w.writerow([task, c.target, c.episode, c.trial, c.timer_value])


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def write_summary_csv(path, rows: Sequence[ComparisonRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for row in rows:
            w.writerow([_fmt(getattr(row, k)) for k in SUMMARY_COLUMNS])
