"""Command line: ``ovenlab {train,eval,report,matrix}``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import behavior, neural
from .checkpoint import CheckpointError
from .env import TARGETS, TaskKind
from .net import DEFAULT_ARCH
from .trace import EvalTrace
from .train import TrainConfig, code_version, evaluate, train

log = logging.getLogger("ovenlab")

TASK_LABELS = {TaskKind.SINGLE: "T", TaskKind.DUAL: "T+N"}
DEFAULT_SEEDS = (1, 2, 3)


def default_out() -> Path:
    return Path(os.environ.get("OVENLAB_OUT", "ovenlab_out"))


def run_name(task, target: int, seed: int) -> str:
    return f"{TaskKind(task).value}_d{target}_s{seed}"


def run_hash(task, target: int, seed: int, config: TrainConfig) -> str:
    key = {"task": TaskKind(task).value, "target": int(target), "seed": int(seed),
           "config": config.as_dict(), "arch": DEFAULT_ARCH.as_dict()}
    return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


# --------------------------------------------------------------------------- train / eval


def _train_into(run_dir: Path, task, target: int, seed: int, config: TrainConfig) -> Path:
    train(task, target, seed, config, out_dir=run_dir)
    meta = json.loads((run_dir / "run.json").read_text())
    meta["run_hash"] = run_hash(task, target, seed, config)
    (run_dir / "run.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return run_dir / "checkpoint.bin"


def cmd_train(args) -> int:
    config = TrainConfig(total_steps=args.steps)
    out = Path(args.out) if args.out else default_out() / run_name(args.task, args.duration, args.seed)
    ckpt = _train_into(out, args.task, args.duration, args.seed, config)
    print(ckpt)
    return 0


def _eval_into(ckpt_path: Path, out_csv: Path, episodes: int, eval_seed) -> EvalTrace:
    trace = evaluate(ckpt_path, n_episodes=episodes, eval_seed=eval_seed)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    trace.save(out_csv)
    return trace


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.with_name("trace.csv")
    try:
        trace = _eval_into(ckpt, out, args.episodes, args.eval_seed)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    counts, mean = behavior.soups_per_episode(trace)
    print(f"{out}: {len(trace)} steps, {counts.sum()} soups ({mean:.2f} per episode)")
    return 0


# --------------------------------------------------------------------------- report


def discover_runs(root: Path) -> list:
    """Run directories under ``root`` holding both ``run.json`` and ``trace.csv``."""
    runs = []
    for meta_path in sorted(Path(root).rglob("run.json")):
        d = meta_path.parent
        if (d / "trace.csv").exists():
            meta = json.loads(meta_path.read_text())
            runs.append({"dir": d, "task": TaskKind(meta["task"]), "target": int(meta["target"]),
                         "seed": int(meta["seed"])})
    return runs


def build_report(runs: list, out_dir: Path) -> list:
    """Behavioral and neural reports for every duration with both task variants."""
    out_dir.mkdir(parents=True, exist_ok=True)
    grouped = {}
    for r in runs:
        grouped.setdefault(r["target"], {}).setdefault(r["task"], []).append(r)

    rows, check_records, spectra, spectra_mean, pca_out, details = [], [], [], [], [], []
    for target in sorted(grouped):
        by_task = grouped[target]
        missing = [TASK_LABELS[t] for t in TaskKind if t not in by_task]
        if missing:
            log.warning("duration %d: no %s traces; skipped", target, "/".join(missing))
            continue
        traces = {}
        for task in TaskKind:
            entries = sorted(by_task[task], key=lambda r: r["seed"])
            traces[task] = [EvalTrace.load(r["dir"] / "trace.csv", task, target) for r in entries]
            for k, (r, tr) in enumerate(zip(entries, traces[task])):
                for c in behavior.extract_first_oven_checks(tr, target):
                    # episodes are numbered consecutively across seeds
                    c = behavior.FirstOvenCheck(c.episode + k * tr.n_episodes, c.trial, c.timer_value, c.target)
                    check_records.append((task.value, c))
        row = behavior.compare_conditions(traces[TaskKind.SINGLE], traces[TaskKind.DUAL], target)
        if row.flag:
            log.warning("duration %d: %s", target, row.flag)
        rows.append(row)

        for task in TaskKind:
            with_hidden = [tr for tr in traces[task] if tr.hidden is not None]
            if not with_hidden:
                continue
            first = neural.spectral_report(with_hidden[0], target, episode=0)
            spectra.extend(neural.spectrum_rows(task.value, target, first.spectrum))
            pca_out.extend(neural.pca_rows(first))
            mean_spec = [neural.averaged_spectrum(tr, target) for tr in with_hidden]
            avg = neural.Spectrum(mean_spec[0].frequencies, np.mean([s.magnitudes for s in mean_spec], axis=0),
                                  1.0 / target)
            spectra_mean.extend(neural.spectrum_rows(task.value, target, avg))
            jumps = [neural.spectral_report(tr, target, ep).jump_ratio
                     for tr in with_hidden for ep in range(tr.n_episodes)]
            details.append({
                "task": task.value,
                "target": target,
                "peak_frequencies": first.peak_frequencies.tolist(),
                "peak_periods": first.peak_periods.tolist(),
                "flat": first.flat,
                "explained_variance_ratio": first.pca.explained_variance_ratio.tolist(),
                "jump_ratio_first_episode": first.jump_ratio,
                "jump_ratio_mean": float(np.nanmean(jumps)) if np.isfinite(jumps).any() else None,
                "soups_per_seed": [float(behavior.soups_per_episode(tr)[1]) for tr in traces[task]],
            })

    behavior.write_summary_csv(out_dir / "summary.csv", rows)
    behavior.write_first_oven_checks_csv(out_dir / "first_oven_checks.csv", check_records)
    neural.write_rows(out_dir / "spectra.csv", neural.SPECTRA_COLUMNS, spectra)
    neural.write_rows(out_dir / "spectra_mean.csv", neural.SPECTRA_COLUMNS, spectra_mean)
    neural.write_rows(out_dir / "pca.csv", neural.PCA_COLUMNS, pca_out)
    (out_dir / "neural.json").write_text(json.dumps(details, indent=2) + "\n")
    return rows


def format_table(rows) -> str:
    lines = [f"{'T_d':>4} {'n_T':>5} {'n_TN':>5} {'mean_T':>7} {'mean_TN':>7} {'t':>7} {'df':>5} {'p':>9} "
             f"{'soups_T':>7} {'soups_TN':>8} {'ratio':>6}"]
    for r in rows:
        lines.append(f"{r.target:>4} {r.n_T:>5} {r.n_TN:>5} {r.mean_T:>7.2f} {r.mean_TN:>7.2f} {r.t:>7.2f} "
                     f"{r.df:>5.0f} {r.p:>9.2e} {r.soups_T:>7.2f} {r.soups_TN:>8.2f} {r.ratio:>6.2f}")
    return "\n".join(lines)


def cmd_report(args) -> int:
    runs = discover_runs(Path(args.runs))
    if not runs:
        print(f"error: no evaluated runs under {args.runs}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(args.runs) / "report"
    rows = build_report(runs, out)
    print(format_table(rows))
    return 0


# --------------------------------------------------------------------------- matrix


def _matrix_job(job: dict) -> dict:
    run_dir = Path(job["dir"])
    config = TrainConfig(**job["config"])
    status = {"name": run_dir.name, "trained": False, "evaluated": False, "error": None}
    try:
        meta_path = run_dir / "run.json"
        done = (
            meta_path.exists()
            and (run_dir / "checkpoint.bin").exists()
            and json.loads(meta_path.read_text()).get("run_hash") == job["hash"]
        )
        if not done:
            _train_into(run_dir, job["task"], job["target"], job["seed"], config)
            (run_dir / "trace.csv").unlink(missing_ok=True)
            status["trained"] = True
        if not (run_dir / "trace.csv").exists():
            _eval_into(run_dir / "checkpoint.bin", run_dir / "trace.csv", job["episodes"], job["seed"])
            status["evaluated"] = True
    except Exception as exc:  # one failed run must not stop the grid
        status["error"] = f"{type(exc).__name__}: {exc}"
    return status


def cmd_matrix(args) -> int:
    out = Path(args.out) if args.out else default_out()
    out.mkdir(parents=True, exist_ok=True)
    config = TrainConfig(total_steps=args.steps)
    tasks = [TaskKind(t) for t in args.tasks]
    jobs = []
    # seed-major so that an interrupted grid still holds complete pairs
    for seed in args.seeds:
        for target in args.durations:
            for task in tasks:
                jobs.append({
                    "task": task.value, "target": target, "seed": seed, "config": config.as_dict(),
                    "episodes": args.episodes, "hash": run_hash(task, target, seed, config),
                    "dir": str(out / "runs" / run_name(task, target, seed)),
                })
    manifest = {
        "tasks": [t.value for t in tasks],
        "targets": list(args.durations),
        "seeds": list(args.seeds),
        "episodes": args.episodes,
        "config": config.as_dict(),
        "code_version": code_version(),
        "runs": [{k: j[k] for k in ("task", "target", "seed", "hash")} for j in jobs],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    results = []
    with ProcessPoolExecutor(max_workers=args.workers) if args.workers > 1 else nullcontext() as pool:
        for r in (pool.map(_matrix_job, jobs) if pool else map(_matrix_job, jobs)):
            state = "failed: " + r["error"] if r["error"] else ("trained" if r["trained"] else "cached")
            log.info("%s %s", r["name"], state)
            results.append(r)
    failed = [r for r in results if r["error"]]

    names = {Path(j["dir"]).name for j in jobs}
    runs = [r for r in discover_runs(out / "runs") if r["dir"].name in names]
    rows = build_report(runs, out / "report")
    print(format_table(rows))
    return 1 if failed else 0


# --------------------------------------------------------------------------- parser


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ovenlab", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one agent")
    t.add_argument("--task", required=True, choices=[k.value for k in TaskKind])
    t.add_argument("--duration", required=True, type=int, choices=TARGETS)
    t.add_argument("--seed", required=True, type=int)
    t.add_argument("--steps", type=int, default=100_000)
    t.add_argument("--out", help="run directory (default $OVENLAB_OUT/<run name>)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=25)
    e.add_argument("--eval-seed", type=int, default=None, help="default: the training seed")
    e.add_argument("--out", help="trace CSV path (default trace.csv next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="behavioral + neural report over evaluated runs")
    r.add_argument("--runs", default=None, help="directory searched for run.json + trace.csv")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)

    m = sub.add_parser("matrix", help="train, evaluate and report the task x duration x seed grid")
    m.add_argument("--seeds", type=_int_list, default=list(DEFAULT_SEEDS))
    m.add_argument("--steps", type=int, default=100_000)
    m.add_argument("--durations", type=_int_list, default=list(TARGETS))
    m.add_argument("--tasks", type=lambda s: s.split(","), default=[k.value for k in TaskKind])
    m.add_argument("--episodes", type=int, default=25)
    m.add_argument("--workers", type=int, default=1)
    m.add_argument("--out")
    m.set_defaults(func=cmd_matrix)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", "") is None:
        args.runs = str(default_out())
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
