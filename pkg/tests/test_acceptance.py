"""Acceptance criteria 1-11, one test each (criterion 2 split into its scripted and trained halves).

Criteria 2b and 9-11 read a finished experiment grid: the directory named by
``OVENLAB_RESULTS`` (default ``results/`` at the repository root) must hold
``report/summary.csv`` and ``report/neural.json`` as written by ``ovenlab matrix``.
They are skipped when no results are present.
"""

import csv
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ovenlab import behavior, env, neural, planner, train
from ovenlab.env import Action, InteractOutcome

from scripted import DELIVER, I, U, run_episodes, trial
from test_behavior import P_T2_DF10, pooled_oracle
from test_neural import covariance_oracle, expected_bins, naive_dft
from test_net import fan_in_params, fd_gradient_error
from test_train import gae_recursive_oracle

RESULTS = Path(os.environ.get("OVENLAB_RESULTS", Path(__file__).resolve().parents[1] / "results"))
BOUNDS = {7: 7, 8: 6, 9: 6, 10: 6}


def load_results():
    summary, details = RESULTS / "report" / "summary.csv", RESULTS / "report" / "neural.json"
    if not (summary.exists() and details.exists()):
        return None
    with open(summary, newline="") as fh:
        rows = {int(r["target"]): r for r in csv.DictReader(fh)}
    return rows, json.loads(details.read_text())


# --------------------------------------------------------------------------- 1


def fuzz_condition(task, target, n_seq, rng):
    """Random 100-step episodes; returns the number of rule violations found."""
    place, take, deliver = InteractOutcome.PLACE_ONION, InteractOutcome.TAKE_SOUP, InteractOutcome.DELIVER
    dual = task == "dual"
    step, window_len = env.step, env.WINDOW_LEN
    violations = 0
    seeds = rng.integers(2**62, size=n_seq).tolist()
    actions = rng.integers(0, 6, size=(n_seq, env.EPISODE_LEN)).tolist()
    for seed, seq in zip(seeds, actions):
        state, _ = env.reset(task, target, seed)
        expect_window = 0
        for a in seq:
            r = step(state, a)
            info = r.info
            outcome, number = info["outcome"], info["number_value"]
            if expect_window:
                if number is None or not 1 <= number <= 10 or info["oven_timer"] != window_len + 1 - expect_window:
                    violations += 1
                expect_window -= 1
            elif number is not None:
                violations += 1
            if outcome is not None:
                if outcome is take and info["oven_timer"] < target:
                    violations += 1
                elif outcome is place and dual:
                    expect_window = window_len
                elif outcome is deliver and info["trial_index"] + 1 != state.trial_index:
                    violations += 1
            # rewards come only from deliveries and correct answers
            if (r.reward or outcome is not None or number is not None) and \
                    r.reward != info["delivery_flag"] + info["correct_number_flag"]:
                violations += 1
        if not r.done:
            violations += 1
    return violations


def test_c1_environment_rules(criterion):
    rng = np.random.default_rng(20261017)
    start = time.perf_counter()
    violations = sum(fuzz_condition(task, target, 10_000, rng) for task in ("single", "dual") for target in env.TARGETS)
    elapsed = time.perf_counter() - start
    ok = criterion("1", violations == 0 and elapsed < 60,
                   f"80,000 fuzzed episodes, {violations} violations, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 2


def test_c2a_scripted_policy_matches_planner(criterion):
    got = {}
    for task in ("single", "dual"):
        policy = planner.ScriptedPolicy(task)
        for target in env.TARGETS:
            bound = planner.max_soups(task, target)
            for seed in range(5):
                state, _ = env.reset(task, target, seed)
                soups = 0
                while not state.done:
                    soups += env.step(state, policy(state)).info["delivery_flag"]
                got[(task, target, seed)] = (soups, bound)
    bad = {k: v for k, v in got.items() if v[0] != v[1] or v[1] != BOUNDS[k[1]]}
    ok = criterion("2a", not bad, f"scripted soups equal planner bounds {BOUNDS} in both tasks; mismatches {bad}")
    assert ok


def test_c2b_trained_single_task_throughput(criterion):
    res = load_results()
    if res is None:
        criterion("2b", None, f"no results under {RESULTS}")
        pytest.skip("no experiment results")
    _, details = res
    single7 = next(d for d in details if d["task"] == "single" and d["target"] == 7)
    soups = single7["soups_per_seed"]
    need = 0.7 * BOUNDS[7]
    hits = sum(s >= need for s in soups)
    ok = criterion("2b", hits >= 2 and len(soups) >= 3,
                   f"single task, duration 7: soups per seed {[round(s, 2) for s in soups]}, "
                   f"need >= {need:.1f} on 2 of 3, got {hits}")
    assert ok


# --------------------------------------------------------------------------- 3


def test_c3_gradient_check(criterion):
    start = time.perf_counter()
    worst = max(fd_gradient_error(seed, T=3, eps=1e-5, make_params=fan_in_params) for seed in range(100))
    elapsed = time.perf_counter() - start
    ok = criterion("3", worst < 1e-4 and elapsed < 60, f"max relative error {worst:.2e} over 100 trials, {elapsed:.1f}s")
    assert ok


# --------------------------------------------------------------------------- 4


def discounted_oracle(rewards, values, dones, boot, gamma):
    """Monte Carlo return to the episode end (or bootstrap) minus the value."""
    n = len(rewards)
    adv = []
    for t in range(n):
        total, disc = 0.0, 1.0
        for k in range(t, n):
            total += disc * rewards[k]
            disc *= gamma
            if dones[k]:
                break
        else:
            total += disc * boot
        adv.append(total - values[t])
    return np.array(adv)


def test_c4_gae(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(1000):
        n = int(rng.integers(1, 65))
        r, v = rng.normal(size=n), rng.normal(size=n)
        d = rng.random(n) < 0.1
        boot, gamma = float(rng.normal()), float(rng.uniform(0.8, 1.0))
        if i % 2 == 0:
            lam, oracle = 1.0, discounted_oracle(r, v, d, boot, gamma)
        else:
            lam = float(rng.uniform(0, 1))
            oracle = gae_recursive_oracle(r, v, d, boot, gamma, lam)
        adv, ret = train.compute_gae(r, v, d, boot, gamma, lam)
        worst = max(worst, np.abs(adv - oracle).max(), np.abs(ret - (adv + v)).max())
    ok = criterion("4", worst < 1e-6, f"1,000 buffers, max deviation {worst:.1e}")
    assert ok


# --------------------------------------------------------------------------- 5


def test_c5_pca(criterion):
    rng = np.random.default_rng(5)
    orth = recon = oracle = 0.0
    for _ in range(100):
        n, d = int(rng.integers(5, 101)), int(rng.integers(2, 257))
        x = rng.normal(size=(n, d)) * rng.uniform(0.1, 3, d)
        rank = min(n - 1, d)
        full = neural.pca(x, min(n, d))
        orth = max(orth, np.abs(full.components @ full.components.T - np.eye(min(n, d))).max())
        back = full.scores @ full.components + full.mean
        recon = max(recon, np.linalg.norm(back - x) / np.linalg.norm(x))
        k = min(3, rank)
        res = neural.pca(x, k)
        _, vecs = covariance_oracle(x, k)
        for got, ref in zip(res.components, vecs):
            oracle = max(oracle, min(np.abs(got - ref).max(), np.abs(got + ref).max()))
    ok = criterion("5", orth < 1e-8 and recon < 1e-9 and oracle < 1e-6,
                   f"100 matrices: orthonormality {orth:.1e}, reconstruction {recon:.1e}, oracle {oracle:.1e}")
    assert ok


# --------------------------------------------------------------------------- 6


def test_c6_dft(criterion):
    rng = np.random.default_rng(6)
    naive = parseval = 0.0
    for n in list(range(2, 40)) + [100] * 20:
        x = rng.normal(size=n)
        mags = neural.dft_magnitude(x).magnitudes
        naive = max(naive, np.abs(mags - naive_dft(x)).max())
        parseval = max(parseval, abs(np.sum(x**2) - np.sum(np.abs(np.fft.fft(x)) ** 2) / n))
    t = np.arange(100)
    missed = [p for p in range(2, 51) for phase in (0.0, 0.7, 2.1)
              if neural.dft_magnitude(np.cos(2 * np.pi * t / p + phase)).peak_bins(1)[0] not in expected_bins(p)]
    ok = criterion("6", naive < 1e-9 and parseval < 1e-9 and not missed,
                   f"naive {naive:.1e}, Parseval {parseval:.1e}, sinusoid periods 2-50 missed {missed}")
    assert ok


# --------------------------------------------------------------------------- 7


def test_c7_t_test(criterion):
    rng = np.random.default_rng(7)
    worst, antisym = 0.0, True
    for _ in range(1000):
        a = rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), rng.integers(2, 50)).tolist()
        b = rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 3), rng.integers(2, 50)).tolist()
        res, back = behavior.t_test(a, b), behavior.t_test(b, a)
        t, df = pooled_oracle(a, b)
        worst = max(worst, abs(res.t - t) / max(1.0, abs(t)))
        antisym &= res.t == -back.t and res.p_two_sided == back.p_two_sided and res.df == df
    p_err = abs(behavior.student_t_sf2(2.0, 10) - P_T2_DF10)
    ok = criterion("7", worst < 1e-12 and antisym and p_err < 1e-9,
                   f"1,000 pairs max error {worst:.1e}, antisymmetric {antisym}, p(t=2, df=10) error {p_err:.1e}")
    assert ok


# --------------------------------------------------------------------------- 8


def test_c8_first_oven_check_fixtures(criterion):
    cases = {
        "at or above target": (trial({9: I}) + DELIVER, [9]),
        "consecutive interacts": (trial({5: I, 6: I, 7: I}) + DELIVER, [5]),
        "broken run": (trial({5: I, 6: U, 7: I}) + DELIVER, [7]),
    }
    got = {name: [c.timer_value for c in behavior.extract_first_oven_checks(run_episodes("single", 7, [acts]))]
           for name, (acts, _) in cases.items()}
    ok = criterion("8", all(got[k] == v for k, (_, v) in cases.items()), f"records {got}")
    assert ok


# --------------------------------------------------------------------------- 9-11


def results_or_skip(label, criterion):
    res = load_results()
    if res is None:
        criterion(label, None, f"no results under {RESULTS}")
        pytest.skip("no experiment results")
    return res


def test_c9_overproduction_direction(criterion):
    rows, _ = results_or_skip("9", criterion)
    diffs = {t: float(r["mean_TN"]) - float(r["mean_T"]) for t, r in sorted(rows.items())}
    hits = sum(d > 0 for d in diffs.values())
    detail = ", ".join(f"T{t}: {d:+.2f} (t={float(rows[t]['t']):.2f}, p={float(rows[t]['p']):.2g})" for t, d in diffs.items())
    ok = criterion("9", hits >= 3 and len(rows) == 4, f"dual minus single first check {detail}; {hits}/4 positive")
    assert ok


def test_c10_throughput_ratio(criterion):
    rows, _ = results_or_skip("10", criterion)
    ratio = float(rows[10]["ratio"]) if 10 in rows else math.nan
    ok = criterion("10", 0.35 <= ratio <= 0.75, f"dual/single soups at duration 10 = {ratio:.3f} (band 0.35-0.75)")
    assert ok


def test_c11_trial_reset_structure(criterion):
    _, details = results_or_skip("11", criterion)
    ratios = {f"{d['task']}/T{d['target']}": d["jump_ratio_mean"] for d in details}
    met = sum(r is not None and r >= 1.5 for r in ratios.values())
    text = ", ".join(f"{k}: {v:.2f}" if v is not None else f"{k}: n/a" for k, v in ratios.items())
    criterion("11", met == len(ratios), f"PC1 jump ratio at deliveries {text}; {met}/{len(ratios)} >= 1.5",
              informational=True)
