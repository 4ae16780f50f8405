"""PCA of LSTM hidden states and magnitude spectra of the leading component."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .trace import EvalTrace

WINDOW = 100
FLATNESS_FACTOR = 3.0


@dataclass
class PcaResult:
    components: np.ndarray  # (k, D), orthonormal rows
    scores: np.ndarray  # (N, k)
    explained_variance_ratio: np.ndarray  # (k,)
    singular_values: np.ndarray  # all of them, descending
    mean: np.ndarray
    degenerate: bool = False


def hidden_matrix(trace: EvalTrace, episode: int = 0, window: int = WINDOW) -> np.ndarray:
    if trace.hidden is None:
        raise ValueError("trace carries no hidden states")
    m = np.asarray(trace.hidden[episode][:window], dtype=np.float64)
    if m.shape[0] != window:
        raise ValueError(f"episode {episode} has {m.shape[0]} steps, need {window}")
    if not np.all(np.isfinite(m)):
        raise ValueError("non-finite hidden activations")
    return m


def pca(matrix, k: int) -> PcaResult:
    """Principal components of the rows of ``matrix`` (observations x features).

    Each component is sign-normalised so its largest-magnitude entry is
    positive.  A matrix with no variance yields zero ratios and
    ``degenerate=True``.
    """
    x = np.asarray(matrix, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("pca expects a 2-D matrix")
    n, d = x.shape
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} out of range 1..{min(n, d)}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.abs(comps).argmax(axis=1)
    comps *= np.sign(comps[np.arange(k), pivot])[:, None]
    total = float(np.sum(s**2))
    degenerate = total <= np.finfo(float).tiny
    ratio = np.zeros(k) if degenerate else s[:k] ** 2 / total
    return PcaResult(comps, centered @ comps.T, ratio, s, mean, degenerate)


@dataclass
class Spectrum:
    frequencies: np.ndarray  # cycles per step, 0 .. 0.5
    magnitudes: np.ndarray
    target_frequency: Optional[float] = None

    @property
    def periods(self) -> np.ndarray:
        out = np.full_like(self.frequencies, np.inf)
        nz = self.frequencies > 0
        out[nz] = 1.0 / self.frequencies[nz]
        return out

    @property
    def target_bin(self) -> Optional[int]:
        if self.target_frequency is None:
            return None
        return int(np.abs(self.frequencies - self.target_frequency).argmin())

    def peak_bins(self, n: int = 3) -> np.ndarray:
        """Bins of the ``n`` largest local maxima, DC excluded, strongest first."""
        mag = self.magnitudes
        idx = np.arange(1, len(mag))
        left = np.concatenate([[-np.inf], mag[:-1]])[1:]
        right = np.concatenate([mag[1:], [-np.inf]])[1:]
        peaks = idx[(mag[1:] >= left) & (mag[1:] >= right)]
        order = np.argsort(-mag[peaks], kind="stable")
        return peaks[order][:n]

    def peak_frequencies(self, n: int = 3) -> np.ndarray:
        return self.frequencies[self.peak_bins(n)]

    def is_flat(self, factor: float = FLATNESS_FACTOR) -> bool:
        """True when no non-DC bin exceeds ``factor`` times the non-DC median."""
        body = self.magnitudes[1:]
        return bool(body.max() <= factor * np.median(body))


def dft_magnitude(series, target_frequency: Optional[float] = None) -> Spectrum:
    """|DFT| of a real series at bins ``0..N//2``; bin ``j`` is ``j/N`` cycles per step."""
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise ValueError("need a 1-D series of at least 2 samples")
    n = len(x)
    return Spectrum(np.arange(n // 2 + 1) / n, np.abs(np.fft.rfft(x)), target_frequency)


def reset_jump_ratio(pc1, delivery) -> float:
    """Mean |PC1 step change| right after delivery steps over the mean elsewhere.

    The hidden state recorded at step ``t`` is produced before that step's
    action, so a delivery at ``t`` shows up in the change from ``t`` to ``t+1``.
    """
    pc1 = np.asarray(pc1, dtype=np.float64)
    delivery = np.asarray(delivery, dtype=bool)[: len(pc1) - 1]
    jumps = np.abs(np.diff(pc1))
    if not delivery.any() or delivery.all():
        return float("nan")
    rest = jumps[~delivery].mean()
    return float(jumps[delivery].mean() / rest) if rest > 0 else float("inf")


@dataclass
class SpectralReport:
    task: str
    target: int
    episode: int
    pca: PcaResult
    spectrum: Spectrum
    delivery: np.ndarray
    peak_frequencies: np.ndarray
    flat: bool
    jump_ratio: float

    @property
    def peak_periods(self) -> np.ndarray:
        return 1.0 / self.peak_frequencies


def spectral_report(trace: EvalTrace, target: Optional[int] = None, episode: int = 0, k: int = 3) -> SpectralReport:
    """PCA of one episode's first 100 hidden states and the PC1 spectrum."""
    target = trace.target if target is None else int(target)
    m = hidden_matrix(trace, episode)
    res = pca(m, k)
    spec = dft_magnitude(res.scores[:, 0], 1.0 / target)
    sl = trace.episode_slice(episode)
    delivery = np.asarray(trace.delivery[sl][:WINDOW], dtype=bool)
    return SpectralReport(
        task=trace.task.value,
        target=target,
        episode=episode,
        pca=res,
        spectrum=spec,
        delivery=delivery,
        peak_frequencies=spec.peak_frequencies(3),
        flat=spec.is_flat(),
        jump_ratio=reset_jump_ratio(res.scores[:, 0], delivery),
    )


def averaged_spectrum(trace: EvalTrace, target: Optional[int] = None, k: int = 3) -> Spectrum:
    """PC1 magnitude spectrum averaged over all episodes (PCA fitted per episode)."""
    target = trace.target if target is None else int(target)
    mags = [spectral_report(trace, target, ep, k).spectrum.magnitudes for ep in range(trace.n_episodes)]
    n = len(mags[0])
    return Spectrum(np.arange(n) / WINDOW, np.mean(mags, axis=0), 1.0 / target)


SPECTRA_COLUMNS = ("task", "target", "bin", "frequency", "magnitude", "is_target_bin")
PCA_COLUMNS = ("task", "target", "step", "pc1", "pc2", "pc3", "delivery_flag")


def spectrum_rows(task: str, target: int, spec: Spectrum):
    tb = spec.target_bin
    for j, (f, m) in enumerate(zip(spec.frequencies, spec.magnitudes)):
        yield {"task": task, "target": target, "bin": j, "frequency": f"{f:.6g}",
               "magnitude": f"{m:.10g}", "is_target_bin": int(j == tb)}


def pca_rows(report: SpectralReport):
    scores = report.pca.scores
    for t in range(scores.shape[0]):
        pcs = [f"{scores[t, i]:.10g}" if i < scores.shape[1] else "" for i in range(3)]
        yield {"task": report.task, "target": report.target, "step": t, "pc1": pcs[0], "pc2": pcs[1],
               "pc3": pcs[2], "delivery_flag": int(report.delivery[t]) if t < len(report.delivery) else 0}


def write_rows(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
