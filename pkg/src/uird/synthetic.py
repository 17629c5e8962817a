"""Synthetic ECG-like data: per-class beat templates, labelled records and pulse trains.

Everything here is seeded so that tests and the bundled configurations run
without any external download.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .ingest import (BEAT_LENGTH, HALF_WINDOW, Annotation, RawSignal, encode_212,
                     standardize_rows, write_annotations)

# (offset from R in samples, width in samples, amplitude) at 360 Hz
TEMPLATES: dict[str, list[tuple[float, float, float]]] = {
    "N": [(-70, 8, 0.15), (-10, 3, -0.12), (0, 4, 1.0), (10, 3.5, -0.25), (90, 16, 0.30)],
    "L": [(-75, 8, 0.12), (-9, 8, 0.80), (9, 8, 0.85), (95, 20, -0.35)],
    "R": [(-70, 8, 0.15), (-8, 3, 0.40), (0, 4, -0.50), (12, 5, 0.90), (26, 6, -0.20), (95, 16, 0.25)],
    "V": [(0, 14, 1.30), (28, 12, -0.60), (100, 24, -0.50)],
    "A": [(-45, 7, -0.18), (-10, 3, -0.10), (0, 4, 0.95), (10, 3.5, -0.30), (85, 16, 0.28)],
    "f": [(-70, 8, 0.08), (0, 9, 1.10), (18, 8, -0.40), (95, 20, -0.10)],
}


def render_template(symbol: str, rng: np.random.Generator | None = None, noise: float = 0.02,
                    length: int = BEAT_LENGTH, center: int = HALF_WINDOW) -> np.ndarray:
    """One beat of class ``symbol``; with ``rng`` the waves are randomly perturbed."""
    t = np.arange(length, dtype=np.float64) - center
    out = np.zeros(length)
    for offset, width, amp in TEMPLATES[symbol]:
        if rng is not None:
            offset = offset + rng.normal(0, 1.5)
            width = width * rng.normal(1.0, 0.05)
            amp = amp * rng.normal(1.0, 0.08)
        out += amp * np.exp(-0.5 * ((t - offset) / width) ** 2)
    if rng is not None:
        out += rng.normal(0, 0.03) + rng.normal(0, 0.02) * t / length
        out += rng.normal(0, noise, size=length)
    return out


def make_beats(symbol: str, n: int, rng: np.random.Generator, standardize: bool = True,
               noise: float = 0.02) -> np.ndarray:
    X = np.stack([render_template(symbol, rng, noise) for _ in range(n)]) if n else np.empty((0, BEAT_LENGTH))
    return standardize_rows(X)[0] if standardize else X


def make_beatset(counts: dict[str, int], seed: int = 0, noise: float = 0.02):
    """Labelled standardized beats, classes in the order given."""
    rng = np.random.default_rng(seed)
    Xs, ys = [], []
    for symbol, n in counts.items():
        Xs.append(make_beats(symbol, n, rng, noise=noise))
        ys.extend([symbol] * n)
    return np.concatenate(Xs), np.array(ys, dtype=object)


def gaussian_derivative_train(fs: float = 360.0, duration_s: float = 30.0, rate_hz: float = 1.0,
                              sigma_s: float = 0.01, amplitude: float = 1.0,
                              snr_db: float | None = None, seed: int = 0):
    """Pulse train of Gaussian-derivative pulses; returns (RawSignal, pulse centre indices)."""
    n = int(round(fs * duration_s))
    t = np.arange(n) / fs
    centers_s = np.arange(0.5 / rate_hz, duration_s, 1.0 / rate_hz)
    x = np.zeros(n)
    for c in centers_s:
        u = (t - c) / sigma_s
        x += -amplitude * u * np.exp(0.5 - 0.5 * u * u)
    if snr_db is not None:
        rng = np.random.default_rng(seed)
        p_signal = np.mean(x ** 2)
        x = x + rng.normal(0, np.sqrt(p_signal / 10 ** (snr_db / 10)), size=n)
    centers = np.round(centers_s * fs).astype(int)
    return RawSignal(x, fs, 0, "pulse_train"), centers


def make_record(counts: dict[str, int], fs: float = 360.0, seed: int = 0, rr_s: float = 1.0,
                wander_mv: float = 0.15):
    """Continuous single-lead record with shuffled beats of each class.

    Returns (RawSignal in mV, annotations at the true R positions).
    """
    rng = np.random.default_rng(seed)
    labels = [s for s, n in counts.items() for _ in range(n)]
    labels = [labels[i] for i in rng.permutation(len(labels))]
    lead = int(round(fs))
    rr = np.maximum(0.6 * fs, rng.normal(rr_s * fs, 0.04 * fs, size=len(labels))).astype(int)
    positions = lead + np.concatenate([[0], np.cumsum(rr[:-1])]) if labels else np.array([], int)
    n = (int(positions[-1]) if labels else 0) + 2 * lead
    x = np.zeros(n)
    ann = []
    for pos, sym in zip(positions, labels):
        beat = render_template(sym, rng, noise=0.0)
        lo = pos - HALF_WINDOW
        x[lo:lo + BEAT_LENGTH] += beat
        ann.append(Annotation(int(pos), sym))
    t = np.arange(n) / fs
    x += wander_mv * np.sin(2 * np.pi * 0.3 * t + rng.uniform(0, 2 * np.pi))
    x += rng.normal(0, 0.01, size=n)
    return RawSignal(x, fs, 0, "synthetic"), ann


def write_record(directory, name: str, sig: RawSignal, annotations, gain: float = 200.0,
                 baseline: int = 1024) -> dict:
    """Write a two-channel format-212 ``.dat`` plus annotation sidecar.

    Channel 1 is an attenuated copy of channel 0. Returns the header values a
    config needs to read the record back.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ch0 = np.clip(np.round(sig.samples * gain) + baseline, -2048, 2047).astype(np.int64)
    ch1 = np.clip(np.round(0.6 * sig.samples * gain) + baseline, -2048, 2047).astype(np.int64)
    (directory / f"{name}.dat").write_bytes(encode_212(np.column_stack([ch0, ch1]).reshape(-1)))
    write_annotations(directory / f"{name}.ann", annotations)
    return {"dat": f"{name}.dat", "annotations": f"{name}.ann", "n_channels": 2,
            "gains": [gain, gain], "baselines": [baseline, baseline],
            "sampling_rate_hz": sig.sampling_rate_hz}
