"""ECG record parsing, filtering, R-peak detection and beat segmentation."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import signal as sps
from sklearn.base import BaseEstimator, TransformerMixin

BEAT_LENGTH = 320
HALF_WINDOW = BEAT_LENGTH // 2
DEFAULT_ALPHABET = ("N", "L", "R", "V", "A", "f")


class IngestError(ValueError):
    pass


@dataclass
class RawSignal:
    samples: np.ndarray
    sampling_rate_hz: float
    channel_id: int = 0
    source_name: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise IngestError("RawSignal needs a non-empty 1-D sample array")
        if not self.sampling_rate_hz > 0:
            raise IngestError("sampling rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise IngestError("RawSignal contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size


@dataclass(frozen=True)
class Annotation:
    sample_index: int
    symbol: str


@dataclass
class Beat:
    values: np.ndarray
    label: str
    r_peak_index: int = -1
    standardized: bool = False
    degenerate: bool = False
    synthetic: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (BEAT_LENGTH,):
            raise IngestError(f"beat must have exactly {BEAT_LENGTH} samples, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise IngestError("beat contains non-finite values")


# ----------------------------------------------------------------- WFDB format 212


def _sign_extend_12(v: np.ndarray) -> np.ndarray:
    return np.where(v & 0x800, v - 0x1000, v)


def decode_212(data: bytes) -> np.ndarray:
    """Unpack raw 12-bit samples; returns a flat int array (two per 3-byte group)."""
    if len(data) % 3:
        offset = len(data) - len(data) % 3
        raise IngestError(f"truncated format-212 frame at byte offset {offset}")
    b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    first = b[:, 0] | ((b[:, 1] & 0x0F) << 8)
    second = b[:, 2] | ((b[:, 1] & 0xF0) << 4)
    return _sign_extend_12(np.column_stack([first, second]).reshape(-1))


def encode_212(raw: Sequence[int]) -> bytes:
    """Pack an even-length sequence of 12-bit two's-complement integers."""
    raw = np.asarray(raw, dtype=np.int64)
    if raw.size % 2:
        raise IngestError("format 212 packs samples in pairs; got an odd count")
    if raw.size and (raw.min() < -2048 or raw.max() > 2047):
        raise IngestError("sample outside the 12-bit range [-2048, 2047]")
    u = (raw & 0xFFF).reshape(-1, 2)
    out = np.empty((u.shape[0], 3), dtype=np.uint8)
    out[:, 0] = u[:, 0] & 0xFF
    out[:, 1] = ((u[:, 0] >> 8) & 0x0F) | (((u[:, 1] >> 8) & 0x0F) << 4)
    out[:, 2] = u[:, 1] & 0xFF
    return out.tobytes()


def parse_wfdb212(data: bytes, n_channels: int, gains: Sequence[float],
                  baselines: Sequence[float], sampling_rate_hz: float = 360.0,
                  source_name: str = "") -> list[RawSignal]:
    """Decode a format-212 byte stream into one physical-unit signal per channel."""
    if n_channels not in (1, 2):
        raise IngestError(f"n_channels must be 1 or 2, got {n_channels}")
    gains = list(gains)
    baselines = list(baselines)
    if len(gains) != n_channels or len(baselines) != n_channels:
        raise IngestError("need one gain and one baseline per channel")
    if any(g <= 0 for g in gains):
        raise IngestError("gains must be positive")
    raw = decode_212(data)
    if raw.size == 0:
        raise IngestError("empty format-212 stream")
    frames = raw.reshape(-1, n_channels)
    return [RawSignal((frames[:, ch] - baselines[ch]) / gains[ch], sampling_rate_hz, ch, source_name)
            for ch in range(n_channels)]


def read_wfdb212(path, n_channels: int, gains, baselines, sampling_rate_hz: float = 360.0):
    path = Path(path)
    return parse_wfdb212(path.read_bytes(), n_channels, gains, baselines, sampling_rate_hz, path.stem)


def read_annotations(path, alphabet: Iterable[str] | None = DEFAULT_ALPHABET,
                     skip_unknown: bool = True) -> list[Annotation]:
    """Read the ``sample_index,symbol`` sidecar.

    Symbols outside ``alphabet`` are skipped (MITDB carries rhythm and noise
    markers that are not beats) unless ``skip_unknown`` is False.
    """
    allowed = None if alphabet is None else set(alphabet)
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise IngestError(f"{path}:{lineno}: expected 'sample_index,symbol'")
            try:
                idx = int(parts[0])
            except ValueError:
                raise IngestError(f"{path}:{lineno}: bad sample index {parts[0]!r}") from None
            if idx < 0:
                raise IngestError(f"{path}:{lineno}: negative sample index")
            sym = parts[1].strip()
            if allowed is not None and sym not in allowed:
                if skip_unknown:
                    continue
                raise IngestError(f"{path}:{lineno}: unknown symbol {sym!r}")
            out.append(Annotation(idx, sym))
    return out


def write_annotations(path, annotations: Iterable[Annotation]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in annotations:
            fh.write(f"{a.sample_index},{a.symbol}\n")


# ----------------------------------------------------------------- beatset CSV


def load_beatset_csv(path, alphabet: Iterable[str] | None = DEFAULT_ALPHABET) -> list[Beat]:
    """Read ``label,v1,...,v320`` lines (an optional trailing ``synthetic=0|1`` field)."""
    allowed = None if alphabet is None else set(alphabet)
    beats = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            synthetic = False
            if row[-1].startswith("synthetic="):
                flag = row.pop()
                if flag not in ("synthetic=0", "synthetic=1"):
                    raise IngestError(f"line {lineno}: bad provenance field {flag!r}")
                synthetic = flag.endswith("1")
            if len(row) != BEAT_LENGTH + 1:
                raise IngestError(f"line {lineno}: expected {BEAT_LENGTH + 1} fields, got {len(row)}")
            label = row[0]
            if allowed is not None and label not in allowed:
                raise IngestError(f"line {lineno}: unknown label {label!r}")
            try:
                values = np.array([float(v) for v in row[1:]])
            except ValueError as exc:
                raise IngestError(f"line {lineno}: non-numeric field ({exc})") from None
            if not np.all(np.isfinite(values)):
                raise IngestError(f"line {lineno}: non-finite value")
            beats.append(Beat(values, label, synthetic=synthetic))
    return beats


def save_beatset_csv(path, beats: Iterable[Beat], provenance: bool = False) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for b in beats:
            fields = [b.label] + [repr(float(v)) for v in b.values]
            if provenance:
                fields.append(f"synthetic={int(b.synthetic)}")
            fh.write(",".join(fields) + "\n")


def beats_to_arrays(beats: Sequence[Beat]) -> tuple[np.ndarray, np.ndarray]:
    if not beats:
        return np.empty((0, BEAT_LENGTH)), np.empty(0, dtype=object)
    return np.stack([b.values for b in beats]), np.array([b.label for b in beats], dtype=object)


def arrays_to_beats(X: np.ndarray, y: Sequence[str], standardized: bool = True,
                    synthetic: bool = False) -> list[Beat]:
    return [Beat(x, str(label), standardized=standardized, synthetic=synthetic)
            for x, label in zip(X, y)]


# ----------------------------------------------------------------- filtering


def design_highpass(cutoff_hz: float, sampling_rate_hz: float, order: int = 101) -> np.ndarray:
    """Linear-phase high-pass taps by spectral inversion of a Hamming-windowed sinc."""
    if not 0 < cutoff_hz < sampling_rate_hz / 2:
        raise IngestError(f"cutoff {cutoff_hz} Hz outside (0, {sampling_rate_hz / 2}) Hz")
    if order < 3 or order % 2 == 0:
        raise IngestError("filter order must be an odd integer >= 3")
    fc = cutoff_hz / sampling_rate_hz
    n = np.arange(order) - (order - 1) / 2
    lowpass = 2 * fc * np.sinc(2 * fc * n) * np.hamming(order)
    lowpass /= lowpass.sum()
    taps = -lowpass
    taps[(order - 1) // 2] += 1.0
    return taps


def highpass_fir(sig: RawSignal, cutoff_hz: float = 0.5, order: int = 101) -> RawSignal:
    """Zero-phase-aligned FIR high-pass; output has the input's length."""
    taps = design_highpass(cutoff_hz, sig.sampling_rate_hz, order)
    delay = (order - 1) // 2
    full = np.convolve(sig.samples, taps, mode="full")
    return replace(sig, samples=full[delay:delay + sig.samples.size])


# ----------------------------------------------------------------- Pan-Tompkins


def _pan_tompkins_stages(x: np.ndarray, fs: float):
    b, a = sps.butter(2, [5.0, 15.0], btype="bandpass", fs=fs)
    filtered = sps.filtfilt(b, a, x)
    deriv = np.convolve(filtered, np.array([1.0, 2.0, 0.0, -2.0, -1.0]) * (fs / 8.0), mode="same")
    squared = deriv ** 2
    width = max(1, int(round(0.150 * fs)))
    integrated = np.convolve(squared, np.ones(width) / width, mode="same")
    return filtered, integrated


def detect_r_peaks(sig: RawSignal, refine_window_s: float = 0.05) -> list[int]:
    """Pan-Tompkins QRS detection returning R-peak sample indices.

    Candidate peaks of the moving-window integral are classified with the
    adaptive signal/noise thresholds, a 200 ms refractory period and a
    searchback at half threshold when no beat was found for 166% of the
    recent mean RR interval. Each detection is then moved to the largest
    absolute deflection of ``sig`` within ``refine_window_s``.
    """
    fs = sig.sampling_rate_hz
    if fs < 100:
        raise IngestError("Pan-Tompkins needs a sampling rate of at least 100 Hz")
    x = sig.samples
    if x.size < 2 * fs:
        raise IngestError("record shorter than 2 s; thresholds cannot initialise")
    if np.ptp(x) == 0:
        return []
    _, mwi = _pan_tompkins_stages(x, fs)
    refractory = int(round(0.2 * fs))
    cand, _ = sps.find_peaks(mwi, distance=refractory)
    if cand.size == 0:
        return []
    learn = mwi[: int(2 * fs)]
    spki = learn.max() / 3.0
    npki = learn.mean() / 2.0
    th1 = npki + 0.25 * (spki - npki)

    qrs: list[int] = []
    rr: list[int] = []
    noise_since_last: list[int] = []

    def accept(p: int, value: float, searchback: bool) -> None:
        nonlocal spki
        if qrs:
            rr.append(p - qrs[-1])
            del rr[:-8]
        qrs.append(p)
        spki = (0.25 * value + 0.75 * spki) if searchback else (0.125 * value + 0.875 * spki)
        noise_since_last.clear()

    for p in cand:
        p = int(p)
        value = mwi[p]
        if qrs and rr:
            rr_avg = float(np.mean(rr))
            if p - qrs[-1] > 1.66 * rr_avg:
                th2 = 0.5 * th1
                pool = [q for q in noise_since_last if q - qrs[-1] > refractory and mwi[q] > th2]
                if pool:
                    best = max(pool, key=lambda q: mwi[q])
                    accept(best, mwi[best], searchback=True)
                    th1 = npki + 0.25 * (spki - npki)
        if value > th1 and (not qrs or p - qrs[-1] > refractory):
            accept(p, value, searchback=False)
        else:
            npki = 0.125 * value + 0.875 * npki
            noise_since_last.append(p)
        th1 = npki + 0.25 * (spki - npki)

    half = int(round(refine_window_s * fs))
    refined = set()
    for p in qrs:
        lo, hi = max(0, p - half), min(x.size, p + half + 1)
        refined.add(lo + int(np.argmax(np.abs(x[lo:hi]))))
    return sorted(refined)


# ----------------------------------------------------------------- segmentation


@dataclass
class SegmentResult:
    beats: list[Beat] = field(default_factory=list)
    dropped_boundary: int = 0
    dropped_unlabeled: int = 0


def match_annotation(peak: int, ann_index: np.ndarray, tolerance: int) -> int | None:
    """Position in ``ann_index`` (sorted) of the nearest annotation, ties to the earlier one."""
    if ann_index.size == 0:
        return None
    pos = int(np.searchsorted(ann_index, peak))
    best = None
    for j in (pos - 1, pos):
        if 0 <= j < ann_index.size:
            d = abs(int(ann_index[j]) - peak)
            if d <= tolerance and (best is None or d < best[1]):
                best = (j, d)
    return None if best is None else best[0]


def segment_beats(sig: RawSignal, peaks: Iterable[int], annotations: Sequence[Annotation],
                  tolerance_s: float = 0.05) -> SegmentResult:
    """Cut 160+160-sample windows around labelled peaks; unmatched or overrunning ones are dropped."""
    order = sorted(annotations, key=lambda a: a.sample_index)
    ann_index = np.array([a.sample_index for a in order], dtype=np.int64)
    tol = int(round(tolerance_s * sig.sampling_rate_hz))
    result = SegmentResult()
    for p in peaks:
        p = int(p)
        start, stop = p - HALF_WINDOW, p + HALF_WINDOW
        if start < 0 or stop > sig.samples.size:
            result.dropped_boundary += 1
            continue
        j = match_annotation(p, ann_index, tol)
        if j is None:
            result.dropped_unlabeled += 1
            continue
        result.beats.append(Beat(sig.samples[start:stop].copy(), order[j].symbol, p))
    return result


# ----------------------------------------------------------------- standardization


def standardize_rows(X: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise z-score with population std; flat rows become zeros and are flagged."""
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=1, keepdims=True)
    sd = X.std(axis=1, keepdims=True)
    degenerate = sd[:, 0] < eps
    Z = np.divide(X - mu, sd, out=np.zeros_like(X), where=~degenerate[:, None])
    return Z, degenerate


def standardize(beat: Beat) -> Beat:
    Z, degenerate = standardize_rows(beat.values[None, :])
    return replace(beat, values=Z[0], standardized=True, degenerate=bool(degenerate[0]))


class BeatStandardizer(TransformerMixin, BaseEstimator):
    """Stateless per-beat z-scoring usable inside sklearn pipelines."""

    def __init__(self, eps: float = 1e-8):
        self.eps = eps

    def fit(self, X, y=None):
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        return standardize_rows(X, self.eps)[0]


# ----------------------------------------------------------------- splitting


def stratified_split(labels: Sequence, ratio: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class seeded shuffle; each class keeps round(ratio * n_class) items for training."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must lie in [0, 1]")
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == label)
        idx = idx[rng.permutation(idx.size)]
        n_train = int(math.floor(ratio * idx.size + 0.5))
        train.extend(idx[:n_train].tolist())
        test.extend(idx[n_train:].tolist())
    return np.array(sorted(train), dtype=np.intp), np.array(sorted(test), dtype=np.intp)


def split_train_test(beats: Sequence[Beat], ratio: float = 0.8, seed: int = 0):
    tr, te = stratified_split([b.label for b in beats], ratio, seed)
    return [beats[i] for i in tr], [beats[i] for i in te]


# ----------------------------------------------------------------- whole chain


@dataclass
class IngestSummary:
    beats_per_class: dict
    dropped_boundary: int
    dropped_unlabeled: int
    degenerate: int
    n_peaks: int


def extract_beats(sig: RawSignal, annotations: Sequence[Annotation], peak_source: str = "detector",
                  cutoff_hz: float = 0.5, order: int = 101,
                  tolerance_s: float = 0.05) -> tuple[list[Beat], IngestSummary]:
    """filter -> locate peaks -> segment -> standardize for one channel."""
    filtered = highpass_fir(sig, cutoff_hz, order)
    if peak_source == "detector":
        peaks = detect_r_peaks(filtered)
    elif peak_source == "annotations":
        peaks = sorted(a.sample_index for a in annotations)
    else:
        raise IngestError(f"unknown peak source {peak_source!r}")
    seg = segment_beats(filtered, peaks, annotations, tolerance_s)
    beats = [standardize(b) for b in seg.beats]
    counts: dict[str, int] = {}
    for b in beats:
        counts[b.label] = counts.get(b.label, 0) + 1
    summary = IngestSummary(dict(sorted(counts.items())), seg.dropped_boundary, seg.dropped_unlabeled,
                            sum(b.degenerate for b in beats), len(peaks))
    return beats, summary
