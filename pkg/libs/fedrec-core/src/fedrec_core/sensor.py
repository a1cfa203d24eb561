"""Handcrafted 112-dimensional session embedding for 6-channel motion sensor streams.

Layout (frozen, in order):

  72  12 time-domain features for each of acc_x, acc_y, acc_z, gyro_x, gyro_y, gyro_z
   2  signal magnitude area for acc and gyro
   6  Pearson correlation of the axis pairs xy, xz, yz for acc then gyro
  30  5 frequency-domain features for each channel (bins 1..16 of a 32-point FFT)
   2  energyBand for acc and gyro (mean squared magnitude over bins 1..8 and the three axes)

Channels are mean-centred before the FFT so the zero padding from 30 to 32
points does not leak the offset into the non-DC bins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, List, Sequence, Tuple

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

CHANNELS: Tuple[str, ...] = ("acc_x", "acc_y", "acc_z", "gyro_x", "gyro_y", "gyro_z")
SENSORS: Tuple[str, ...] = ("acc", "gyro")
AXIS_PAIRS: Tuple[Tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2))
TIME_FEATURES: Tuple[str, ...] = (
    "mean", "std", "mad", "max", "min", "peaks", "numMean", "energy", "iqr", "entropy", "arCoeff1", "arCoeff2",
)
FREQ_FEATURES: Tuple[str, ...] = ("minFreqInd", "maxFreqInd", "meanFreq", "skewness", "kurtosis")

WINDOW_SECONDS = 60.0
OVERLAP = 0.95
RATE_HZ = 0.5
NEAREST_TOLERANCE = 1.0
SESSION_STEPS = 30
ENTROPY_BINS = 10
ENERGY_BAND = (1, 8)
EMBEDDING_DIM = 112


def feature_names() -> List[str]:
    names = [f"{c}_{f}" for c in CHANNELS for f in TIME_FEATURES]
    names += [f"{s}_sma" for s in SENSORS]
    names += [f"{s}_corr_{'xyz'[a]}{'xyz'[b]}" for s in SENSORS for a, b in AXIS_PAIRS]
    names += [f"{c}_{f}" for c in CHANNELS for f in FREQ_FEATURES]
    names += [f"{s}_energyBand" for s in SENSORS]
    return names


@dataclass
class SensorSession:
    samples: np.ndarray
    start: float = 0.0

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.shape != (SESSION_STEPS, len(CHANNELS)):
            raise ValueError(f"A session is {SESSION_STEPS}x{len(CHANNELS)}, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Session contains non-finite readings")


@dataclass
class SessionEmbedding:
    values: np.ndarray
    names: List[str]

    def __len__(self) -> int:
        return int(self.values.size)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))


# --- Windowing ---

def sessionize(
    timestamps: Sequence[float],
    values: Any,
    window: float = WINDOW_SECONDS,
    overlap: float = OVERLAP,
    rate: float = RATE_HZ,
) -> List[SensorSession]:
    """Resample onto the ``rate`` grid by nearest reading within one second and slide the window.

    A window with any grid point lacking a reading within tolerance is dropped.
    """
    t = np.asarray(timestamps, dtype=np.float64)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != t.size:
        raise ValueError(f"Expected one row of readings per timestamp, got {x.shape} for {t.size} timestamps")
    if t.size == 0:
        return []
    if np.any(np.diff(t) < 0):
        raise ValueError("Sensor stream must be sorted by timestamp")
    period = 1.0 / rate
    steps = int(round(window * rate))
    stride = round(window * (1.0 - overlap), 9)
    span = (steps - 1) * period
    sessions: List[SensorSession] = []
    dropped = 0
    for j in range(int(max(0.0, t[-1] - t[0]) // stride) + 2):
        start = t[0] + j * stride
        if start + span > t[-1] + NEAREST_TOLERANCE:
            break
        grid = start + period * np.arange(steps)
        right = np.clip(np.searchsorted(t, grid), 0, t.size - 1)
        left = np.clip(right - 1, 0, t.size - 1)
        use_left = np.abs(t[left] - grid) <= np.abs(t[right] - grid)
        nearest = np.where(use_left, left, right)
        if np.all(np.abs(t[nearest] - grid) <= NEAREST_TOLERANCE):
            sessions.append(SensorSession(samples=x[nearest], start=float(start)))
        else:
            dropped += 1
    if dropped:
        logger.info("Dropped %d windows with gaps in the sensor stream", dropped)
    return sessions


# --- FFT ---

def _next_pow2(n: int) -> int:
    m = 1
    while m < n:
        m <<= 1
    return m


def _fft_pow2(x: np.ndarray) -> np.ndarray:
    n = x.size
    bits = n.bit_length() - 1
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((np.arange(n) >> b) & 1) << (bits - 1 - b)
    x = x[rev]
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = x.reshape(-1, size)
        even = blocks[:, :half]
        odd = blocks[:, half:] * twiddle
        x = np.concatenate([even + odd, even - odd], axis=1).reshape(-1)
        size *= 2
    return x


def fft(signal: Sequence[complex]) -> np.ndarray:
    """Radix-2 Cooley-Tukey, X[k] = sum_t x[t] exp(-2 pi i k t / n), zero-padded to a power of two."""
    x = np.asarray(signal, dtype=np.complex128).reshape(-1)
    if x.size == 0:
        raise ValueError("fft of an empty signal")
    n = _next_pow2(x.size)
    if n != x.size:
        x = np.concatenate([x, np.zeros(n - x.size, dtype=np.complex128)])
    return _fft_pow2(x)


def ifft(spectrum: Sequence[complex]) -> np.ndarray:
    x = np.asarray(spectrum, dtype=np.complex128).reshape(-1)
    if x.size == 0 or x.size & (x.size - 1):
        raise ValueError(f"ifft needs a power-of-two length, got {x.size}")
    return np.conj(_fft_pow2(np.conj(x))) / x.size


# --- Features ---

def _centred(x: np.ndarray) -> np.ndarray:
    """``x - mean(x)``, exactly zero for a constant channel."""
    if np.ptp(x) == 0.0:
        return np.zeros_like(x)
    return x - x.mean()


def _ar2(x: np.ndarray) -> Tuple[float, float]:
    """Order-2 Yule-Walker coefficients from biased autocovariances."""
    c = _centred(x)
    n = c.size
    r0 = float(c @ c) / n
    if r0 == 0.0 or n < 3:
        return 0.0, 0.0
    r1 = float(c[:-1] @ c[1:]) / n
    r2 = float(c[:-2] @ c[2:]) / n
    det = r0 * r0 - r1 * r1
    if det == 0.0:
        return 0.0, 0.0
    return r1 * (r0 - r2) / det, (r0 * r2 - r1 * r1) / det


def _entropy(x: np.ndarray) -> float:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return 0.0
    counts, _ = np.histogram(x, bins=ENTROPY_BINS, range=(lo, hi))
    p = counts[counts > 0] / x.size
    return float(-(p * np.log(p)).sum())


def time_features(channel: Sequence[float]) -> np.ndarray:
    x = np.asarray(channel, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise ValueError("Channel contains non-finite values")
    # A constant channel must not pick up summation noise in its mean.
    mean = float(x[0]) if np.ptp(x) == 0.0 else float(x.mean())
    std = float(np.sqrt(np.mean((x - mean) ** 2)))
    med = float(np.median(x))
    interior = x[1:-1]
    peaks = int(np.sum((interior > x[:-2]) & (interior > x[2:]) & (interior > mean + std)))
    q75, q25 = np.percentile(x, [75, 25])
    ar1, ar2 = _ar2(x)
    return np.array(
        [
            mean,
            std,
            float(np.median(np.abs(x - med))),
            float(x.max()),
            float(x.min()),
            float(peaks),
            float(np.sum(x > mean)),
            float(np.mean(x * x)),
            float(q75 - q25),
            _entropy(x),
            ar1,
            ar2,
        ]
    )


def freq_features(spectrum: Sequence[complex]) -> np.ndarray:
    """Index extremes and magnitude-weighted moments of the bin index over bins 1..n/2."""
    s = np.asarray(spectrum, dtype=np.complex128).reshape(-1)
    mag = np.abs(s[1 : s.size // 2 + 1])
    bins = np.arange(1, mag.size + 1, dtype=np.float64)
    total = float(mag.sum())
    if total == 0.0:
        return np.array([1.0, 1.0, 0.0, 0.0, 0.0])
    w = mag / total
    mu = float(w @ bins)
    d = bins - mu
    var = float(w @ d**2)
    if var > 0.0:
        skew = float(w @ d**3) / var**1.5
        kurt = float(w @ d**4) / var**2 - 3.0
    else:
        skew = kurt = 0.0
    return np.array([float(1 + np.argmin(mag)), float(1 + np.argmax(mag)), mu, skew, kurt])


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    da, db = _centred(a), _centred(b)
    denom = np.sqrt(float(da @ da) * float(db @ db))
    return float(da @ db) / denom if denom > 0 else 0.0


def session_embedding(session: SensorSession) -> SessionEmbedding:
    x = session.samples
    parts: List[np.ndarray] = [time_features(x[:, c]) for c in range(len(CHANNELS))]
    sensors = (x[:, 0:3], x[:, 3:6])
    parts.append(np.array([float(np.abs(s).sum(axis=1).mean()) for s in sensors]))
    parts.append(np.array([_pearson(s[:, a], s[:, b]) for s in sensors for a, b in AXIS_PAIRS]))
    spectra = [fft(_centred(x[:, c])) for c in range(len(CHANNELS))]
    parts += [freq_features(sp) for sp in spectra]
    lo, hi = ENERGY_BAND
    parts.append(
        np.array(
            [float(np.mean([np.mean(np.abs(spectra[c][lo : hi + 1]) ** 2) for c in axes])) for axes in ((0, 1, 2), (3, 4, 5))]
        )
    )
    values = np.concatenate(parts)
    if values.size != EMBEDDING_DIM:
        raise ValueError(f"Embedding has {values.size} values, expected {EMBEDDING_DIM}")
    return SessionEmbedding(values=values, names=feature_names())


# --- Files ---

def load_sensor_csv(path: Path) -> Tuple[np.ndarray, np.ndarray]:
    """Read ``timestamp, acc_x..gyro_z``; rows are sorted by timestamp."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Sensor file not found: {path}")
    df = pd.read_csv(path)
    missing = [c for c in ("timestamp",) + CHANNELS if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    df = df.dropna(subset=["timestamp", *CHANNELS]).sort_values("timestamp", kind="stable")
    return df["timestamp"].to_numpy(dtype=np.float64), df[list(CHANNELS)].to_numpy(dtype=np.float64)


def embed_stream(timestamps: Sequence[float], values: Any) -> pd.DataFrame:
    """One row of 112 named features per valid session, plus its start time."""
    sessions = sessionize(timestamps, values)
    rows = [session_embedding(s).values for s in sessions]
    frame = pd.DataFrame(np.vstack(rows) if rows else np.zeros((0, EMBEDDING_DIM)), columns=feature_names())
    frame.insert(0, "session_start", [s.start for s in sessions])
    return frame
