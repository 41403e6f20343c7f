"""Band-power feature extraction: 2-s windows at a 1-s hop.

Each window gets a Hann-tapered periodogram (mean removal, taper, FFT,
one-sided density normalization), spectral masking (57-63 Hz notch, cut
above 128 Hz), and 44 features per channel: 8 absolute log band powers,
8 relative log band powers, and the 28 pairwise differences of the
absolute powers.  Band membership is half-open (lo, hi]; the "total"
power in the relative features is the union of the 8 bands, so content
below 4 Hz never enters any feature.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .records import EegRecord

BANDS = (
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 13.0),
    ("beta", 13.0, 30.0),
    ("gamma1", 30.0, 50.0),
    ("gamma2", 50.0, 70.0),
    ("gamma3", 70.0, 90.0),
    ("gamma4", 90.0, 110.0),
    ("gamma5", 110.0, 128.0),
)
BAND_NAMES = {name: (lo, hi) for name, lo, hi in BANDS}
RATIO_PAIRS = tuple((i, j) for i in range(8) for j in range(8) if i < j)

NOTCH_LO_HZ = 57.0
NOTCH_HI_HZ = 63.0
HIGH_CUTOFF_HZ = 128.0

WINDOW_S = 2
HOP_S = 1
N_FEATURES = 8 + 8 + len(RATIO_PAIRS)  # 44

FEATURE_EPS = 1e-12

# Per-second period labels, shared across the labeling and evaluation code.
INTERICTAL, EXCLUDED, PREICTAL, ICTAL = 0, 1, 2, 3
LABEL_NAMES = {INTERICTAL: "interictal", EXCLUDED: "excluded",
               PREICTAL: "preictal", ICTAL: "ictal"}
LABEL_CODES = {name: code for code, name in LABEL_NAMES.items()}


class SegmentationError(ValueError):
    """Record too short to segment."""


@dataclass
class Psd:
    freqs: np.ndarray          # Hz, ascending, resolution fs / n_fft
    power: np.ndarray          # channels x bins, nonnegative
    window_start_s: float = 0.0


@dataclass
class FeatureTimeline:
    timestamps: np.ndarray        # window-start seconds, 1-s grid
    features: np.ndarray          # time x channels x 44
    labels: np.ndarray            # per-timestamp period code
    second_labels: np.ndarray = field(default=None)  # per-second track, len = duration


def _next_pow2(n: int) -> int:
    m = 1
    while m < n:
        m *= 2
    return m


def segment(record: EegRecord):
    """Yield (start_s, window) pairs: 2-s windows on a 1-s grid."""
    fs = record.sampling_rate
    length = WINDOW_S * fs
    n = record.samples.shape[1]
    if n < length:
        raise SegmentationError(
            f"record holds {n / fs:.2f} s, needs at least {WINDOW_S} s"
        )
    count = n // fs - (WINDOW_S - 1)
    for k in range(count):
        yield k, record.samples[:, k * fs:k * fs + length]


def _periodogram(windows: np.ndarray, fs: int) -> tuple[np.ndarray, np.ndarray]:
    """Hann-tapered one-sided periodogram of rows along the last axis.

    Mean removal, taper, FFT zero-padded to the next power of two, then
    |X|^2 / (fs * sum(w^2)) with the usual one-sided doubling.
    """
    n = windows.shape[-1]
    nfft = _next_pow2(n)
    taper = np.hanning(n)
    detrended = windows - windows.mean(axis=-1, keepdims=True)
    coeffs = np.fft.rfft(detrended * taper, n=nfft, axis=-1)
    power = (coeffs.real ** 2 + coeffs.imag ** 2) / (fs * np.sum(taper ** 2))
    power[..., 1:] *= 2.0
    if nfft % 2 == 0:
        power[..., -1] /= 2.0  # Nyquist bin is not mirrored
    freqs = np.fft.rfftfreq(nfft, 1.0 / fs)
    return freqs, power


def psd(window: np.ndarray, fs: int, window_start_s: float = 0.0) -> Psd:
    """Power spectral density of one 2-s window (channels x samples)."""
    window = np.atleast_2d(np.asarray(window, dtype=np.float64))
    freqs, power = _periodogram(window, fs)
    return Psd(freqs=freqs, power=power, window_start_s=window_start_s)


def _mask_bins(freqs: np.ndarray) -> np.ndarray:
    keep = np.ones_like(freqs, dtype=bool)
    keep &= ~((freqs >= NOTCH_LO_HZ) & (freqs <= NOTCH_HI_HZ))
    keep &= ~(freqs > HIGH_CUTOFF_HZ)
    return keep


def apply_band_masks(p: Psd) -> Psd:
    """Zero the 57-63 Hz notch and everything above 128 Hz (idempotent)."""
    keep = _mask_bins(p.freqs)
    return Psd(freqs=p.freqs, power=p.power * keep, window_start_s=p.window_start_s)


def _band_masks(freqs: np.ndarray) -> list[np.ndarray]:
    """Boolean bin masks of half-open (lo, hi] band membership."""
    return [(freqs > lo) & (freqs <= hi) for _, lo, hi in BANDS]


def band_powers(p: Psd) -> np.ndarray:
    """44 features per channel from a masked PSD (channels x 44)."""
    return _features_from_power(p.power, _band_masks(p.freqs))


def _features_from_power(power: np.ndarray, band_masks: list[np.ndarray]) -> np.ndarray:
    """power: ... x bins -> ... x 44."""
    sums = np.stack([power[..., m].sum(axis=-1) for m in band_masks], axis=-1)
    total = sums.sum(axis=-1, keepdims=True)
    absolute = np.log(sums + FEATURE_EPS)
    relative = np.log((sums + FEATURE_EPS) / (total + FEATURE_EPS))
    ratios = np.stack(
        [absolute[..., i] - absolute[..., j] for i, j in RATIO_PAIRS], axis=-1
    )
    return np.concatenate([absolute, relative, ratios], axis=-1)


def extract_timeline(
    record: EegRecord,
    second_labels: np.ndarray | None = None,
    chunk: int = 2048,
) -> FeatureTimeline:
    """Full pipeline: segment -> psd -> mask -> band powers, per channel.

    ``second_labels`` is the per-second period track for the record; a
    window's label is the track value at its start when both covered
    seconds agree, otherwise EXCLUDED (the window straddles a boundary).
    """
    fs = record.sampling_rate
    length = WINDOW_S * fs
    n = record.samples.shape[1]
    if n < length:
        raise SegmentationError(
            f"record holds {n / fs:.2f} s, needs at least {WINDOW_S} s"
        )
    count = n // fs - (WINDOW_S - 1)

    windows = np.lib.stride_tricks.sliding_window_view(record.samples, length, axis=1)
    windows = windows[:, ::fs * HOP_S, :][:, :count, :]  # channels x count x length

    freqs = np.fft.rfftfreq(_next_pow2(length), 1.0 / fs)
    keep = _mask_bins(freqs)
    band_masks = _band_masks(freqs)

    # channels are processed one at a time so a single-channel extraction
    # is bit-identical to the corresponding slice of a multichannel one
    out = np.empty((count, record.n_channels, N_FEATURES), dtype=np.float64)
    for c in range(record.n_channels):
        for start in range(0, count, chunk):
            stop = min(start + chunk, count)
            _, power = _periodogram(windows[c, start:stop, :], fs)
            out[start:stop, c] = _features_from_power(power * keep, band_masks)

    timestamps = np.arange(count, dtype=np.int64)
    if second_labels is None:
        labels = np.full(count, INTERICTAL, dtype=np.int8)
        track = np.full(int(record.duration_s), INTERICTAL, dtype=np.int8)
    else:
        track = np.asarray(second_labels, dtype=np.int8)
        first = track[:count]
        second = track[1:count + 1]
        labels = np.where(first == second, first, EXCLUDED).astype(np.int8)
    return FeatureTimeline(timestamps=timestamps, features=out,
                           labels=labels, second_labels=track)


def write_feature_cache(tl: FeatureTimeline, path) -> None:
    """CSV cache: timestamp, channel, f0..f43 with bit round-trip precision."""
    path = Path(path)
    header = ["timestamp", "channel"] + [f"f{i}" for i in range(N_FEATURES)]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for t_idx, t in enumerate(tl.timestamps):
            for c in range(tl.features.shape[1]):
                writer.writerow([int(t), c]
                                + [repr(float(v)) for v in tl.features[t_idx, c]])


def read_feature_cache(path) -> FeatureTimeline:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["timestamp", "channel"]:
            raise ValueError(f"{path}: unexpected cache header")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), [float(v) for v in row[2:]]))
    if not rows:
        raise ValueError(f"{path}: empty feature cache")
    n_time = max(r[0] for r in rows) + 1
    n_chan = max(r[1] for r in rows) + 1
    features = np.zeros((n_time, n_chan, N_FEATURES), dtype=np.float64)
    for t, c, values in rows:
        features[t, c] = values
    return FeatureTimeline(
        timestamps=np.arange(n_time, dtype=np.int64),
        features=features,
        labels=np.full(n_time, INTERICTAL, dtype=np.int8),
        second_labels=np.full(n_time + 1, INTERICTAL, dtype=np.int8),
    )
