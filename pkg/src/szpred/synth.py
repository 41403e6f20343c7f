"""Synthetic labeled EEG with planted channel-specific preictal signatures.

Background is smoothed Gaussian noise per channel.  Informative channels
carry a sinusoid at the center of the chosen band whose amplitude steps
up inside each preictal window (the SOP span ending SPH seconds before a
planted onset) so that in-band power rises by exactly the requested gain
over the channel's own interictal level.  A persistent fraction of the
signature stays on outside preictal windows, making informative channels
identifiable at all times, the way focal channels are in real EEG; both
components scale with (gain - 1), so gain 1 degenerates to pure noise.
Deterministic given the seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import features
from .records import EegRecord, SeizureAnnotations


class SynthSpecError(ValueError):
    """The requested synthetic layout is impossible."""


@dataclass
class SynthSpec:
    n_channels: int = 8
    duration_s: int = 3600
    sampling_rate: int = 64
    seizure_times: tuple[float, ...] = ()
    seizure_duration_s: float = 10.0
    informative_channels: tuple[int, ...] = ()
    preictal_band: str = "alpha"
    preictal_gain: float = 4.0
    persistent_fraction: float = 0.5   # share of (gain - 1) present at all times
    noise_level: float = 1.0
    rng_seed: int = 0
    sph_s: int = 180
    sop_s: int = 1800
    channel_labels: tuple[str, ...] = field(default=None)

    def __post_init__(self):
        if self.channel_labels is None:
            self.channel_labels = tuple(f"ch{i}" for i in range(self.n_channels))


def _validate(spec: SynthSpec) -> None:
    if spec.n_channels < 1 or spec.duration_s < 1 or spec.sampling_rate < 1:
        raise SynthSpecError("channels, duration and sampling rate must be positive")
    if any(c < 0 or c >= spec.n_channels for c in spec.informative_channels):
        raise SynthSpecError(
            f"informative channels {spec.informative_channels} outside "
            f"[0, {spec.n_channels})"
        )
    if spec.preictal_gain < 1.0:
        raise SynthSpecError(f"preictal_gain must be >= 1, got {spec.preictal_gain}")
    if spec.preictal_band not in features.BAND_NAMES:
        raise SynthSpecError(f"unknown band {spec.preictal_band!r}")
    lo, _ = features.BAND_NAMES[spec.preictal_band]
    if lo >= spec.sampling_rate / 2:
        raise SynthSpecError(
            f"band {spec.preictal_band} above Nyquist for fs={spec.sampling_rate}"
        )
    window = spec.sph_s + spec.sop_s
    prev_end = None
    for onset in sorted(spec.seizure_times):
        if onset - window < 0:
            raise SynthSpecError(
                f"onset {onset} leaves no room for a {window}-s preictal window"
            )
        if onset + spec.seizure_duration_s > spec.duration_s:
            raise SynthSpecError(f"seizure at {onset} runs past the record end")
        if prev_end is not None and onset < prev_end:
            raise SynthSpecError(f"seizures overlap near onset {onset}")
        prev_end = onset + spec.seizure_duration_s


def _band_sum(chunk: np.ndarray, fs: int, band: str) -> float:
    """Mean summed in-band PSD over consecutive 2-s windows of ``chunk``."""
    length = features.WINDOW_S * fs
    lo, hi = features.BAND_NAMES[band]
    total = 0.0
    count = 0
    for start in range(0, chunk.size - length + 1, length):
        p = features.apply_band_masks(features.psd(chunk[start:start + length], fs))
        sel = (p.freqs > lo) & (p.freqs <= hi)
        total += float(p.power[0, sel].sum())
        count += 1
    return total / max(count, 1)


def synth_generate(spec: SynthSpec) -> tuple[EegRecord, SeizureAnnotations]:
    """Generate one labeled record from a spec."""
    _validate(spec)
    rng = np.random.default_rng(spec.rng_seed)
    fs = spec.sampling_rate
    n = spec.duration_s * fs

    samples = rng.standard_normal((spec.n_channels, n)) * spec.noise_level
    kernel = np.hanning(9)
    kernel /= kernel.sum()
    for c in range(spec.n_channels):  # mild low-pass coloring
        samples[c] = np.convolve(samples[c], kernel, mode="same")

    onsets = sorted(spec.seizure_times)
    if spec.informative_channels and spec.preictal_gain > 1.0:
        lo, hi = features.BAND_NAMES[spec.preictal_band]
        tone_hz = min((lo + hi) / 2.0, spec.sampling_rate / 2.0 - 1.0)
        t = np.arange(n) / fs
        # interictal in-band power is lifted by L, preictal by L * gain, so
        # the preictal-vs-interictal log difference is exactly log(gain)
        lift = 1.0 + (spec.preictal_gain - 1.0) * spec.persistent_fraction
        df = fs / features._next_pow2(features.WINDOW_S * fs)
        for c in spec.informative_channels:
            # calibrate against this channel's own pre-injection background
            probe = samples[c, :min(n, 64 * features.WINDOW_S * fs)]
            background = _band_sum(probe, fs, spec.preictal_band)
            amp_base = np.sqrt(2.0 * df * (lift - 1.0) * background)
            amp_pre = np.sqrt(
                2.0 * df * (lift * spec.preictal_gain - 1.0) * background)
            envelope = np.full(n, amp_base)
            for onset in onsets:
                a = int((onset - spec.sph_s - spec.sop_s) * fs)
                b = int((onset - spec.sph_s) * fs)
                envelope[a:b] = amp_pre
            phase = rng.uniform(0.0, 2.0 * np.pi)
            samples[c] += envelope * np.sin(2.0 * np.pi * tone_hz * t + phase)

    record = EegRecord(sampling_rate=fs, channel_labels=list(spec.channel_labels),
                       samples=samples)
    ann = SeizureAnnotations(
        events=[(float(o), float(o + spec.seizure_duration_s)) for o in onsets],
        patient_id="synthetic",
    )
    return record, ann
