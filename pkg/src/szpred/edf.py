"""EDF (European Data Format) reader and writer.

Layout: 256-byte fixed ASCII header, then 256 bytes of ASCII metadata per
signal (grouped field-by-field, not signal-by-signal), then data records
of 16-bit little-endian two's-complement samples.  Physical values are
recovered with the per-signal linear calibration between the digital and
physical ranges.

EDF+ files are rejected: discontinuous recordings by the reserved field,
annotation-bearing ones by the 'EDF Annotations' signal label.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import CANONICAL_CHANNELS, EegRecord, normalize_label


class EdfError(ValueError):
    """Malformed EDF header or payload."""


class ChannelError(ValueError):
    """The file does not provide the requested channels."""


_HEADER_FIELDS = (
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
)

_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


@dataclass
class EdfSignal:
    label: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int


@dataclass
class EdfHeader:
    n_records: int
    record_duration: float
    signals: list[EdfSignal]


def _ascii(raw: bytes, offset: int, what: str) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError:
        raise EdfError(f"non-ASCII {what} field at byte {offset}") from None


def _parse_number(text: str, offset: int, what: str, cast):
    try:
        return cast(text.strip())
    except ValueError:
        raise EdfError(f"unparseable {what} field {text!r} at byte {offset}") from None


def read_edf_raw(path) -> tuple[EdfHeader, list[np.ndarray]]:
    """Parse an EDF file into its header and per-signal digital samples."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 256:
        raise EdfError(f"{path}: file shorter than the 256-byte header")

    fields = {}
    offset = 0
    for name, width in _HEADER_FIELDS:
        fields[name] = _ascii(data[offset:offset + width], offset, name)
        offset += width
    if fields["version"].strip() != "0":
        raise EdfError(f"{path}: version field {fields['version'].strip()!r} != '0' at byte 0")
    if fields["reserved"].startswith("EDF+D"):
        raise EdfError(f"{path}: discontinuous EDF+D recordings are not supported")
    ns = _parse_number(fields["n_signals"], 252, "n_signals", int)
    if ns < 1:
        raise EdfError(f"{path}: signal count {ns} < 1")
    n_records = _parse_number(fields["n_records"], 236, "n_records", int)
    record_duration = _parse_number(fields["record_duration"], 244, "record_duration", float)

    expected_header = 256 + 256 * ns
    if len(data) < expected_header:
        raise EdfError(f"{path}: truncated signal headers (need {expected_header} bytes)")

    per_signal: dict[str, list] = {}
    for name, width in _SIGNAL_FIELDS:
        values = []
        for i in range(ns):
            values.append(_ascii(data[offset:offset + width], offset, name))
            offset += width
        per_signal[name] = values

    signals = []
    for i in range(ns):
        label = per_signal["label"][i].strip()
        if label == "EDF Annotations":
            raise EdfError(f"{path}: EDF+ annotation signals are not supported")
        signals.append(EdfSignal(
            label=label,
            physical_min=_parse_number(per_signal["physical_min"][i], 0, "physical_min", float),
            physical_max=_parse_number(per_signal["physical_max"][i], 0, "physical_max", float),
            digital_min=_parse_number(per_signal["digital_min"][i], 0, "digital_min", int),
            digital_max=_parse_number(per_signal["digital_max"][i], 0, "digital_max", int),
            samples_per_record=_parse_number(
                per_signal["samples_per_record"][i], 0, "samples_per_record", int),
        ))

    record_words = sum(s.samples_per_record for s in signals)
    payload = np.frombuffer(data, dtype="<i2", offset=expected_header)
    if n_records < 0:  # -1 means unknown; infer from payload size
        n_records = payload.size // record_words
    if payload.size < n_records * record_words:
        raise EdfError(
            f"{path}: payload holds {payload.size} samples, "
            f"header promises {n_records * record_words} (at byte {expected_header})"
        )
    payload = payload[:n_records * record_words].reshape(n_records, record_words)

    digital = []
    start = 0
    for sig in signals:
        digital.append(payload[:, start:start + sig.samples_per_record].reshape(-1))
        start += sig.samples_per_record
    return EdfHeader(n_records=n_records, record_duration=record_duration, signals=signals), digital


def read_edf(path, channel_labels=CANONICAL_CHANNELS) -> EegRecord:
    """Read an EDF file and return the requested channels in the given order.

    Matching is by normalized label; duplicate labels keep the first
    occurrence and extra channels are dropped.  Pass a different
    ``channel_labels`` sequence for recordings with a non-standard montage.
    """
    header, digital = read_edf_raw(path)

    by_label: dict[str, int] = {}
    for i, sig in enumerate(header.signals):
        by_label.setdefault(normalize_label(sig.label), i)

    wanted = [normalize_label(lab) for lab in channel_labels]
    missing = [lab for lab in wanted if lab not in by_label]
    if missing:
        raise ChannelError(f"{path}: missing channels: {', '.join(missing)}")

    rows = []
    rates = set()
    for lab in wanted:
        sig = header.signals[by_label[lab]]
        if header.record_duration <= 0:
            raise EdfError(f"{path}: non-positive record duration")
        rate = sig.samples_per_record / header.record_duration
        if rate != int(rate):
            raise EdfError(f"{path}: non-integer sampling rate {rate} for {sig.label}")
        rates.add(int(rate))
        dmin, dmax = sig.digital_min, sig.digital_max
        if dmax == dmin:
            raise EdfError(f"{path}: degenerate digital range for {sig.label}")
        scale = (sig.physical_max - sig.physical_min) / (dmax - dmin)
        rows.append((digital[by_label[lab]].astype(np.float64) - dmin) * scale
                    + sig.physical_min)
    if len(rates) != 1:
        raise EdfError(f"{path}: mixed sampling rates {sorted(rates)} across channels")

    return EegRecord(
        sampling_rate=rates.pop(),
        channel_labels=[str(lab) for lab in channel_labels],
        samples=np.vstack(rows),
    )


def write_edf(record: EegRecord, path, physical_range: tuple[float, float] | None = None) -> None:
    """Write a record as plain EDF with 1-second data records.

    Samples are quantized onto the int16 digital range; the written
    digital values round-trip bit-exactly through ``read_edf_raw``.
    """
    path = Path(path)
    fs = record.sampling_rate
    n = record.samples.shape[1]
    if n % fs != 0:
        raise EdfError(f"record length {n} is not a whole number of 1-s data records")
    n_records = n // fs
    if physical_range is None:
        span = np.max(np.abs(record.samples)) if record.samples.size else 1.0
        span = max(float(span), 1.0)
        physical_range = (-span, span)
    pmin, pmax = physical_range
    dmin, dmax = -32768, 32767
    scale = (pmax - pmin) / (dmax - dmin)
    digital = np.clip(
        np.round((record.samples - pmin) / scale) + dmin, dmin, dmax
    ).astype("<i2")

    def pad(text: str, width: int) -> bytes:
        raw = text.encode("ascii")
        if len(raw) > width:
            raise EdfError(f"field {text!r} exceeds {width} ASCII bytes")
        return raw.ljust(width)

    ns = record.n_channels
    head = b"".join([
        pad("0", 8),
        pad("X X X X", 80),
        pad("Startdate X szpred synthetic", 80),
        pad("01.01.00", 8),
        pad("00.00.00", 8),
        pad(str(256 + 256 * ns), 8),
        pad("", 44),
        pad(str(n_records), 8),
        pad("1", 8),
        pad(str(ns), 4),
    ])

    def column(field_width: int, values: list[str]) -> bytes:
        return b"".join(pad(v, field_width) for v in values)

    labels = [str(lab) for lab in record.channel_labels]
    head += column(16, labels)
    head += column(80, [""] * ns)
    head += column(8, ["uV"] * ns)
    head += column(8, [f"{pmin:g}"[:8] for _ in range(ns)])
    head += column(8, [f"{pmax:g}"[:8] for _ in range(ns)])
    head += column(8, [str(dmin)] * ns)
    head += column(8, [str(dmax)] * ns)
    head += column(80, [""] * ns)
    head += column(8, [str(fs)] * ns)
    head += column(32, [""] * ns)

    body = digital.reshape(ns, n_records, fs).transpose(1, 0, 2).tobytes()
    path.write_bytes(head + body)
