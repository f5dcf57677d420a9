"""WAV and CSV input/output, missing-data masks and reconstruction metrics."""

from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._validation import check_positive, check_signal
from .exceptions import AudioFormatError, ConfigurationError, DegenerateInputError

PCM_SCALE = 32768.0


@dataclass
class AudioBuffer:
    """Mono samples in [-1, 1] with their sample rate.

    ``scale`` records any gain applied at ingestion so outputs can be mapped
    back: original = samples / scale.
    """

    samples: np.ndarray
    sample_rate: float
    scale: float = 1.0

    def __post_init__(self):
        self.samples = check_signal(self.samples, "samples", allow_empty=True)
        check_positive(self.sample_rate, "sample_rate")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def normalized(self, peak=0.99) -> "AudioBuffer":
        """Copy rescaled so that ``max |x| = peak``; silent buffers are returned unchanged."""
        m = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if m == 0:
            return AudioBuffer(self.samples.copy(), self.sample_rate, self.scale)
        g = peak / m
        return AudioBuffer(self.samples * g, self.sample_rate, self.scale * g)


def read_wav(path) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            nch, width, rate, nframes = w.getnchannels(), w.getsampwidth(), w.getframerate(), w.getnframes()
            if nch != 1:
                raise AudioFormatError(f"{path}: fmt chunk declares {nch} channels; only mono is supported")
            if width != 2:
                raise AudioFormatError(f"{path}: fmt chunk declares {8 * width}-bit samples; only 16-bit PCM is supported")
            raw = w.readframes(nframes)
    except wave.Error as exc:
        msg = str(exc)
        chunk = "RIFF header" if "RIFF" in msg or "WAVE" in msg else "fmt chunk"
        if "data" in msg:
            chunk = "data chunk"
        raise AudioFormatError(f"{path}: malformed {chunk}: {msg}") from exc
    except EOFError as exc:
        raise AudioFormatError(f"{path}: truncated RIFF header") from exc
    if len(raw) != 2 * nframes:
        raise AudioFormatError(f"{path}: data chunk is truncated ({len(raw)} of {2 * nframes} bytes)")
    if rate <= 0:
        raise AudioFormatError(f"{path}: fmt chunk declares sample rate {rate}")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return AudioBuffer(samples, float(rate))


def to_pcm16(samples) -> np.ndarray:
    """Round to nearest and clamp to the int16 range."""
    x = np.rint(np.asarray(samples, dtype=float) * PCM_SCALE)
    return np.clip(x, -32768, 32767).astype("<i2")


def write_wav(path, buffer, sample_rate=None):
    """Write ``buffer`` (an :class:`AudioBuffer` or an array plus ``sample_rate``)."""
    if isinstance(buffer, AudioBuffer):
        samples, rate = buffer.samples, buffer.sample_rate
    else:
        if sample_rate is None:
            raise ConfigurationError("sample_rate is required when writing a plain array")
        samples, rate = check_signal(buffer, allow_empty=True), sample_rate
    rate = int(round(check_positive(rate, "sample_rate")))
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(to_pcm16(samples).tobytes())


# --- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    snr_db: float
    rmse: float


def snr_db(clean, estimate) -> float:
    """``10 log10(sum clean^2 / sum (clean - estimate)^2)``; ``inf`` for an exact match."""
    clean, estimate = _pair(clean, estimate)
    sig = float(np.sum(clean**2))
    if sig == 0:
        raise DegenerateInputError("SNR is undefined for a zero-energy reference")
    err = float(np.sum((clean - estimate) ** 2))
    if err == 0:
        return math.inf
    return 10.0 * math.log10(sig / err)


def rmse(clean, estimate) -> float:
    clean, estimate = _pair(clean, estimate)
    return float(np.sqrt(np.mean((clean - estimate) ** 2)))


def metrics(clean, estimate) -> Metrics:
    return Metrics(snr_db(clean, estimate), rmse(clean, estimate))


def _pair(a, b):
    a = check_signal(a, "clean")
    b = check_signal(b, "estimate")
    if a.shape != b.shape:
        raise ConfigurationError(f"length mismatch: {a.size} vs {b.size}")
    return a, b


# --- CSV ----------------------------------------------------------------------

def export_csv(path, columns: dict, index_name="step"):
    """Write equal-length columns with a header row and a leading step index."""
    names = list(columns)
    arrays = [np.asarray(columns[n], dtype=float).ravel() for n in names]
    lengths = {a.size for a in arrays}
    if len(lengths) > 1:
        raise ConfigurationError(f"columns have different lengths {sorted(lengths)}")
    T = lengths.pop() if lengths else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow([index_name] + names)
        for k in range(T):
            wr.writerow([k] + [repr(float(a[k])) for a in arrays])


def read_csv(path, index_name="step") -> dict:
    """Inverse of :func:`export_csv`; returns ``{column: array}`` without the index."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ConfigurationError(f"{path}: empty CSV")
    header = rows[0]
    data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
    return {name: data[:, j] for j, name in enumerate(header) if name != index_name}


def matrix_columns(prefix, M):
    """``{prefix1: M[:, 0], ...}`` for a (T, K) matrix, 1-based names."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    return {f"{prefix}{j + 1}": M[:, j] for j in range(M.shape[1])}


# --- masks --------------------------------------------------------------------

def ranges_to_mask(ranges, length) -> np.ndarray:
    """Observation mask (True = observed) with ``[start, end)`` sample ranges missing."""
    mask = np.ones(int(length), dtype=bool)
    for start, end in ranges:
        start, end = int(start), int(end)
        if not 0 <= start <= end <= length:
            raise ConfigurationError(f"missing range ({start}, {end}) outside [0, {length}]")
        mask[start:end] = False
    return mask


def mask_to_ranges(mask):
    m = np.asarray(mask, dtype=bool)
    d = np.diff(np.concatenate([[0], (~m).astype(int), [0]]))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def read_mask_csv(path, length) -> np.ndarray:
    """Read ``start_sample,end_sample`` rows (end exclusive); a header row is optional."""
    ranges = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                ranges.append((int(row[0]), int(row[1])))
            except (ValueError, IndexError):
                if i == 0:
                    continue  # header
                raise ConfigurationError(f"{path}: bad mask row {i + 1}: {row}") from None
    return ranges_to_mask(ranges, length)


def write_mask_csv(path, mask):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["start_sample", "end_sample"])
        wr.writerows(mask_to_ranges(mask))


def gap_mask(length, gap, period, offset=None) -> np.ndarray:
    """Regularly spaced gaps of ``gap`` samples every ``period`` samples."""
    length, gap, period = int(length), int(gap), int(period)
    if gap <= 0 or period <= gap:
        raise ConfigurationError("need 0 < gap < period")
    offset = period // 2 if offset is None else int(offset)
    starts = np.arange(offset, length - gap, period)
    return ranges_to_mask([(s, s + gap) for s in starts], length)
