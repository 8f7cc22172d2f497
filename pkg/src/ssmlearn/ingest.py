"""Readers for audio, beat grids, segment annotations and binary feature matrices.

All readers are pure functions of file content and return immutable value
objects, so they are safe to call concurrently across tracks.

File formats
------------
beats file    : UTF-8 text, one decimal seconds value per line.
annotation    : UTF-8 text, ``start<TAB>end<TAB>label`` per line (.lab layout).
SSMF matrix   : magic ``SSMF``, u32-LE version=1, u32 rows, u32 cols, then
                rows*cols float32-LE values in row-major order.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError

SSMF_MAGIC = b"SSMF"
SSMF_VERSION = 1

MIN_BEATS = 5  # smallest grid from which a 4-beat patch can be formed


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class BeatGrid:
    """Strictly increasing beat times in seconds."""

    beat_times: np.ndarray
    source: str = "file"  # "file" or "uniform-fallback"

    def __len__(self) -> int:
        return len(self.beat_times)


@dataclass(frozen=True)
class Segment:
    start: float
    end: float
    label: str


@dataclass(frozen=True)
class SegmentAnnotation:
    """Non-overlapping labelled segments sorted by start time; gaps permitted."""

    segments: tuple[Segment, ...] = field(default_factory=tuple)

    def __len__(self) -> int:
        return len(self.segments)


def normalize_label(label: str) -> str:
    """Canonical annotation label: whitespace-trimmed and case-folded."""
    return label.strip().lower()


def read_wav(path) -> AudioBuffer:
    """Read a RIFF/WAVE file into a mono AudioBuffer.

    Supports PCM 16-bit and IEEE float-32 data with any channel count.
    Channels are averaged; 16-bit samples map to ``v / 32768``; float
    samples are clipped to [-1, 1].
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[0:4] != b"RIFF" or blob[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        chunk_id = blob[pos : pos + 4]
        (chunk_len,) = struct.unpack_from("<I", blob, pos + 4)
        body = blob[pos + 8 : pos + 8 + chunk_len]
        if len(body) < chunk_len:
            raise FormatError(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if chunk_len < 16:
                raise FormatError(f"{path}: fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            data = body
        pos += 8 + chunk_len + (chunk_len & 1)  # chunks are word-aligned

    if fmt is None or data is None:
        raise FormatError(f"{path}: missing fmt or data chunk")
    audio_format, n_channels, sample_rate, _, _, bits = fmt
    if n_channels < 1 or sample_rate <= 0:
        raise FormatError(f"{path}: invalid channel count or sample rate")

    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(data, dtype="<i2")
        scale = 1.0 / 32768.0
        decode = lambda a: a.astype(np.float64) * scale  # noqa: E731
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(data, dtype="<f4")
        decode = lambda a: np.clip(a.astype(np.float64), -1.0, 1.0)  # noqa: E731
    else:
        raise FormatError(
            f"{path}: unsupported codec (format={audio_format}, bits={bits}); "
            "expected PCM-16 or IEEE float-32"
        )

    if raw.size == 0:
        raise ValidationError(f"{path}: empty audio data")
    n_frames = raw.size // n_channels
    samples = decode(raw[: n_frames * n_channels].reshape(n_frames, n_channels)).mean(axis=1)
    if not np.all(np.isfinite(samples)):
        raise ValidationError(f"{path}: non-finite samples")
    return AudioBuffer(samples=samples, sample_rate=int(sample_rate))


def read_beats(path) -> BeatGrid:
    """Parse a beats file: one decimal seconds value per line, blank lines ignored."""
    times = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                t = float(text)
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: cannot parse beat time {text!r}") from None
            if not math.isfinite(t) or t < 0:
                raise ValidationError(f"{path}:{lineno}: beat time must be finite and >= 0")
            if times and t <= times[-1]:
                raise ValidationError(
                    f"{path}:{lineno}: beat times must be strictly increasing "
                    f"({t} after {times[-1]})"
                )
            times.append(t)
    if len(times) < MIN_BEATS:
        raise ValidationError(f"{path}: need at least {MIN_BEATS} beats, found {len(times)}")
    return BeatGrid(beat_times=np.asarray(times, dtype=np.float64), source="file")


def write_beats(beats: BeatGrid, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in beats.beat_times:
            fh.write(f"{float(t)!r}\n")


def uniform_beats(duration: float, period: float) -> BeatGrid:
    """Uniform fallback grid at period, 2*period, ... strictly below duration."""
    if period <= 0:
        raise ValidationError(f"beat period must be positive, got {period}")
    times = []
    k = 1
    while k * period < duration:
        times.append(k * period)
        k += 1
    if len(times) < MIN_BEATS:
        raise ValidationError(
            f"duration {duration}s at period {period}s yields only {len(times)} beats "
            f"(need {MIN_BEATS})"
        )
    return BeatGrid(beat_times=np.asarray(times, dtype=np.float64), source="uniform-fallback")


def read_annotation(path) -> SegmentAnnotation:
    """Parse a tab-separated .lab annotation: ``start<TAB>end<TAB>label`` rows.

    Labels are trimmed and lower-cased; segments are sorted by start and must
    not overlap. Gaps between segments are permitted.
    """
    segments = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.rstrip("\n")
            if not text.strip():
                continue
            parts = text.split("\t")
            if len(parts) < 3:
                raise ValidationError(f"{path}:{lineno}: expected 'start<TAB>end<TAB>label'")
            try:
                start, end = float(parts[0]), float(parts[1])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: cannot parse segment times") from None
            if not (math.isfinite(start) and math.isfinite(end)):
                raise ValidationError(f"{path}:{lineno}: segment times must be finite")
            if start >= end:
                raise ValidationError(f"{path}:{lineno}: segment start must precede end")
            label = normalize_label("\t".join(parts[2:]))
            if not label:
                raise ValidationError(f"{path}:{lineno}: empty label")
            segments.append(Segment(start, end, label))
    if not segments:
        raise ValidationError(f"{path}: no segments")
    segments.sort(key=lambda s: (s.start, s.end))
    for prev, cur in zip(segments, segments[1:]):
        if cur.start < prev.end:
            raise ValidationError(
                f"{path}: segments [{prev.start}, {prev.end}) and "
                f"[{cur.start}, {cur.end}) overlap"
            )
    return SegmentAnnotation(segments=tuple(segments))


def write_annotation(ann: SegmentAnnotation, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seg in ann.segments:
            fh.write(f"{float(seg.start)!r}\t{float(seg.end)!r}\t{seg.label}\n")


def read_feature_matrix(path) -> np.ndarray:
    """Read an SSMF binary matrix file into a float32 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[0:4] != SSMF_MAGIC:
        raise FormatError(f"{path}: bad SSMF magic")
    version, rows, cols = struct.unpack_from("<III", blob, 4)
    if version != SSMF_VERSION:
        raise FormatError(f"{path}: unsupported SSMF version {version}")
    payload = blob[16:]
    expected = rows * cols * 4
    if len(payload) != expected:
        raise CorruptionError(
            f"{path}: payload holds {len(payload)} bytes, header implies {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise CorruptionError(f"{path}: non-finite values in payload")
    return values.astype(np.float32)


def write_feature_matrix(values: np.ndarray, path) -> None:
    values = np.ascontiguousarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("feature matrix contains non-finite values")
    rows, cols = values.shape
    with open(path, "wb") as fh:
        fh.write(SSMF_MAGIC)
        fh.write(struct.pack("<III", SSMF_VERSION, rows, cols))
        fh.write(values.astype("<f4").tobytes(order="C"))
