"""Beat-synchronous constant-Q patch extraction.

Pipeline: magnitude CQT (72 log-spaced bins, 12 per octave from C1) scaled to
[0, 1] -> each inter-beat interval clustered into 16 contiguous sub-beat
columns (Ward criterion, median aggregation) -> one 72x64 patch per beat
covering the four surrounding inter-beat intervals.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .errors import ValidationError
from .ingest import AudioBuffer, BeatGrid, read_feature_matrix, write_feature_matrix

N_BINS = 72
BINS_PER_OCTAVE = 12
N_SUB_BEATS = 16
PATCH_INTERVALS = 4
PATCH_WIDTH = PATCH_INTERVALS * N_SUB_BEATS  # 64 columns per patch


@dataclass(frozen=True)
class CqtConfig:
    sample_rate: int = 22050
    hop: int = 512
    f_min: float = 32.70  # equal-tempered C1
    n_bins: int = N_BINS
    bins_per_octave: int = BINS_PER_OCTAVE
    db_floor: float = -80.0

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop

    def bin_frequencies(self) -> np.ndarray:
        k = np.arange(self.n_bins)
        return self.f_min * 2.0 ** (k / self.bins_per_octave)


@dataclass(frozen=True)
class CqtMatrix:
    """72 x F matrix of normalized magnitudes in [0, 1] at a fixed frame rate."""

    values: np.ndarray
    frame_rate: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SubBeatMatrix:
    """72 x (16 * (B - 1)) matrix: 16 sub-beat columns per inter-beat interval."""

    values: np.ndarray
    beats_covered: int

    @property
    def n_intervals(self) -> int:
        return self.beats_covered - 1


@dataclass(frozen=True)
class PatchSequence:
    """One 72x64 patch per beat; patch i is centered on beat i."""

    patches: np.ndarray  # (T, 72, 64) float32
    beat_times: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return self.patches.shape[0]


def _cqt_kernels(cfg: CqtConfig):
    """Hann-windowed complex kernels, one per bin, longest first."""
    q = 1.0 / (2.0 ** (1.0 / cfg.bins_per_octave) - 1.0)
    kernels = []
    for f_k in cfg.bin_frequencies():
        n_k = max(4, int(round(q * cfg.sample_rate / f_k)))
        n = np.arange(n_k)
        phase = -2j * np.pi * f_k * (n - (n_k - 1) / 2.0) / cfg.sample_rate
        kernels.append(np.hanning(n_k) * np.exp(phase) / n_k)
    return kernels


def compute_cqt(audio: AudioBuffer, config: CqtConfig | None = None) -> CqtMatrix:
    """Compute the normalized dB-scaled magnitude CQT of a mono track.

    Magnitudes are converted to dB relative to the track maximum, floored at
    ``config.db_floor``, then min-max scaled per track to [0, 1]. Digital
    silence yields an all-zero matrix.
    """
    cfg = config or CqtConfig()
    x = np.asarray(audio.samples, dtype=np.float64)
    if x.size == 0:
        raise ValidationError("empty audio buffer")
    kernels = _cqt_kernels(cfg)
    longest = max(len(k) for k in kernels)
    if x.size < longest:
        raise ValidationError(
            f"audio of {x.size} samples is shorter than one analysis window ({longest})"
        )

    n_frames = 1 + x.size // cfg.hop
    mag = np.empty((cfg.n_bins, n_frames), dtype=np.float64)
    for k, kern in enumerate(kernels):
        # correlate x with the kernel, response centered on each sample
        resp = fftconvolve(x, kern[::-1].conj(), mode="same")
        mag[k] = np.abs(resp[:: cfg.hop][:n_frames])

    ref = mag.max()
    if ref <= 0.0:
        return CqtMatrix(np.zeros_like(mag, dtype=np.float32), cfg.frame_rate)
    floor_amp = ref * 10.0 ** (cfg.db_floor / 20.0)
    db = 20.0 * np.log10(np.maximum(mag, floor_amp) / ref)
    lo, hi = db.min(), db.max()
    if hi - lo <= 0.0:
        values = np.zeros_like(db)
    else:
        values = (db - lo) / (hi - lo)
    return CqtMatrix(values.astype(np.float32), cfg.frame_rate)


def _ward_cost(size_a, mean_a, size_b, mean_b):
    diff = mean_a - mean_b
    return size_a * size_b / (size_a + size_b) * float(diff @ diff)


def _cluster_interval(frames: np.ndarray, n_sub: int) -> np.ndarray:
    """Split (d, n) frames into n_sub contiguous clusters; return (d, n_sub) medians.

    Greedy contiguity-constrained agglomerative merging under the Ward
    criterion; equal-cost merges take the earlier pair. Intervals with fewer
    than n_sub frames are upsampled by index repetition.
    """
    d, n = frames.shape
    if n <= n_sub:
        idx = (np.arange(n_sub) * n) // n_sub
        return frames[:, idx].copy()

    bounds = [(i, i + 1) for i in range(n)]  # [start, end) runs
    sizes = [1.0] * n
    means = [frames[:, i].astype(np.float64) for i in range(n)]
    while len(bounds) > n_sub:
        best_i, best_cost = 0, np.inf
        for i in range(len(bounds) - 1):
            cost = _ward_cost(sizes[i], means[i], sizes[i + 1], means[i + 1])
            if cost < best_cost:
                best_i, best_cost = i, cost
        s_a, s_b = sizes[best_i], sizes[best_i + 1]
        means[best_i] = (s_a * means[best_i] + s_b * means[best_i + 1]) / (s_a + s_b)
        sizes[best_i] = s_a + s_b
        bounds[best_i] = (bounds[best_i][0], bounds[best_i + 1][1])
        del bounds[best_i + 1], sizes[best_i + 1], means[best_i + 1]

    cols = np.empty((d, n_sub), dtype=frames.dtype)
    for j, (a, b) in enumerate(bounds):
        cols[:, j] = np.median(frames[:, a:b], axis=1)
    return cols


def subdivide_beats(cqt: CqtMatrix, beats: BeatGrid, n_sub: int = N_SUB_BEATS) -> SubBeatMatrix:
    """Aggregate CQT frames into 16 sub-beat columns per inter-beat interval.

    Beat times outside the frame range are clamped (with a warning). An
    interval containing no frames replicates its nearest frame.
    """
    n_frames = cqt.n_frames
    times = np.asarray(beats.beat_times, dtype=np.float64)
    frame_idx = np.rint(times * cqt.frame_rate).astype(np.int64)
    if frame_idx.min() < 0 or frame_idx.max() > n_frames:
        warnings.warn("beat times outside CQT frame range were clamped", stacklevel=2)
        frame_idx = np.clip(frame_idx, 0, n_frames)

    blocks = []
    for a, b in zip(frame_idx[:-1], frame_idx[1:]):
        if b > a:
            blocks.append(_cluster_interval(cqt.values[:, a:b], n_sub))
        else:
            nearest = min(max(int(a), 0), n_frames - 1)
            blocks.append(np.repeat(cqt.values[:, nearest : nearest + 1], n_sub, axis=1))
    return SubBeatMatrix(values=np.concatenate(blocks, axis=1), beats_covered=len(times))


def assemble_patches(sub: SubBeatMatrix, beats: BeatGrid) -> PatchSequence:
    """Assemble one 72x64 patch per beat from the four surrounding intervals.

    Beat i spans intervals (i-2, i-1), (i-1, i), (i, i+1), (i+1, i+2); missing
    intervals at the track edges replicate the nearest existing interval block.
    """
    n_beats = sub.beats_covered
    if n_beats < 5:
        raise ValidationError(f"need at least 5 beats to form patches, got {n_beats}")
    if sub.values.shape[1] != N_SUB_BEATS * (n_beats - 1):
        raise ValidationError(
            f"sub-beat matrix has {sub.values.shape[1]} columns, "
            f"expected {N_SUB_BEATS * (n_beats - 1)}"
        )
    n_intervals = n_beats - 1
    d = sub.values.shape[0]

    def block(j: int) -> np.ndarray:
        j = min(max(j, 0), n_intervals - 1)  # nearest existing interval
        return sub.values[:, j * N_SUB_BEATS : (j + 1) * N_SUB_BEATS]

    patches = np.empty((n_beats, d, PATCH_WIDTH), dtype=np.float32)
    for i in range(n_beats):
        patches[i] = np.concatenate([block(i - 2), block(i - 1), block(i), block(i + 1)], axis=1)
    return PatchSequence(patches=patches, beat_times=np.asarray(beats.beat_times, dtype=np.float64))


def extract_patches(
    audio: AudioBuffer, beats: BeatGrid, config: CqtConfig | None = None
) -> PatchSequence:
    """Full front end: audio -> CQT -> sub-beat columns -> patch sequence."""
    cqt = compute_cqt(audio, config)
    return assemble_patches(subdivide_beats(cqt, beats), beats)


def save_patches(pseq: PatchSequence, base_path) -> None:
    """Persist patches as ``base.ssmf`` (stacked (T*72) x 64) plus ``base.json``."""
    base = str(base_path)
    if base.endswith(".ssmf"):
        base = base[: -len(".ssmf")]
    t, d, w = pseq.patches.shape
    write_feature_matrix(pseq.patches.reshape(t * d, w), base + ".ssmf")
    sidecar = {
        "n_patches": int(t),
        "beat_times": [float(x) for x in np.asarray(pseq.beat_times)],
    }
    with open(base + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True)
        fh.write("\n")


def load_patches(base_path) -> PatchSequence:
    base = str(base_path)
    if base.endswith(".ssmf"):
        base = base[: -len(".ssmf")]
    stacked = read_feature_matrix(base + ".ssmf")
    with open(base + ".json", "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    t = int(sidecar["n_patches"])
    if stacked.shape[0] != t * N_BINS or stacked.shape[1] != PATCH_WIDTH:
        raise ValidationError(
            f"stacked patch matrix {stacked.shape} inconsistent with n_patches={t}"
        )
    beat_times = np.asarray(sidecar["beat_times"], dtype=np.float64)
    if len(beat_times) != t:
        raise ValidationError("sidecar beat_times length does not match n_patches")
    return PatchSequence(patches=stacked.reshape(t, N_BINS, PATCH_WIDTH), beat_times=beat_times)
