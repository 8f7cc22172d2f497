"""CQT extraction, sub-beat subdivision and patch assembly."""

import itertools

import numpy as np
import pytest

from ssmlearn.errors import ValidationError
from ssmlearn.frontend import (
    CqtConfig,
    CqtMatrix,
    PatchSequence,
    _cluster_interval,
    assemble_patches,
    compute_cqt,
    extract_patches,
    load_patches,
    save_patches,
    subdivide_beats,
)
from ssmlearn.ingest import AudioBuffer, BeatGrid

SR = 22050


def sine(freq, duration, sr=SR, amp=0.5):
    t = np.arange(int(sr * duration)) / sr
    return AudioBuffer(samples=amp * np.sin(2 * np.pi * freq * t), sample_rate=sr)


def brute_force_min_sse_partition(frames, n_sub):
    """Oracle: exhaustive search over contiguous partitions minimizing within-cluster SSE."""
    n = frames.shape[1]
    best_cost, best = np.inf, None
    for cuts in itertools.combinations(range(1, n), n_sub - 1):
        bounds = [0, *cuts, n]
        cost = 0.0
        for a, b in zip(bounds[:-1], bounds[1:]):
            chunk = frames[:, a:b]
            cost += float(((chunk - chunk.mean(axis=1, keepdims=True)) ** 2).sum())
        if cost < best_cost:
            best_cost, best = cost, bounds
    return best


class TestComputeCqt:
    def test_sine_peaks_at_nearest_bin(self):
        # oracle: bin centers are f_min * 2^(k/12); pick the bin nearest 440 Hz
        cfg = CqtConfig()
        expected_bin = int(np.argmin(np.abs(cfg.bin_frequencies() - 440.0)))
        assert expected_bin == 45  # frozen from the oracle above
        cqt = compute_cqt(sine(440.0, 2.0), cfg)
        mid = cqt.values[:, cqt.values.shape[1] // 2]
        assert int(np.argmax(mid)) == expected_bin

    def test_silence_all_zero(self):
        cqt = compute_cqt(AudioBuffer(samples=np.zeros(SR), sample_rate=SR))
        assert np.all(cqt.values == 0.0)

    def test_amplitude_scaling_invariance(self):
        full = compute_cqt(sine(440.0, 1.5, amp=0.8))
        half = compute_cqt(sine(440.0, 1.5, amp=0.4))
        assert np.abs(full.values.astype(np.float64) - half.values.astype(np.float64)).max() < 1e-6

    def test_output_contract(self):
        cqt = compute_cqt(sine(220.0, 1.2))
        assert cqt.values.shape[0] == 72
        assert cqt.values.min() >= 0.0 and cqt.values.max() <= 1.0
        assert np.all(np.isfinite(cqt.values))

    def test_too_short_audio(self):
        with pytest.raises(ValidationError, match="analysis window"):
            compute_cqt(AudioBuffer(samples=np.zeros(1000), sample_rate=SR))


class TestSubdivision:
    def test_exactly_16_frames_is_identity(self):
        rng = np.random.default_rng(0)
        frames = rng.uniform(size=(72, 16)).astype(np.float32)
        cols = _cluster_interval(frames, 16)
        assert np.array_equal(cols, frames)

    def test_constant_interval(self):
        v = np.linspace(0, 1, 72, dtype=np.float32)
        frames = np.tile(v[:, None], (1, 32))
        cols = _cluster_interval(frames, 16)
        assert np.array_equal(cols, np.tile(v[:, None], (1, 16)))

    def test_three_a_one_b_matches_brute_force(self):
        a = np.full(3, 0.2, dtype=np.float64)
        b = np.full(3, 0.9, dtype=np.float64)
        frames = np.stack([a, a, a, b], axis=1)
        bounds = brute_force_min_sse_partition(frames, 2)
        assert bounds == [0, 3, 4]  # oracle picks {a,a,a},{b}
        cols = _cluster_interval(frames, 2)
        np.testing.assert_array_equal(cols[:, 0], a)
        np.testing.assert_array_equal(cols[:, 1], b)

    def test_equal_cost_merges_take_earlier_pair(self):
        x = np.full(3, 0.1)
        y = np.full(3, 0.8)
        frames = np.stack([x, x, y, y], axis=1)
        # costs (0, d, 0): the tie between the two zero-cost merges resolves
        # to the earlier pair, leaving {x,x},{y},{y}
        cols = _cluster_interval(frames, 3)
        np.testing.assert_array_equal(cols, np.stack([x, y, y], axis=1))

    def test_column_count_law(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            n_beats = int(rng.integers(5, 12))
            n_frames = int(rng.integers(40, 200))
            cqt = CqtMatrix(values=rng.uniform(size=(72, n_frames)).astype(np.float32), frame_rate=20.0)
            times = np.sort(rng.uniform(0.2, (n_frames - 1) / 20.0, size=n_beats))
            while np.any(np.diff(times) <= 0):
                times = np.sort(rng.uniform(0.2, (n_frames - 1) / 20.0, size=n_beats))
            sub = subdivide_beats(cqt, BeatGrid(beat_times=times))
            assert sub.values.shape == (72, 16 * (n_beats - 1))

    def test_median_within_cluster_bounds(self):
        rng = np.random.default_rng(3)
        cqt = CqtMatrix(values=rng.uniform(size=(72, 100)).astype(np.float32), frame_rate=20.0)
        times = np.array([0.5, 1.5, 2.5, 3.5, 4.5])
        sub = subdivide_beats(cqt, BeatGrid(beat_times=times))
        lo, hi = cqt.values.min(), cqt.values.max()
        assert sub.values.min() >= lo and sub.values.max() <= hi

    def test_permuting_within_cluster_keeps_median(self):
        # two tight groups force clusters {0,1},{2,3}; swap frames inside each
        base = np.array(
            [[0.10, 0.12, 0.90, 0.88]] * 4, dtype=np.float64
        )
        swapped = base[:, [1, 0, 3, 2]]
        np.testing.assert_array_equal(
            _cluster_interval(base, 2), _cluster_interval(swapped, 2)
        )

    def test_empty_interval_replicates_nearest_frame(self):
        rng = np.random.default_rng(4)
        cqt = CqtMatrix(values=rng.uniform(size=(72, 50)).astype(np.float32), frame_rate=10.0)
        # beats 1.0 and 1.02 map to the same frame index -> empty interval
        times = np.array([0.5, 1.0, 1.02, 1.5, 2.0, 2.5])
        sub = subdivide_beats(cqt, BeatGrid(beat_times=times))
        block = sub.values[:, 16:32]
        frame = cqt.values[:, 10]
        assert np.array_equal(block, np.tile(frame[:, None], (1, 16)))

    def test_out_of_range_beats_clamped_with_warning(self):
        rng = np.random.default_rng(5)
        cqt = CqtMatrix(values=rng.uniform(size=(72, 30)).astype(np.float32), frame_rate=10.0)
        times = np.array([0.5, 1.0, 1.5, 2.0, 99.0])
        with pytest.warns(UserWarning, match="clamped"):
            sub = subdivide_beats(cqt, BeatGrid(beat_times=times))
        assert sub.values.shape == (72, 64)


class TestAssemblePatches:
    @staticmethod
    def _sub_and_beats(rng, n_beats):
        from ssmlearn.frontend import SubBeatMatrix

        values = rng.uniform(size=(72, 16 * (n_beats - 1))).astype(np.float32)
        sub = SubBeatMatrix(values=values, beats_covered=n_beats)
        beats = BeatGrid(beat_times=np.arange(1, n_beats + 1, dtype=np.float64))
        return sub, beats

    def test_middle_beat_exact_fit(self):
        rng = np.random.default_rng(6)
        sub, beats = self._sub_and_beats(rng, 5)
        pseq = assemble_patches(sub, beats)
        blk = lambda j: sub.values[:, 16 * j : 16 * (j + 1)]  # noqa: E731
        np.testing.assert_array_equal(
            pseq.patches[2], np.concatenate([blk(0), blk(1), blk(2), blk(3)], axis=1)
        )

    def test_edge_replication(self):
        rng = np.random.default_rng(7)
        sub, beats = self._sub_and_beats(rng, 5)
        pseq = assemble_patches(sub, beats)
        blk = lambda j: sub.values[:, 16 * j : 16 * (j + 1)]  # noqa: E731
        np.testing.assert_array_equal(
            pseq.patches[0], np.concatenate([blk(0), blk(0), blk(0), blk(1)], axis=1)
        )
        np.testing.assert_array_equal(
            pseq.patches[4], np.concatenate([blk(2), blk(3), blk(3), blk(3)], axis=1)
        )

    def test_every_patch_is_72x64_and_count_matches_beats(self):
        rng = np.random.default_rng(8)
        for n_beats in (5, 7, 11):
            sub, beats = self._sub_and_beats(rng, n_beats)
            pseq = assemble_patches(sub, beats)
            assert pseq.patches.shape == (n_beats, 72, 64)

    def test_too_few_beats(self):
        rng = np.random.default_rng(9)
        sub, beats = self._sub_and_beats(rng, 5)
        short = BeatGrid(beat_times=beats.beat_times[:4])
        from ssmlearn.frontend import SubBeatMatrix

        sub4 = SubBeatMatrix(values=sub.values[:, :48], beats_covered=4)
        with pytest.raises(ValidationError, match="at least 5"):
            assemble_patches(sub4, short)

    def test_translation_consistency(self):
        # shifting audio and beats by a whole number of hops preserves interior patches
        cfg = CqtConfig()
        rng = np.random.default_rng(10)
        burst = rng.uniform(-0.5, 0.5, size=int(1.8 * SR))
        pad = np.zeros(int(0.6 * SR))
        shift_samples = 10 * cfg.hop
        shift = shift_samples / SR

        base = np.concatenate([pad, burst, pad])
        shifted = np.concatenate([np.zeros(shift_samples), base])
        beat_times = 0.7 + 0.25 * np.arange(6)

        p1 = extract_patches(AudioBuffer(base, SR), BeatGrid(beat_times=beat_times), cfg)
        p2 = extract_patches(
            AudioBuffer(shifted, SR), BeatGrid(beat_times=beat_times + shift), cfg
        )
        np.testing.assert_allclose(
            p1.patches[2:4].astype(np.float64), p2.patches[2:4].astype(np.float64), atol=1e-5
        )


class TestPatchPersistence:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        pseq = PatchSequence(
            patches=rng.uniform(size=(6, 72, 64)).astype(np.float32),
            beat_times=np.arange(6) * 0.5 + 0.25,
        )
        base = tmp_path / "track"
        save_patches(pseq, base)
        assert (tmp_path / "track.ssmf").exists() and (tmp_path / "track.json").exists()
        back = load_patches(base)
        assert np.array_equal(back.patches, pseq.patches)
        assert np.array_equal(back.beat_times, pseq.beat_times)

    def test_sidecar_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(12)
        pseq = PatchSequence(
            patches=rng.uniform(size=(6, 72, 64)).astype(np.float32),
            beat_times=np.arange(6) * 0.5,
        )
        save_patches(pseq, tmp_path / "track")
        sidecar = tmp_path / "track.json"
        sidecar.write_text('{"n_patches": 5, "beat_times": [0, 1, 2, 3, 4]}')
        with pytest.raises(ValidationError):
            load_patches(tmp_path / "track")
