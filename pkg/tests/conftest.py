"""Shared fixtures and file-writing helpers for the test suite."""

import struct
import wave

import numpy as np
import pytest

from ssmlearn.frontend import PatchSequence
from ssmlearn.optim import TrainTrack
from ssmlearn.ssm import BinarySSM
from ssmlearn.synthgen import SynthConfig, gen_corpus


def write_pcm16_wav(path, samples, sample_rate=22050):
    """Write PCM-16 WAV via the stdlib, independent of the package reader.

    ``samples`` is float in [-1, 1], shape (n,) or (n, channels).
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    ints = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(samples.shape[1])
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(ints.tobytes())


def write_float32_wav(path, samples, sample_rate=22050):
    """Minimal IEEE float-32 WAV writer (format tag 3)."""
    samples = np.asarray(samples, dtype="<f4")
    if samples.ndim == 1:
        samples = samples[:, None]
    n_channels = samples.shape[1]
    data = samples.tobytes()
    byte_rate = sample_rate * n_channels * 4
    fmt = struct.pack("<HHIIHH", 3, n_channels, sample_rate, byte_rate, n_channels * 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def raw_ints_pcm16_wav(path, raw_values, sample_rate=8000, n_channels=1):
    """Write exact int16 sample values (for scale-mapping tests)."""
    data = np.asarray(raw_values, dtype="<i2").tobytes()
    byte_rate = sample_rate * n_channels * 2
    fmt = struct.pack("<HHIIHH", 1, n_channels, sample_rate, byte_rate, n_channels * 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(data)) + data
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", len(body)) + body)


def unit_rows(rng, n, d):
    rows = rng.normal(size=(n, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_track(rng, track_id="t0", n_beats=12, n_labels=2):
    """Random TrainTrack with valid patches and a matching ground truth."""
    patches = rng.uniform(0.0, 1.0, size=(n_beats, 72, 64)).astype(np.float32)
    labels = rng.integers(0, n_labels, size=n_beats)
    while len(set(labels.tolist())) < 2:
        labels = rng.integers(0, n_labels, size=n_beats)
    values = (labels[:, None] == labels[None, :]).astype(np.uint8)
    lam_raw = float(values.mean())
    gt = BinarySSM(values=values, lam=float(np.clip(lam_raw, 0.05, 0.95)), lam_raw=lam_raw)
    pseq = PatchSequence(patches=patches, beat_times=(np.arange(n_beats) + 0.5) * 0.5)
    return TrainTrack(track_id=track_id, patches=pseq, gt=gt)


def make_corpus(rng, n_tracks=8, n_beats=10):
    return [make_track(rng, track_id=f"t{i:02d}", n_beats=n_beats) for i in range(n_tracks)]


@pytest.fixture(scope="session")
def synth_corpus_dir(tmp_path_factory):
    """Small noisy synthetic corpus shared by eval/CLI tests."""
    out = tmp_path_factory.mktemp("synth_corpus")
    base = SynthConfig(
        structure="AB",
        beats_per_section=5,
        beat_period=0.5,
        frames_per_beat=8,
        noise_sigma=0.3,
        template_peaks=6,
        seed=0,
    )
    manifest = gen_corpus(8, base, seed=101, out_dir=out)
    return manifest.parent


@pytest.fixture(scope="session")
def synth_manifest(synth_corpus_dir):
    return synth_corpus_dir / "manifest.json"
