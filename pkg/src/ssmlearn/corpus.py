"""Manifest-driven corpus loading shared by training and evaluation.

A manifest is a JSON list of entries ``{track_id, features_path, beats_path,
annotation_path}`` (paths resolved relative to the manifest file). An entry
may carry an optional ``frame_rate`` for raw feature matrices; without one the
default CQT frame rate (22050 / 512) applies.

The features file is interpreted by shape: a 72-row SSMF matrix is a raw
CQT-like matrix that still needs sub-beat aggregation and patch assembly,
while a (T*72) x 64 matrix with a ``.json`` sidecar is a pre-extracted patch
sequence.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .frontend import N_BINS, CqtConfig, CqtMatrix, PatchSequence, assemble_patches, load_patches, subdivide_beats
from .ingest import read_annotation, read_beats, read_feature_matrix
from .optim import TrainTrack
from .ssm import ground_truth_ssm

DEFAULT_FRAME_RATE = CqtConfig().frame_rate


def load_manifest(path) -> list[dict]:
    manifest_path = Path(path)
    with open(manifest_path, "r", encoding="utf-8") as fh:
        entries = json.load(fh)
    if not isinstance(entries, list) or not entries:
        raise ValidationError(f"{path}: manifest must be a non-empty JSON list")
    required = {"track_id", "features_path", "beats_path", "annotation_path"}
    resolved = []
    for i, entry in enumerate(entries):
        missing = required - set(entry)
        if missing:
            raise ValidationError(f"{path}: entry {i} missing keys {sorted(missing)}")
        e = dict(entry)
        for key in ("features_path", "beats_path", "annotation_path"):
            e[key] = str((manifest_path.parent / entry[key]).resolve())
        resolved.append(e)
    return resolved


def load_track_patches(entry: dict) -> PatchSequence:
    features = read_feature_matrix(entry["features_path"])
    beats = read_beats(entry["beats_path"])
    if features.shape[0] == N_BINS:
        frame_rate = float(entry.get("frame_rate", DEFAULT_FRAME_RATE))
        cqt = CqtMatrix(values=features, frame_rate=frame_rate)
        return assemble_patches(subdivide_beats(cqt, beats), beats)
    return load_patches(entry["features_path"])


def load_track(entry: dict) -> TrainTrack:
    patches = load_track_patches(entry)
    beats = read_beats(entry["beats_path"])
    ann = read_annotation(entry["annotation_path"])
    gt = ground_truth_ssm(ann, beats)
    if gt.size != len(patches):
        raise ValidationError(
            f"{entry['track_id']}: {len(patches)} patches but {gt.size} annotated beats"
        )
    return TrainTrack(track_id=str(entry["track_id"]), patches=patches, gt=gt)


def load_corpus(manifest_path) -> list[TrainTrack]:
    """Load every manifest entry; raises with the offending track ids on failure."""
    entries = load_manifest(manifest_path)
    tracks, failures = [], []
    for entry in entries:
        try:
            tracks.append(load_track(entry))
        except Exception as exc:  # collected so the error names every bad track
            failures.append(f"{entry['track_id']}: {exc}")
    if failures:
        raise ValidationError("corpus load failed for:\n  " + "\n  ".join(failures))
    return tracks
