"""Self-similarity matrices: the estimate from embeddings and the annotation ground truth.

The estimated SSM uses scaled cosine similarity, written as
``1 - ||e_i - e_j||^2 / 4`` for unit-norm embeddings, which maps equal vectors
to 1, orthogonal ones to 0.5 and antipodal ones to 0. The binary ground truth
follows the homogeneity assumption: two beats are similar iff the segments
they fall in carry the same label.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DomainError, FormatError, ValidationError
from .ingest import BeatGrid, SegmentAnnotation

LAMBDA_MIN = 0.05
LAMBDA_MAX = 0.95

UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class BinarySSM:
    """Ground-truth SSM with its positive rate.

    ``lam`` is the fraction of 1 entries clamped to [0.05, 0.95] for use as the
    loss weighting factor; ``lam_raw`` is the unclamped fraction.
    """

    values: np.ndarray  # (T, T) uint8 in {0, 1}
    lam: float
    lam_raw: float

    @property
    def size(self) -> int:
        return self.values.shape[0]


def _pairwise_similarity(emb: np.ndarray) -> np.ndarray:
    sq = (emb * emb).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    return 1.0 - 0.25 * d2


def similarity_matrix(emb: np.ndarray) -> np.ndarray:
    """Estimated SSM from unit-norm embedding rows.

    Returns a symmetric (T, T) float64 matrix with unit diagonal and entries
    in [0, 1].
    """
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ValidationError(f"embeddings must be (T, d), got {emb.shape}")
    norms = np.linalg.norm(emb, axis=1)
    if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
        worst = int(np.argmax(np.abs(norms - 1.0)))
        raise DomainError(f"embedding row {worst} has norm {norms[worst]:.6g}, expected 1")
    s = _pairwise_similarity(emb)
    s = 0.5 * (s + s.T)  # remove float asymmetry
    return np.clip(s, 0.0, 1.0)


def similarity_tracked(emb: dc.Tensor) -> dc.Tensor:
    """Tape op building the estimated SSM from a (T, d) embedding Tensor."""
    e = emb.data
    out = _pairwise_similarity(e)

    def backward_fn(g):
        m = g + g.T
        row = m.sum(axis=1)
        dc.accumulate(emb, -0.5 * (row[:, None] * e - m @ e))

    return dc.make_node(out, (emb,), backward_fn)


def _beat_labels(ann: SegmentAnnotation, beats: BeatGrid) -> list[str]:
    """Label per beat: containing segment ([start, end)), else nearest by boundary distance."""
    if len(ann) == 0:
        raise ValidationError("empty annotation")
    labels = []
    for t in np.asarray(beats.beat_times, dtype=np.float64):
        hit = None
        for seg in ann.segments:
            if seg.start <= t < seg.end:
                hit = seg
                break
        if hit is None:
            hit = min(ann.segments, key=lambda s: max(s.start - t, t - s.end, 0.0))
        labels.append(hit.label)
    return labels


def ground_truth_ssm(ann: SegmentAnnotation, beats: BeatGrid) -> BinarySSM:
    """Binary SSM from segment labels under the homogeneity assumption.

    Beats falling in annotation gaps (or outside the annotated range) map to
    the nearest segment so the matrix stays index-aligned with the patch
    sequence. The positive rate is clamped to [0.05, 0.95].
    """
    labels = _beat_labels(ann, beats)
    _, codes = np.unique(labels, return_inverse=True)
    values = (codes[:, None] == codes[None, :]).astype(np.uint8)
    lam_raw = float(values.mean())
    if len(set(labels)) == 1:
        warnings.warn("all beats share one label; ground-truth SSM is degenerate", stacklevel=2)
    lam = float(np.clip(lam_raw, LAMBDA_MIN, LAMBDA_MAX))
    return BinarySSM(values=values, lam=lam, lam_raw=lam_raw)


def render_ssm_pgm(matrix: np.ndarray, path) -> None:
    """Write a similarity matrix as a binary PGM (P5) image.

    Pixel value is ``round(255 * S_ij)`` with halves rounding up; row i runs
    top to bottom.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"matrix must be 2-D, got shape {m.shape}")
    if m.min() < 0.0 or m.max() > 1.0:
        raise ValidationError("matrix entries must lie in [0, 1]")
    pixels = np.floor(255.0 * m + 0.5).astype(np.uint8)
    rows, cols = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by ``render_ssm_pgm``; returns uint8 pixels."""
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise FormatError(f"{path}: not a maxval-255 binary PGM")
    try:
        cols, rows = (int(x) for x in parts[1].split())
    except ValueError:
        raise FormatError(f"{path}: bad PGM dimensions") from None
    data = parts[3]
    if len(data) != rows * cols:
        raise FormatError(f"{path}: pixel payload length mismatch")
    return np.frombuffer(data, dtype=np.uint8).reshape(rows, cols)
