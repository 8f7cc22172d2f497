"""Feature-quality scoring: per-track Loss and AUC against the ground-truth SSM.

Three feature variants are scored: ``cqt`` (flattened, L2-normalized patches),
``convnet`` (the untrained random-weight encoder) and ``ssmnet`` (a trained
model). AUC treats every strict-upper-triangle pair as one binary decision:
the diagonal is excluded (always positive with similarity exactly 1) and the
lower mirror is redundant by symmetry. Ties are handled by midranks, so the
statistic equals P(score_pos > score_neg) + 0.5 * P(equal).

Report CSV: header ``track_id,variant,T,loss,auc,status``, one row per track,
ordered by track id. The summary JSON carries median and quartiles per
variant plus the scoring policy and any model seed used.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .corpus import load_manifest, load_track
from .encoder import EncoderParams, encode, init_params
from .errors import DomainError, UndefinedAucError, ValidationError
from .frontend import PatchSequence
from .loss import LossConfig, weighted_bce
from .ssm import BinarySSM, ground_truth_ssm, render_ssm_pgm, similarity_matrix

VARIANTS = ("cqt", "convnet", "ssmnet")


@dataclass(frozen=True)
class TrackReport:
    track_id: str
    variant: str
    n_beats: int
    loss: float
    auc: float
    status: str = "ok"


def baseline_cqt_embed(patches) -> np.ndarray:
    """Flatten each 72x64 patch to 4608-d and L2-normalize the rows."""
    if isinstance(patches, PatchSequence):
        patches = patches.patches
    patches = np.asarray(patches, dtype=np.float64)
    flat = patches.reshape(patches.shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DomainError("all-zero patch cannot be normalized")
    return flat / norms


def roc_auc(gt: BinarySSM, est: np.ndarray) -> float:
    """Rank-based AUC over strict-upper-triangle pairs with midrank ties."""
    est = np.asarray(est)
    if est.shape != gt.values.shape:
        raise ValidationError(f"estimate {est.shape} does not match ground truth {gt.values.shape}")
    iu = np.triu_indices(gt.size, k=1)
    labels = gt.values[iu].astype(bool)
    scores = est[iu].astype(np.float64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError(
            f"AUC undefined: scored pairs contain {n_pos} positives and {n_neg} negatives"
        )
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def variant_embeddings(
    variant: str, patches: PatchSequence, params: EncoderParams | None = None
) -> np.ndarray:
    if variant == "cqt":
        return baseline_cqt_embed(patches)
    if variant in ("convnet", "ssmnet"):
        if params is None:
            raise ValidationError(f"variant {variant!r} requires encoder parameters")
        return encode(patches, params)
    raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")


def score_track(
    track_id: str,
    patches: PatchSequence,
    gt: BinarySSM,
    variant: str,
    params: EncoderParams | None = None,
    render_dir=None,
) -> TrackReport:
    emb = variant_embeddings(variant, patches, params)
    est = similarity_matrix(emb)
    value = weighted_bce(est, gt, LossConfig())
    auc = roc_auc(gt, est)
    if render_dir is not None:
        render_dir = Path(render_dir)
        render_dir.mkdir(parents=True, exist_ok=True)
        render_ssm_pgm(est, render_dir / f"{track_id}.pgm")
        render_ssm_pgm(gt.values.astype(np.float64), render_dir / f"{track_id}.gt.pgm")
    return TrackReport(
        track_id=track_id,
        variant=variant,
        n_beats=gt.size,
        loss=value.per_pair_mean,
        auc=auc,
    )


def evaluate_corpus(
    manifest_path,
    variant: str,
    *,
    params: EncoderParams | None = None,
    seed: int = 0,
    render_dir=None,
    jobs: int = 1,
) -> tuple[list[TrackReport], dict]:
    """Score every manifest track under one variant.

    Per-track failures become ``status=error`` rows and evaluation continues.
    Returns reports ordered by track id plus a summary with per-variant
    median/q1/q3 of loss and AUC.
    """
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "convnet":
        params = init_params(seed)
    if variant == "ssmnet" and params is None:
        raise ValidationError("variant 'ssmnet' requires a trained model")

    entries = sorted(load_manifest(manifest_path), key=lambda e: str(e["track_id"]))

    def one(entry) -> TrackReport:
        track_id = str(entry["track_id"])
        try:
            track = load_track(entry)
            return score_track(track_id, track.patches, track.gt, variant, params, render_dir)
        except Exception as exc:
            return TrackReport(
                track_id=track_id,
                variant=variant,
                n_beats=0,
                loss=float("nan"),
                auc=float("nan"),
                status=f"error: {exc}",
            )

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(one, entries))
    else:
        reports = [one(entry) for entry in entries]

    summary = summarize(reports)
    summary["scored_pairs"] = "strict-upper-triangle"
    if variant == "convnet":
        summary["model_seed"] = seed
    return reports, summary


def summarize(reports: list[TrackReport]) -> dict:
    """Median and quartiles of loss and AUC per variant over ok rows."""
    out: dict = {"variants": {}}
    for variant in sorted({r.variant for r in reports}):
        ok = [r for r in reports if r.variant == variant and r.status == "ok"]
        entry: dict = {"n_tracks": len(ok), "n_errors": sum(
            1 for r in reports if r.variant == variant and r.status != "ok"
        )}
        for metric in ("loss", "auc"):
            if ok:
                values = np.array([getattr(r, metric) for r in ok], dtype=np.float64)
                q1, med, q3 = np.percentile(values, [25, 50, 75])
                entry[metric] = {"q1": float(q1), "median": float(med), "q3": float(q3)}
            else:
                entry[metric] = None
        out["variants"][variant] = entry
    return out


def write_report_csv(reports: list[TrackReport], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["track_id", "variant", "T", "loss", "auc", "status"])
        for r in reports:
            writer.writerow([r.track_id, r.variant, r.n_beats, repr(r.loss), repr(r.auc), r.status])


def write_summary_json(summary: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
