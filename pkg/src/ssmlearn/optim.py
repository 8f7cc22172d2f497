"""MADGRAD optimization, full-track mini-batching, early stopping, checkpoints.

The optimizer follows the published momentumized dual-averaging rule: weighted
sums of gradients and squared gradients with weight ``(lr + eps) * sqrt(k+1)``,
a cube-root denominator, and an iterate interpolated between the dual-averaged
point and the previous parameters. Weight decay is gradient-coupled
(``g + wd * theta``), matching the optimizer's reference implementation.

Batches are whole tracks; the batch loss is the mean over tracks of each
track's per-pair mean loss, so long tracks do not dominate. Gradient
accumulation runs in corpus-index order for determinism.

Checkpoint file (SSMC): magic ``SSMC``, u32-LE version=1, then length-prefixed
sections: current model (SSMN bytes), best model (SSMN bytes), optimizer
accumulators (float32-LE: grad-sum, squared-grad-sum, initial snapshot per
parameter in canonical order), and a JSON trailer holding history, counters,
the train/validation split and the shuffle RNG state.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .encoder import (
    EncoderParams,
    encode,
    encode_tracked,
    init_params,
    params_as_tensors,
    params_from_bytes,
    params_to_bytes,
)
from .errors import CorruptionError, FormatError, NumericalError, ValidationError, VersionError
from .frontend import PatchSequence
from .loss import LossConfig, weighted_bce, weighted_bce_tracked
from .ssm import BinarySSM, similarity_matrix, similarity_tracked

SSMC_MAGIC = b"SSMC"
SSMC_VERSION = 1

MADGRAD_EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    weight_decay: float = 1e-2
    batch_tracks: int = 6
    momentum: float = 0.9
    max_epochs: int = 100
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValidationError("learning_rate must be positive and weight_decay non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_tracks < 1 or self.max_epochs < 1:
            raise ValidationError("batch_tracks and max_epochs must be at least 1")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValidationError(
                f"validation_fraction must lie in (0, 0.5), got {self.validation_fraction}"
            )
        if self.patience < 0:
            raise ValidationError("patience must be non-negative")

    def to_jsonable(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "batch_tracks": self.batch_tracks,
            "momentum": self.momentum,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "validation_fraction": self.validation_fraction,
            "seed": self.seed,
        }


@dataclass
class OptimizerState:
    """Dual-averaging accumulators; ``x0`` is the initial parameter snapshot."""

    grad_sum: list[np.ndarray]
    grad_sq_sum: list[np.ndarray]
    x0: list[np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: list[np.ndarray]) -> "OptimizerState":
        return cls(
            grad_sum=[np.zeros_like(p) for p in params],
            grad_sq_sum=[np.zeros_like(p) for p in params],
            x0=[p.copy() for p in params],
            step=0,
        )


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float
    learning_rate: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def to_jsonable(self) -> dict:
        return {
            "epochs": [
                {
                    "epoch": r.epoch,
                    "train_loss": r.train_loss,
                    "val_loss": r.val_loss,
                    "wall_time": r.wall_time,
                    "learning_rate": r.learning_rate,
                }
                for r in self.epochs
            ],
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
        }

    @classmethod
    def from_jsonable(cls, data: dict) -> "TrainHistory":
        hist = cls(best_epoch=data["best_epoch"], best_val_loss=data["best_val_loss"])
        hist.epochs = [EpochRecord(**r) for r in data["epochs"]]
        return hist


@dataclass(frozen=True)
class TrainTrack:
    track_id: str
    patches: PatchSequence
    gt: BinarySSM


def madgrad_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: OptimizerState,
    cfg: TrainConfig,
) -> list[np.ndarray]:
    """One MADGRAD update; returns new parameter arrays and advances ``state``.

    From a fresh state, a zero gradient with zero weight decay leaves
    parameters bit-identical.
    """
    if len(params) != len(grads) or len(params) != len(state.grad_sum):
        raise ValidationError("parameter/gradient/state length mismatch")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {i}; aborting optimizer step")

    lamb = (cfg.learning_rate + MADGRAD_EPS) * math.sqrt(state.step + 1.0)
    ck = 1.0 - cfg.momentum
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if cfg.weight_decay != 0.0:
            g = g + cfg.weight_decay * p
        state.grad_sq_sum[i] = state.grad_sq_sum[i] + lamb * g * g
        state.grad_sum[i] = state.grad_sum[i] + lamb * g
        sigma = np.cbrt(state.grad_sq_sum[i]) + p.dtype.type(MADGRAD_EPS)
        z = state.x0[i] - state.grad_sum[i] / sigma
        out.append((p + ck * (z - p)).astype(p.dtype, copy=False))
    state.step += 1
    return out


def track_loss_and_grads(
    params: EncoderParams, track: TrainTrack, loss_cfg: LossConfig
) -> tuple[float, list[np.ndarray]]:
    """Objective value for one track and its parameter gradients."""
    tensors = params_as_tensors(params, requires_grad=True)
    emb = encode_tracked(tensors, track.patches.patches.astype(np.float32, copy=False))
    est = similarity_tracked(emb)
    objective = weighted_bce_tracked(est, track.gt, loss_cfg)
    objective.backward()
    names = [n for n, _ in params.named_arrays()]
    grads = [
        tensors[n].grad if tensors[n].grad is not None else np.zeros_like(tensors[n].data)
        for n in names
    ]
    return float(objective.data), grads


def track_loss(params: EncoderParams, track: TrainTrack, loss_cfg: LossConfig) -> float:
    emb = encode(track.patches, params)
    value = weighted_bce(similarity_matrix(emb), track.gt, loss_cfg)
    return value.objective(loss_cfg)


def batch_gradients(
    params: EncoderParams, batch: list[tuple[int, TrainTrack]], loss_cfg: LossConfig
) -> tuple[float, list[np.ndarray]]:
    """Mean per-track objective and gradients over a batch of (corpus_index, track).

    Accumulation runs in ascending corpus-index order regardless of the input
    ordering, so batch results do not depend on shuffle details.
    """
    n = len(batch)
    acc = None
    total = 0.0
    for _, track in sorted(batch, key=lambda item: item[0]):
        value, grads = track_loss_and_grads(params, track, loss_cfg)
        total += value / n
        if acc is None:
            acc = [g / n for g in grads]
        else:
            for i, g in enumerate(grads):
                acc[i] = acc[i] + g / n
    return total, acc


@dataclass
class TrainerCheckpoint:
    params: EncoderParams
    best_params: EncoderParams
    opt_state: OptimizerState
    history: TrainHistory
    config: TrainConfig
    next_epoch: int
    epochs_since_improvement: int
    rng_state: dict
    train_ids: list[str]  # training tracks in split order
    val_ids: list[str]


def _validate_corpus(corpus: list[TrainTrack]) -> None:
    if len(corpus) < 2:
        raise ValidationError(f"need at least 2 tracks to train, got {len(corpus)}")
    bad = [t.track_id for t in corpus if len(t.patches) < 5]
    if bad:
        raise ValidationError(f"tracks too short to train on (T < 5): {', '.join(bad)}")
    for t in corpus:
        if t.gt.size != len(t.patches):
            raise ValidationError(
                f"track {t.track_id}: ground truth size {t.gt.size} != patch count {len(t.patches)}"
            )
    ids = [t.track_id for t in corpus]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate track ids in corpus")


def split_corpus(n_tracks: int, cfg: TrainConfig, rng: np.random.Generator):
    """Seeded shuffle; the last ceil(fraction * N) tracks become validation."""
    order = rng.permutation(n_tracks)
    n_val = int(np.ceil(cfg.validation_fraction * n_tracks))
    train_idx = [int(i) for i in order[: n_tracks - n_val]]
    val_idx = [int(i) for i in order[n_tracks - n_val :]]
    return train_idx, val_idx


def train(
    corpus: list[TrainTrack],
    cfg: TrainConfig,
    *,
    loss_cfg: LossConfig = LossConfig(normalize="mean"),
    initial_params: EncoderParams | None = None,
    checkpoint_path=None,
    resume_from: TrainerCheckpoint | None = None,
    log=None,
) -> tuple[EncoderParams, TrainHistory]:
    """Train the encoder on full-track batches with early stopping.

    Per epoch: shuffle the training tracks, form batches of ``batch_tracks``
    whole tracks (the final batch may be smaller), take one optimizer step per
    batch, then score the validation split. Training stops once validation
    loss has not improved for ``patience`` epochs (patience 0 stops at the
    first non-improving epoch) and returns the parameters of the best epoch.
    """
    _validate_corpus(corpus)
    index_of = {t.track_id: i for i, t in enumerate(corpus)}

    if resume_from is not None:
        ck = resume_from
        missing = (set(ck.train_ids) | set(ck.val_ids)) - set(index_of)
        if missing:
            raise ValidationError(f"resumed split references missing tracks: {sorted(missing)}")
        params = ck.params
        if initial_params is not None and initial_params.channels != params.channels:
            raise ValidationError("resumed channel plan conflicts with requested parameters")
        best_params = ck.best_params
        state = ck.opt_state
        history = ck.history
        start_epoch = ck.next_epoch
        since_best = ck.epochs_since_improvement
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        train_ids = list(ck.train_ids)
        val_ids = list(ck.val_ids)
    else:
        rng = np.random.default_rng(cfg.seed)
        train_idx, val_idx = split_corpus(len(corpus), cfg, rng)
        train_ids = [corpus[i].track_id for i in train_idx]
        val_ids = [corpus[i].track_id for i in val_idx]
        params = initial_params.copy() if initial_params is not None else init_params(cfg.seed)
        best_params = params.copy()
        state = OptimizerState.fresh(params.arrays())
        history = TrainHistory()
        start_epoch = 0
        since_best = 0

    train_pairs = [(index_of[tid], corpus[index_of[tid]]) for tid in train_ids]
    val_tracks = [corpus[index_of[tid]] for tid in val_ids]
    if cfg.batch_tracks > len(train_pairs):
        raise ValidationError(
            f"batch_tracks={cfg.batch_tracks} exceeds training split of {len(train_pairs)} tracks"
        )

    m = cfg.batch_tracks
    for epoch in range(start_epoch, cfg.max_epochs):
        t_start = time.perf_counter()
        perm = rng.permutation(len(train_pairs))
        epoch_losses = []
        for b in range(0, len(perm), m):
            batch = [train_pairs[int(j)] for j in perm[b : b + m]]
            batch_loss, grads = batch_gradients(params, batch, loss_cfg)
            params.set_arrays(madgrad_step(params.arrays(), grads, state, cfg))
            epoch_losses.append(batch_loss)
        train_loss = float(np.mean(epoch_losses))
        val_loss = float(np.mean([track_loss(params, t, loss_cfg) for t in val_tracks]))
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            val_loss=val_loss,
            wall_time=time.perf_counter() - t_start,
            learning_rate=cfg.learning_rate,
        )
        history.epochs.append(record)
        if log is not None:
            log(record)

        if val_loss < history.best_val_loss:
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = params.copy()
            since_best = 0
        else:
            since_best += 1

        if checkpoint_path is not None:
            checkpoint(
                TrainerCheckpoint(
                    params=params,
                    best_params=best_params,
                    opt_state=state,
                    history=history,
                    config=cfg,
                    next_epoch=epoch + 1,
                    epochs_since_improvement=since_best,
                    rng_state=rng.bit_generator.state,
                    train_ids=train_ids,
                    val_ids=val_ids,
                ),
                checkpoint_path,
            )

        if since_best >= max(1, cfg.patience):
            break

    return best_params, history


def _pack_section(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def checkpoint(ck: TrainerCheckpoint, path) -> None:
    """Serialize the full trainer state; resumed runs replay the trajectory exactly."""
    acc_payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes(order="C")
        for group in (ck.opt_state.grad_sum, ck.opt_state.grad_sq_sum, ck.opt_state.x0)
        for a in group
    )
    trailer = {
        "config": ck.config.to_jsonable(),
        "history": ck.history.to_jsonable(),
        "next_epoch": ck.next_epoch,
        "epochs_since_improvement": ck.epochs_since_improvement,
        "optimizer_step": ck.opt_state.step,
        "rng_state": ck.rng_state,
        "train_ids": ck.train_ids,
        "val_ids": ck.val_ids,
    }
    trailer_bytes = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SSMC_MAGIC)
        fh.write(struct.pack("<I", SSMC_VERSION))
        fh.write(_pack_section(params_to_bytes(ck.params)))
        fh.write(_pack_section(params_to_bytes(ck.best_params)))
        fh.write(_pack_section(acc_payload))
        fh.write(_pack_section(trailer_bytes))


def resume(path) -> TrainerCheckpoint:
    """Load a trainer checkpoint written by :func:`checkpoint`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[0:4] != SSMC_MAGIC:
        raise FormatError(f"{path}: bad SSMC magic")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != SSMC_VERSION:
        raise VersionError(f"{path}: unsupported SSMC version {version}")

    sections = []
    pos = 8
    for _ in range(4):
        if pos + 4 > len(blob):
            raise CorruptionError(f"{path}: truncated checkpoint")
        (length,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + length > len(blob):
            raise CorruptionError(f"{path}: truncated checkpoint section")
        sections.append(blob[pos : pos + length])
        pos += length

    params = params_from_bytes(sections[0], source=f"{path}[model]")
    best_params = params_from_bytes(sections[1], source=f"{path}[best]")
    trailer = json.loads(sections[3].decode("utf-8"))

    shapes = [a.shape for a in params.arrays()]
    sizes = [int(np.prod(s)) for s in shapes]
    total = sum(sizes)
    acc = np.frombuffer(sections[2], dtype="<f4")
    if acc.size != 3 * total:
        raise CorruptionError(f"{path}: optimizer accumulator payload length mismatch")

    def unpack_group(offset: int) -> list[np.ndarray]:
        out, cursor = [], offset
        for shape, size in zip(shapes, sizes):
            out.append(acc[cursor : cursor + size].reshape(shape).astype(np.float32))
            cursor += size
        return out

    state = OptimizerState(
        grad_sum=unpack_group(0),
        grad_sq_sum=unpack_group(total),
        x0=unpack_group(2 * total),
        step=int(trailer["optimizer_step"]),
    )
    return TrainerCheckpoint(
        params=params,
        best_params=best_params,
        opt_state=state,
        history=TrainHistory.from_jsonable(trailer["history"]),
        config=TrainConfig(**trailer["config"]),
        next_epoch=int(trailer["next_epoch"]),
        epochs_since_improvement=int(trailer["epochs_since_improvement"]),
        rng_state=trailer["rng_state"],
        train_ids=list(trailer["train_ids"]),
        val_ids=list(trailer["val_ids"]),
    )
