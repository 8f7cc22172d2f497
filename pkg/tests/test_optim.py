"""MADGRAD updates, the training loop, early stopping and checkpoints."""

import numpy as np
import pytest

from conftest import make_corpus, make_track
from ssmlearn.encoder import params_to_bytes
from ssmlearn.errors import NumericalError, ValidationError
from ssmlearn.loss import LossConfig
from ssmlearn.optim import (
    OptimizerState,
    TrainConfig,
    TrainerCheckpoint,
    batch_gradients,
    checkpoint,
    madgrad_step,
    resume,
    split_corpus,
    train,
)

LOSS_CFG = LossConfig(normalize="mean")


def tiny_cfg(**kw):
    base = dict(
        learning_rate=5e-3,
        weight_decay=1e-2,
        batch_tracks=3,
        max_epochs=2,
        patience=10,
        validation_fraction=0.2,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


class TestMadgradStep:
    def test_zero_gradient_zero_decay_fixed_point_bit_exact(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(13,)).astype(np.float32)
        cfg = TrainConfig(learning_rate=5e-4, weight_decay=0.0)
        state = OptimizerState.fresh([p])
        (p2,) = madgrad_step([p], [np.zeros_like(p)], state, cfg)
        assert np.array_equal(p, p2)
        assert state.step == 1

    def test_quadratic_convergence(self):
        rng = np.random.default_rng(3)
        x_star = rng.normal(size=50)
        x = rng.normal(size=50)
        cfg = TrainConfig(learning_rate=0.1, weight_decay=0.0, momentum=0.9)
        state = OptimizerState.fresh([x])
        for _ in range(2000):
            (x,) = madgrad_step([x], [2.0 * (x - x_star)], state, cfg)
            if np.linalg.norm(x - x_star) < 1e-6:
                break
        assert np.linalg.norm(x - x_star) < 1e-6

    def test_deterministic_trajectories(self):
        def run():
            rng = np.random.default_rng(1)
            x = rng.normal(size=(4, 5)).astype(np.float32)
            cfg = TrainConfig(learning_rate=1e-2)
            state = OptimizerState.fresh([x])
            for k in range(20):
                g = np.sin(x + k).astype(np.float32)
                (x,) = madgrad_step([x], [g], state, cfg)
            return x

        assert np.array_equal(run(), run())

    def test_non_finite_gradient_aborts(self):
        p = np.zeros(3, dtype=np.float32)
        state = OptimizerState.fresh([p])
        bad = np.array([1.0, np.nan, 0.0], dtype=np.float32)
        with pytest.raises(NumericalError):
            madgrad_step([p], [bad], state, TrainConfig())

    def test_weight_decay_moves_parameters_without_gradient(self):
        p = np.ones(4, dtype=np.float32)
        state = OptimizerState.fresh([p])
        cfg = TrainConfig(learning_rate=1e-2, weight_decay=0.5)
        (p2,) = madgrad_step([p], [np.zeros_like(p)], state, cfg)
        assert np.all(p2 < p)  # decay pulls toward zero


class TestBatchGradients:
    def test_order_invariance(self):
        rng = np.random.default_rng(2)
        corpus = make_corpus(rng, n_tracks=3, n_beats=8)
        from ssmlearn.encoder import init_params

        params = init_params(0)
        batch = list(enumerate(corpus))
        loss_a, grads_a = batch_gradients(params, batch, LOSS_CFG)
        loss_b, grads_b = batch_gradients(params, batch[::-1], LOSS_CFG)
        assert loss_a == loss_b
        for ga, gb in zip(grads_a, grads_b):
            assert np.array_equal(ga, gb)


class TestSplit:
    def test_twelve_tracks_m6_gives_two_steps_per_epoch(self):
        rng = np.random.default_rng(4)
        corpus = make_corpus(rng, n_tracks=12, n_beats=6)
        cfg = tiny_cfg(batch_tracks=6, max_epochs=1, validation_fraction=0.1)
        split_rng = np.random.default_rng(cfg.seed)
        train_idx, val_idx = split_corpus(len(corpus), cfg, split_rng)
        assert len(val_idx) == 2  # ceil(0.1 * 12)
        assert len(train_idx) == 10  # batches of 6 + 4 -> 2 optimizer steps
        _, history = train(corpus, cfg, loss_cfg=LOSS_CFG)
        assert len(history.epochs) == 1

    def test_batch_larger_than_train_split_rejected(self):
        rng = np.random.default_rng(5)
        corpus = make_corpus(rng, n_tracks=4, n_beats=6)
        with pytest.raises(ValidationError, match="batch_tracks"):
            train(corpus, tiny_cfg(batch_tracks=10), loss_cfg=LOSS_CFG)

    def test_short_track_rejected_with_id(self):
        rng = np.random.default_rng(6)
        corpus = make_corpus(rng, n_tracks=3, n_beats=8)
        corpus.append(make_track(rng, track_id="runt", n_beats=4))
        with pytest.raises(ValidationError, match="runt"):
            train(corpus, tiny_cfg(), loss_cfg=LOSS_CFG)


class TestTraining:
    def test_two_runs_bit_identical(self):
        rng = np.random.default_rng(7)
        corpus = make_corpus(rng, n_tracks=5, n_beats=8)
        cfg = tiny_cfg(max_epochs=2)
        p1, h1 = train(corpus, cfg, loss_cfg=LOSS_CFG)
        p2, h2 = train(corpus, cfg, loss_cfg=LOSS_CFG)
        assert params_to_bytes(p1) == params_to_bytes(p2)
        assert [r.train_loss for r in h1.epochs] == [r.train_loss for r in h2.epochs]

    def test_returns_best_epoch_parameters(self):
        rng = np.random.default_rng(8)
        corpus = make_corpus(rng, n_tracks=5, n_beats=8)
        cfg = tiny_cfg(max_epochs=4)
        params, history = train(corpus, cfg, loss_cfg=LOSS_CFG)
        assert history.best_epoch == int(
            np.argmin([r.val_loss for r in history.epochs])
        )
        assert history.best_val_loss == min(r.val_loss for r in history.epochs)

    def test_patience_zero_stops_after_first_non_improving_epoch(self):
        rng = np.random.default_rng(9)
        corpus = make_corpus(rng, n_tracks=5, n_beats=8)
        # a huge learning rate destroys the encoder immediately, so validation
        # loss cannot keep improving
        cfg = tiny_cfg(learning_rate=50.0, max_epochs=20, patience=0)
        _, history = train(corpus, cfg, loss_cfg=LOSS_CFG)
        assert len(history.epochs) < 20
        val = [r.val_loss for r in history.epochs]
        # stopped exactly one epoch after the last improvement
        assert val[-1] >= min(val[:-1])
        assert history.best_epoch == int(np.argmin(val))


class TestCheckpoint:
    def test_resume_continues_trajectory_bit_exact(self, tmp_path):
        rng = np.random.default_rng(10)
        corpus = make_corpus(rng, n_tracks=5, n_beats=8)

        straight_params, straight_hist = train(
            corpus, tiny_cfg(max_epochs=3), loss_cfg=LOSS_CFG
        )

        ck_path = tmp_path / "trainer.ssmc"
        train(corpus, tiny_cfg(max_epochs=1), loss_cfg=LOSS_CFG, checkpoint_path=ck_path)
        ck = resume(ck_path)
        resumed_params, resumed_hist = train(
            corpus, tiny_cfg(max_epochs=3), loss_cfg=LOSS_CFG, resume_from=ck
        )

        assert params_to_bytes(resumed_params) == params_to_bytes(straight_params)
        assert [r.val_loss for r in resumed_hist.epochs] == [
            r.val_loss for r in straight_hist.epochs
        ]

    def test_checkpoint_roundtrip_bytes_identical(self, tmp_path):
        rng = np.random.default_rng(11)
        corpus = make_corpus(rng, n_tracks=4, n_beats=8)
        ck_path = tmp_path / "trainer.ssmc"
        train(corpus, tiny_cfg(max_epochs=1, batch_tracks=2), loss_cfg=LOSS_CFG, checkpoint_path=ck_path)
        ck = resume(ck_path)
        rewritten = tmp_path / "rewritten.ssmc"
        checkpoint(ck, rewritten)
        assert ck_path.read_bytes() == rewritten.read_bytes()

    def test_resume_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            resume(tmp_path / "missing.ssmc")

    def test_resume_with_different_lr_recorded_in_history(self, tmp_path):
        rng = np.random.default_rng(12)
        corpus = make_corpus(rng, n_tracks=4, n_beats=8)
        ck_path = tmp_path / "trainer.ssmc"
        train(
            corpus,
            tiny_cfg(max_epochs=1, batch_tracks=2, learning_rate=1e-3),
            loss_cfg=LOSS_CFG,
            checkpoint_path=ck_path,
        )
        ck = resume(ck_path)
        _, history = train(
            corpus,
            tiny_cfg(max_epochs=2, batch_tracks=2, learning_rate=9e-3),
            loss_cfg=LOSS_CFG,
            resume_from=ck,
        )
        assert history.epochs[0].learning_rate == pytest.approx(1e-3)
        assert history.epochs[1].learning_rate == pytest.approx(9e-3)
        assert history.epochs[1].epoch == 1  # epoch numbering continues

    def test_resume_rejects_missing_tracks(self, tmp_path):
        rng = np.random.default_rng(13)
        corpus = make_corpus(rng, n_tracks=4, n_beats=8)
        ck_path = tmp_path / "trainer.ssmc"
        train(corpus, tiny_cfg(max_epochs=1, batch_tracks=2), loss_cfg=LOSS_CFG, checkpoint_path=ck_path)
        ck = resume(ck_path)
        with pytest.raises(ValidationError, match="missing"):
            train(corpus[:2], tiny_cfg(batch_tracks=2), loss_cfg=LOSS_CFG, resume_from=ck)
