"""Encoder: initialization, forward contract, parameter serialization."""

import numpy as np
import pytest

from ssmlearn import diffcore as dc
from ssmlearn.encoder import (
    POOL_KERNELS,
    EncoderParams,
    encode,
    init_params,
    load_params,
    param_count,
    params_as_tensors,
    save_params,
)
from ssmlearn.errors import CorruptionError, FormatError, ShapeError, VersionError

PINNED_PARAM_COUNT = 378400  # (32, 64, 128) plan: conv + bias + norm affine + FC


class TestInitParams:
    def test_same_seed_bit_identical(self):
        a, b = init_params(123), init_params(123)
        for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays()):
            assert np.array_equal(x, y)

    def test_different_seeds_differ(self):
        a, b = init_params(0), init_params(1)
        assert any(
            not np.array_equal(x, y)
            for (_, x), (_, y) in zip(a.named_arrays(), b.named_arrays())
        )

    def test_gamma_ones_beta_zero_bias_zero(self):
        p = init_params(5)
        for g in p.gn_gamma:
            assert np.all(g == 1.0)
        for b in p.gn_beta + p.conv_b + [p.fc_b]:
            assert np.all(b == 0.0)

    def test_param_count_pinned(self):
        p = init_params(0)
        assert p.param_count() == PINNED_PARAM_COUNT
        assert param_count() == PINNED_PARAM_COUNT

    def test_float32_storage(self):
        p = init_params(0)
        assert all(a.dtype == np.float32 for a in p.arrays())


class TestEncode:
    def test_output_shape_and_unit_norm(self):
        rng = np.random.default_rng(0)
        patches = rng.uniform(size=(5, 72, 64)).astype(np.float32)
        emb = encode(patches, init_params(0))
        assert emb.shape == (5, 128)
        assert np.abs(np.linalg.norm(emb, axis=1) - 1.0).max() < 1e-5

    def test_identical_patches_identical_embeddings(self):
        rng = np.random.default_rng(1)
        one = rng.uniform(size=(72, 64)).astype(np.float32)
        patches = np.stack([one] * 6)
        emb = encode(patches, init_params(2))
        for i in range(1, 6):
            assert np.array_equal(emb[0], emb[i])

    def test_shape_ladder(self):
        # run the blocks stage by stage and assert the documented spatial sizes
        rng = np.random.default_rng(2)
        params = init_params(3)
        tensors = params_as_tensors(params, requires_grad=False)
        x = dc.Tensor(rng.uniform(size=(2, 1, 72, 64)).astype(np.float32))
        expected = [(36, 16), (12, 4), (4, 2)]
        for i in range(3):
            x = dc.conv2d(x, tensors[f"conv{i + 1}_w"], tensors[f"conv{i + 1}_b"])
            x = dc.selu(x)
            c = x.data.shape[1]
            x = dc.group_norm(
                x, tensors[f"gn{i + 1}_gamma"], tensors[f"gn{i + 1}_beta"], n_groups=min(32, c)
            )
            x = dc.max_pool2d(x, POOL_KERNELS[i])
            assert x.data.shape[2:] == expected[i]
        assert x.data.shape[1] * x.data.shape[2] * x.data.shape[3] == 1024

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        patches = rng.uniform(size=(7, 72, 64)).astype(np.float32)
        params = init_params(4)
        emb = encode(patches, params)
        perm = rng.permutation(7)
        emb_perm = encode(patches[perm], params)
        assert np.array_equal(emb_perm, emb[perm])

    def test_chunked_encoding_matches_full(self):
        # different GEMM batch shapes may round differently in the last bits
        rng = np.random.default_rng(4)
        patches = rng.uniform(size=(9, 72, 64)).astype(np.float32)
        params = init_params(5)
        np.testing.assert_allclose(
            encode(patches, params, chunk=3), encode(patches, params, chunk=64), atol=1e-6
        )

    def test_wrong_patch_shape(self):
        with pytest.raises(ShapeError):
            encode(np.zeros((4, 72, 63), dtype=np.float32), init_params(0))

    def test_accepts_patch_sequence(self):
        from ssmlearn.frontend import PatchSequence

        rng = np.random.default_rng(5)
        pseq = PatchSequence(
            patches=rng.uniform(size=(5, 72, 64)).astype(np.float32),
            beat_times=np.arange(5.0),
        )
        assert encode(pseq, init_params(0)).shape == (5, 128)


class TestModelFile:
    def test_roundtrip_bit_exact(self, tmp_path):
        params = init_params(42)
        path = tmp_path / "model.ssmn"
        save_params(params, path)
        back = load_params(path)
        assert back.channels == params.channels
        assert back.seed == 42
        for (_, x), (_, y) in zip(params.named_arrays(), back.named_arrays()):
            assert np.array_equal(x, y)

    def test_file_bytes_deterministic(self, tmp_path):
        p1, p2 = tmp_path / "a.ssmn", tmp_path / "b.ssmn"
        save_params(init_params(7), p1)
        save_params(init_params(7), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ssmn"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_params(path)

    def test_version_error(self, tmp_path):
        path = tmp_path / "m.ssmn"
        save_params(init_params(0), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 99  # version field
        path.write_bytes(bytes(blob))
        with pytest.raises(VersionError):
            load_params(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "m.ssmn"
        save_params(init_params(0), path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(CorruptionError):
            load_params(path)

    def test_payload_corruption_detected_by_checksum(self, tmp_path):
        path = tmp_path / "m.ssmn"
        save_params(init_params(0), path)
        blob = bytearray(path.read_bytes())
        blob[-5] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError, match="checksum"):
            load_params(path)
