"""The patch encoder: three conv blocks plus a fully connected projection.

Each 72x64 patch passes through three blocks of [conv (6x4, same padding) ->
SELU -> group norm -> max pool] with pool kernels (2,4), (3,4), (3,2), giving
the spatial ladder 72x64 -> 36x16 -> 12x4 -> 4x2. The 4*2*128 = 1024
activations feed a single 128-unit fully connected layer with SELU, and the
output is L2-normalized onto the unit sphere.

Model file (SSMN): magic ``SSMN``, u32-LE version=1, u32 JSON header length,
JSON header (channel plan, seed, payload CRC32, parameter order/shapes), then
all parameters as float32-LE in header order.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import CorruptionError, FormatError, ShapeError, VersionError
from .frontend import PatchSequence

SSMN_MAGIC = b"SSMN"
SSMN_VERSION = 1

DEFAULT_CHANNELS = (32, 64, 128)
POOL_KERNELS = ((2, 4), (3, 4), (3, 2))
CONV_KERNEL = (6, 4)
EMBED_DIM = 128
INPUT_SHAPE = (72, 64)
GROUP_NORM_MAX_GROUPS = 32

_CONV_PLAN = tuple(f"conv{i}" for i in (1, 2, 3))


@dataclass
class EncoderParams:
    """Trainable parameter set; arrays are float32 and owned by the trainer."""

    conv_w: list[np.ndarray]  # (c_out, c_in, 6, 4) per block
    conv_b: list[np.ndarray]
    gn_gamma: list[np.ndarray]
    gn_beta: list[np.ndarray]
    fc_w: np.ndarray  # (128, 8 * c3)
    fc_b: np.ndarray
    channels: tuple[int, int, int] = DEFAULT_CHANNELS
    seed: int | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, array) order used for serialization and optimizer state."""
        out = []
        for i in range(3):
            out.append((f"conv{i + 1}_w", self.conv_w[i]))
            out.append((f"conv{i + 1}_b", self.conv_b[i]))
            out.append((f"gn{i + 1}_gamma", self.gn_gamma[i]))
            out.append((f"gn{i + 1}_beta", self.gn_beta[i]))
        out.append(("fc_w", self.fc_w))
        out.append(("fc_b", self.fc_b))
        return out

    def arrays(self) -> list[np.ndarray]:
        return [a for _, a in self.named_arrays()]

    def set_arrays(self, arrays: list[np.ndarray]) -> None:
        names = [n for n, _ in self.named_arrays()]
        if len(arrays) != len(names):
            raise ShapeError("parameter list length mismatch")
        by_name = dict(zip(names, arrays))
        self.conv_w = [by_name[f"conv{i}_w"] for i in (1, 2, 3)]
        self.conv_b = [by_name[f"conv{i}_b"] for i in (1, 2, 3)]
        self.gn_gamma = [by_name[f"gn{i}_gamma"] for i in (1, 2, 3)]
        self.gn_beta = [by_name[f"gn{i}_beta"] for i in (1, 2, 3)]
        self.fc_w = by_name["fc_w"]
        self.fc_b = by_name["fc_b"]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            conv_w=[a.copy() for a in self.conv_w],
            conv_b=[a.copy() for a in self.conv_b],
            gn_gamma=[a.copy() for a in self.gn_gamma],
            gn_beta=[a.copy() for a in self.gn_beta],
            fc_w=self.fc_w.copy(),
            fc_b=self.fc_b.copy(),
            channels=self.channels,
            seed=self.seed,
        )

    def param_count(self) -> int:
        return int(sum(a.size for a in self.arrays()))


def flat_dim(channels=DEFAULT_CHANNELS) -> int:
    h, w = INPUT_SHAPE
    for kh, kw in POOL_KERNELS:
        h, w = h // kh, w // kw
    return h * w * channels[2]


def param_count(channels=DEFAULT_CHANNELS) -> int:
    """Parameter count for a channel plan (conv, bias, affine norms, FC)."""
    kh, kw = CONV_KERNEL
    total = 0
    c_in = 1
    for c in channels:
        total += c * c_in * kh * kw + c  # conv weights + bias
        total += 2 * c  # group-norm gamma/beta
        c_in = c
    total += EMBED_DIM * flat_dim(channels) + EMBED_DIM
    return total


def init_params(seed: int, channels=DEFAULT_CHANNELS) -> EncoderParams:
    """Deterministic initialization: fan-in scaled normal weights, zero biases.

    Conv and FC weights draw from N(0, 2/fan_in); group-norm affine starts at
    gamma=1, beta=0. The same seed always yields bit-identical parameters.
    """
    rng = np.random.default_rng(seed)
    kh, kw = CONV_KERNEL
    conv_w, conv_b, gn_gamma, gn_beta = [], [], [], []
    c_in = 1
    for c in channels:
        fan_in = c_in * kh * kw
        conv_w.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, c_in, kh, kw)).astype(np.float32))
        conv_b.append(np.zeros(c, dtype=np.float32))
        gn_gamma.append(np.ones(c, dtype=np.float32))
        gn_beta.append(np.zeros(c, dtype=np.float32))
        c_in = c
    n_flat = flat_dim(channels)
    fc_w = rng.normal(0.0, np.sqrt(2.0 / n_flat), size=(EMBED_DIM, n_flat)).astype(np.float32)
    fc_b = np.zeros(EMBED_DIM, dtype=np.float32)
    return EncoderParams(conv_w, conv_b, gn_gamma, gn_beta, fc_w, fc_b, tuple(channels), seed)


def _check_patches(patches: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    if patches.ndim != 3 or patches.shape[1:] != INPUT_SHAPE:
        raise ShapeError(f"expected (T, 72, 64) patches, got {patches.shape}")
    return patches


def encode_tracked(params_t: dict, patches: np.ndarray) -> dc.Tensor:
    """Run the encoder on a (T, 72, 64) stack under the gradient tape.

    ``params_t`` maps canonical parameter names to Tensors (see
    ``EncoderParams.named_arrays``). Returns a (T, 128) Tensor of unit rows.
    """
    patches = _check_patches(patches)
    x = dc.Tensor(patches[:, None, :, :])
    for i, name in enumerate(_CONV_PLAN):
        x = dc.conv2d(x, params_t[f"{name}_w"], params_t[f"{name}_b"])
        x = dc.selu(x)
        c = params_t[f"{name}_w"].data.shape[0]
        x = dc.group_norm(
            x, params_t[f"gn{i + 1}_gamma"], params_t[f"gn{i + 1}_beta"],
            n_groups=min(GROUP_NORM_MAX_GROUPS, c),
        )
        x = dc.max_pool2d(x, POOL_KERNELS[i])
    x = dc.reshape(x, (patches.shape[0], -1))
    x = dc.linear(x, params_t["fc_w"], params_t["fc_b"])
    x = dc.selu(x)
    return dc.l2_normalize(x)


def params_as_tensors(params: EncoderParams, requires_grad: bool = True) -> dict:
    return {
        name: dc.Tensor(array, requires_grad=requires_grad)
        for name, array in params.named_arrays()
    }


def encode(patches, params: EncoderParams, chunk: int = 64) -> np.ndarray:
    """Encode patches to unit-norm 128-d embeddings (inference path).

    Accepts a PatchSequence or a (T, 72, 64) array; processes ``chunk``
    patches at a time to bound the working set.
    """
    if isinstance(patches, PatchSequence):
        patches = patches.patches
    patches = _check_patches(patches).astype(np.float32, copy=False)
    tensors = params_as_tensors(params, requires_grad=False)
    parts = [
        encode_tracked(tensors, patches[i : i + chunk]).data
        for i in range(0, patches.shape[0], chunk)
    ]
    return np.concatenate(parts, axis=0)


def params_to_bytes(params: EncoderParams) -> bytes:
    """Serialize parameters to SSMN bytes; deterministic for identical parameters."""
    named = params.named_arrays()
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes(order="C") for _, a in named)
    header = {
        "format": "SSMN",
        "version": SSMN_VERSION,
        "channels": list(params.channels),
        "seed": params.seed,
        "dtype": "float32",
        "param_order": [n for n, _ in named],
        "shapes": {n: list(a.shape) for n, a in named},
        "payload_crc32": zlib.crc32(payload) & 0xFFFFFFFF,
        "created_by": "ssmlearn-0.1",
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return SSMN_MAGIC + struct.pack("<II", SSMN_VERSION, len(header_bytes)) + header_bytes + payload


def save_params(params: EncoderParams, path) -> None:
    """Write an SSMN model file; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def params_from_bytes(blob: bytes, source: str = "<bytes>") -> EncoderParams:
    path = source
    if len(blob) < 12 or blob[0:4] != SSMN_MAGIC:
        raise FormatError(f"{path}: bad SSMN magic")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != SSMN_VERSION:
        raise VersionError(f"{path}: unsupported SSMN version {version}")
    if len(blob) < 12 + header_len:
        raise CorruptionError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable header") from exc
    payload = blob[12 + header_len :]
    expected = sum(int(np.prod(header["shapes"][n])) for n in header["param_order"]) * 4
    if len(payload) != expected:
        raise CorruptionError(f"{path}: payload holds {len(payload)} bytes, expected {expected}")
    if (zlib.crc32(payload) & 0xFFFFFFFF) != header["payload_crc32"]:
        raise CorruptionError(f"{path}: payload checksum mismatch")

    arrays = {}
    offset = 0
    for name in header["param_order"]:
        shape = tuple(header["shapes"][name])
        count = int(np.prod(shape))
        arrays[name] = (
            np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float32)
        )
        offset += count * 4
    channels = tuple(header["channels"])
    params = EncoderParams(
        conv_w=[arrays[f"conv{i}_w"] for i in (1, 2, 3)],
        conv_b=[arrays[f"conv{i}_b"] for i in (1, 2, 3)],
        gn_gamma=[arrays[f"gn{i}_gamma"] for i in (1, 2, 3)],
        gn_beta=[arrays[f"gn{i}_beta"] for i in (1, 2, 3)],
        fc_w=arrays["fc_w"],
        fc_b=arrays["fc_b"],
        channels=channels,
        seed=header.get("seed"),
    )
    return params


def load_params(path) -> EncoderParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    return params_from_bytes(blob, source=str(path))
