"""The 9-block separable-conv CNN: construction, forward/backward,
serialization ("SFM1" files) and feature introspection.

Per-sample path: (sepconv -> batchnorm -> ReLU) x 9, global average pool,
dense -> ReLU -> dropout, dense to one unit, sigmoid. The decision rule is
probability >= threshold for the positive class.
"""

from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import layers
from .errors import ConfigError, FormatError, NumericError, ShapeError
from .layers import BatchNormParams, DenseParams, SepConvParams
from .rng import TAG_INIT, TAG_MAXIMIZE, SplitMixStream
from .tensor import _decode_array, _encode_array, _validate_dims

MODEL_MAGIC = b"SFM1"
MODEL_VERSION = 1

DEFAULT_CHANNEL_PLAN = (8, 8, 16, 16, 32, 32, 64, 64, 128)
DEFAULT_STRIDE_PLAN = (1, 2, 1, 2, 1, 2, 1, 2, 1)
N_BLOCKS = 9


@dataclass
class ModelConfig:
    input_height: int
    input_width: int
    input_channels: int = 1
    channel_plan: tuple = DEFAULT_CHANNEL_PLAN
    stride_plan: tuple = DEFAULT_STRIDE_PLAN
    kernel: int = 3
    hidden_units: int = 64
    dropout_rate: float = 0.5
    threshold: float = 0.5

    def __post_init__(self):
        self.channel_plan = tuple(int(c) for c in self.channel_plan)
        self.stride_plan = tuple(int(s) for s in self.stride_plan)
        if len(self.channel_plan) != N_BLOCKS:
            raise ConfigError(f"channel_plan must have {N_BLOCKS} entries, got {len(self.channel_plan)}")
        if len(self.stride_plan) != N_BLOCKS:
            raise ConfigError(f"stride_plan must have {N_BLOCKS} entries, got {len(self.stride_plan)}")
        if any(c < 1 for c in self.channel_plan):
            raise ConfigError("channel_plan entries must be positive")
        if any(s not in (1, 2) for s in self.stride_plan):
            raise ConfigError("stride_plan entries must be 1 or 2")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and positive, got {self.kernel}")
        if min(self.input_height, self.input_width, self.input_channels, self.hidden_units) < 1:
            raise ConfigError("input dims, channels and hidden_units must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0,1), got {self.dropout_rate}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0,1), got {self.threshold}")
        h, w = self.spatial_dims()[-1]
        if h < 1 or w < 1:
            raise ConfigError(f"stride plan collapses the spatial dims to {h}x{w}")

    def spatial_dims(self):
        """Spatial size after each block under "same" padding."""
        h, w = self.input_height, self.input_width
        dims = []
        for s in self.stride_plan:
            h = (h + s - 1) // s
            w = (w + s - 1) // s
            dims.append((h, w))
        return dims

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["channel_plan"] = list(self.channel_plan)
        d["stride_plan"] = list(self.stride_plan)
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class Block:
    conv: SepConvParams
    norm: BatchNormParams


@dataclass
class Model:
    config: ModelConfig
    blocks: list
    hidden: DenseParams
    output: DenseParams

    def named_parameters(self):
        """Trainable parameter arrays in fixed traversal order."""
        out = []
        for b, blk in enumerate(self.blocks):
            out.append((f"block{b}.depthwise", blk.conv.depthwise))
            out.append((f"block{b}.pointwise", blk.conv.pointwise))
            out.append((f"block{b}.bias", blk.conv.bias))
            out.append((f"block{b}.gamma", blk.norm.gamma))
            out.append((f"block{b}.beta", blk.norm.beta))
        out.append(("hidden.weight", self.hidden.weight))
        out.append(("hidden.bias", self.hidden.bias))
        out.append(("output.weight", self.output.weight))
        out.append(("output.bias", self.output.bias))
        return out

    def state_arrays(self):
        """All persisted arrays (trainable plus running stats), fixed order."""
        out = []
        for b, blk in enumerate(self.blocks):
            out.append((f"block{b}.depthwise", blk.conv.depthwise))
            out.append((f"block{b}.pointwise", blk.conv.pointwise))
            out.append((f"block{b}.bias", blk.conv.bias))
            out.append((f"block{b}.gamma", blk.norm.gamma))
            out.append((f"block{b}.beta", blk.norm.beta))
            out.append((f"block{b}.running_mean", blk.norm.running_mean))
            out.append((f"block{b}.running_var", blk.norm.running_var))
        out.append(("hidden.weight", self.hidden.weight))
        out.append(("hidden.bias", self.hidden.bias))
        out.append(("output.weight", self.output.weight))
        out.append(("output.bias", self.output.bias))
        return out

    def parameter_count(self) -> int:
        """Stored parameter count: conv weights/bias plus 4 stats per BN channel."""
        return sum(int(np.prod(a.shape)) for _, a in self.state_arrays())

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """Clone with every array cast to ``dtype`` (float64 shadow for checks)."""
        clone = self.copy()
        for blk in clone.blocks:
            blk.conv.depthwise = blk.conv.depthwise.astype(dtype)
            blk.conv.pointwise = blk.conv.pointwise.astype(dtype)
            blk.conv.bias = blk.conv.bias.astype(dtype)
            blk.norm.gamma = blk.norm.gamma.astype(dtype)
            blk.norm.beta = blk.norm.beta.astype(dtype)
            blk.norm.running_mean = blk.norm.running_mean.astype(dtype)
            blk.norm.running_var = blk.norm.running_var.astype(dtype)
        clone.hidden.weight = clone.hidden.weight.astype(dtype)
        clone.hidden.bias = clone.hidden.bias.astype(dtype)
        clone.output.weight = clone.output.weight.astype(dtype)
        clone.output.bias = clone.output.bias.astype(dtype)
        return clone


def _glorot(stream: SplitMixStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return ((stream.uniform(shape) * 2.0 - 1.0) * limit).astype(np.float32)


def build_model(config: ModelConfig, seed: int) -> Model:
    """Deterministic fan-scaled uniform init; BN gamma=1, beta=0, biases 0."""
    k = config.kernel
    blocks = []
    c_in = config.input_channels
    for b, (c_out, stride) in enumerate(zip(config.channel_plan, config.stride_plan)):
        depthwise = _glorot(SplitMixStream(seed, TAG_INIT, b, 0), (c_in, 1, k, k), k * k, k * k)
        pointwise = _glorot(SplitMixStream(seed, TAG_INIT, b, 1), (c_out, c_in, 1, 1), c_in, c_out)
        conv = SepConvParams(
            depthwise=depthwise,
            pointwise=pointwise,
            bias=np.zeros(c_out, dtype=np.float32),
            stride=stride,
            padding="same",
        )
        norm = BatchNormParams(
            gamma=np.ones(c_out, dtype=np.float32),
            beta=np.zeros(c_out, dtype=np.float32),
            running_mean=np.zeros(c_out, dtype=np.float32),
            running_var=np.ones(c_out, dtype=np.float32),
        )
        blocks.append(Block(conv=conv, norm=norm))
        c_in = c_out

    hidden = DenseParams(
        weight=_glorot(
            SplitMixStream(seed, TAG_INIT, N_BLOCKS, 0),
            (config.hidden_units, c_in),
            c_in,
            config.hidden_units,
        ),
        bias=np.zeros(config.hidden_units, dtype=np.float32),
    )
    # the single-unit classifier head starts at zero so every probability is
    # exactly 0.5 and the first gradient step already points along the class
    # contrast; fan-scaled noise here only adds a random offset to undo
    output = DenseParams(
        weight=np.zeros((1, config.hidden_units), dtype=np.float32),
        bias=np.zeros(1, dtype=np.float32),
    )
    return Model(config=config, blocks=blocks, hidden=hidden, output=output)


@dataclass
class ForwardCaches:
    block_caches: list  # per block: (conv_cache, bn_cache, relu_cache)
    pool_cache: object
    hidden_cache: object
    hidden_relu_cache: object
    dropout_cache: object
    output_cache: object
    logits: np.ndarray
    probs: np.ndarray


def _forward_blocks(model: Model, x: np.ndarray, mode: str, upto: int | None = None):
    """Run the conv stack through block ``upto`` (inclusive; None = all)."""
    last = len(model.blocks) - 1 if upto is None else upto
    caches = []
    out = x
    for blk in model.blocks[: last + 1]:
        out, conv_cache = layers.sepconv2d(out, blk.conv, mode)
        out, bn_cache = layers.batchnorm(out, blk.norm, mode)
        out, relu_cache = layers.relu(out)
        caches.append((conv_cache, bn_cache, relu_cache))
    return out, caches


def _backward_blocks(dout: np.ndarray, caches, grads: dict | None = None):
    """Backprop through cached conv blocks; fills ``grads`` when given."""
    g = dout
    for b in range(len(caches) - 1, -1, -1):
        conv_cache, bn_cache, relu_cache = caches[b]
        g = layers.relu_backward(g, relu_cache)
        g, d_gamma, d_beta = layers.batchnorm_backward(g, bn_cache)
        g, d_dw, d_pw, d_bias = layers.sepconv2d_backward(g, conv_cache)
        if grads is not None:
            grads[f"block{b}.depthwise"] = d_dw
            grads[f"block{b}.pointwise"] = d_pw
            grads[f"block{b}.bias"] = d_bias
            grads[f"block{b}.gamma"] = d_gamma
            grads[f"block{b}.beta"] = d_beta
    return g


def forward(model: Model, batch: np.ndarray, mode: str = "infer", dropout_rng=None):
    """Per-sample probabilities in (0,1) plus the caches for the gradient pass.

    ``dropout_rng`` feeds the single dropout layer and is required in train
    mode when the configured rate is positive.
    """
    cfg = model.config
    if batch.ndim != 4 or batch.shape[1] != cfg.input_channels or batch.shape[2:] != (
        cfg.input_height,
        cfg.input_width,
    ):
        raise ShapeError(
            f"batch shape {batch.shape} does not match configured input "
            f"[N,{cfg.input_channels},{cfg.input_height},{cfg.input_width}]"
        )
    out, block_caches = _forward_blocks(model, batch, mode)
    out, pool_cache = layers.global_avg_pool(out)
    out, hidden_cache = layers.dense(out, model.hidden)
    out, hidden_relu_cache = layers.relu(out)
    out, dropout_cache = layers.dropout(out, cfg.dropout_rate, mode, dropout_rng)
    logits2d, output_cache = layers.dense(out, model.output)
    logits = logits2d[:, 0]
    probs, _ = layers.sigmoid(logits)
    if not np.all(np.isfinite(probs)):
        raise NumericError("forward pass produced non-finite probabilities")
    caches = ForwardCaches(
        block_caches=block_caches,
        pool_cache=pool_cache,
        hidden_cache=hidden_cache,
        hidden_relu_cache=hidden_relu_cache,
        dropout_cache=dropout_cache,
        output_cache=output_cache,
        logits=logits,
        probs=probs,
    )
    return probs, caches


def backward(model: Model, caches: ForwardCaches, dlogits: np.ndarray) -> dict:
    """Parameter gradients for a loss whose gradient w.r.t. the logits is given."""
    grads: dict[str, np.ndarray] = {}
    g, d_w, d_b = layers.dense_backward(dlogits[:, None], caches.output_cache)
    grads["output.weight"] = d_w
    grads["output.bias"] = d_b
    g = layers.dropout_backward(g, caches.dropout_cache)
    g = layers.relu_backward(g, caches.hidden_relu_cache)
    g, d_w, d_b = layers.dense_backward(g, caches.hidden_cache)
    grads["hidden.weight"] = d_w
    grads["hidden.bias"] = d_b
    g = layers.global_avg_pool_backward(g, caches.pool_cache)
    _backward_blocks(g, caches.block_caches, grads)
    return grads


def predict_labels(probs: np.ndarray, threshold: float) -> np.ndarray:
    """Label 1 (positive class) iff probability >= threshold."""
    probs = np.asarray(probs)
    return (probs >= threshold).astype(np.int64)


def save_model(path, model: Model) -> None:
    """SFM1 file: magic, u32 version, length-prefixed config JSON, TSR1 records."""
    header = {
        "config": model.config.to_json_dict(),
        "bn_epsilon": model.blocks[0].norm.epsilon,
        "bn_momentum": model.blocks[0].norm.momentum,
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", MODEL_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for _, arr in model.state_arrays():
            arr32 = np.ascontiguousarray(arr, dtype=np.float32)
            fh.write(_encode_array(arr32, _validate_dims(arr32.shape)))


def load_model(path) -> Model:
    blob = open(path, "rb").read()
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated header")
    if blob[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (json_len,) = struct.unpack_from("<I", blob, 8)
    if len(blob) < 12 + json_len:
        raise FormatError(f"{path}: truncated config section")
    try:
        header = json.loads(blob[12:12 + json_len].decode("utf-8"))
        config = ModelConfig.from_json_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: bad config section: {exc}") from exc

    model = build_model(config, seed=0)
    for blk in model.blocks:
        blk.norm.epsilon = float(header.get("bn_epsilon", layers.BN_EPSILON))
        blk.norm.momentum = float(header.get("bn_momentum", layers.BN_MOMENTUM))
    offset = 12 + json_len
    for name, arr in model.state_arrays():
        loaded, offset = _decode_at(blob, offset, f"{path}[{name}]")
        if loaded.shape != arr.shape:
            raise FormatError(f"{path}: {name} has shape {loaded.shape}, expected {arr.shape}")
        arr[...] = loaded
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return model


def _decode_at(blob: bytes, offset: int, label: str):
    arr, used = _decode_array(blob[offset:], label)
    return arr, offset + used


def extract_activation(model: Model, image: np.ndarray, block_index: int, channel: int) -> np.ndarray:
    """Post-ReLU feature map [H',W'] of one block/channel on a single input."""
    _check_block_channel(model, block_index, channel)
    if image.ndim != 4 or image.shape[0] != 1:
        raise ShapeError(f"expected a [1,C,H,W] input, got shape {image.shape}")
    out, _ = _forward_blocks(model, image, "infer", upto=block_index)
    return out[0, channel]


def _check_block_channel(model: Model, block_index: int, channel: int) -> None:
    if not 0 <= block_index < len(model.blocks):
        raise ConfigError(f"block index {block_index} outside 0..{len(model.blocks) - 1}")
    width = model.config.channel_plan[block_index]
    if not 0 <= channel < width:
        raise ConfigError(f"channel {channel} outside 0..{width - 1} for block {block_index}")


def maximize_activation(
    model: Model,
    block_index: int,
    channel: int,
    steps: int,
    step_size: float,
    seed: int,
):
    """Gradient ascent on the mean post-ReLU activation of one channel.

    Starts from a seeded random image and climbs with RMS-normalized steps.
    Returns (final image [1,C,H,W], objective trace of length steps+1).
    """
    _check_block_channel(model, block_index, channel)
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    cfg = model.config
    stream = SplitMixStream(seed, TAG_MAXIMIZE, block_index, channel)
    x = (stream.normal((1, cfg.input_channels, cfg.input_height, cfg.input_width)) * 0.1 + 0.5).astype(
        np.float32
    )

    def objective_and_grad(img):
        out, caches = _forward_blocks(model, img, "infer", upto=block_index)
        hprime, wprime = out.shape[2], out.shape[3]
        value = float(out[0, channel].mean(dtype=np.float64))
        dout = np.zeros_like(out)
        dout[0, channel] = 1.0 / (hprime * wprime)
        dx = _backward_blocks(dout, caches)
        return value, dx

    trace = []
    for _ in range(steps):
        value, dx = objective_and_grad(x)
        if not np.isfinite(value):
            raise NumericError(
                f"activation maximization diverged at step {len(trace)} "
                f"(block {block_index}, channel {channel})"
            )
        trace.append(value)
        rms = float(np.sqrt(np.mean(dx.astype(np.float64) ** 2)))
        if rms > 1e-12:
            x = (x + step_size * (dx / rms)).astype(np.float32)
    final_value, _ = objective_and_grad(x)
    if not np.isfinite(final_value):
        raise NumericError("activation maximization produced a non-finite objective")
    trace.append(final_value)
    if not np.all(np.isfinite(x)):
        raise NumericError("activation maximization produced non-finite pixels")
    return x, trace
