"""Layer forward and gradient computation on plain ndarrays.

Every layer comes in a pair: ``<layer>(...)`` returns ``(output, cache)`` and
``<layer>_backward(upstream, cache)`` consumes the cache to produce the input
gradient (plus parameter gradients where the layer has parameters). Arrays
flow in the caller's dtype so the same code serves float32 training and
float64 finite-difference shadowing; reductions always accumulate in float64.

Parameter containers are mutated only by the optimizer, with one exception:
batch normalization updates its running statistics during train-mode forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .rng import SplitMixStream

BN_EPSILON = 1e-3
# 0.9 keeps running statistics usable within the first few dozen updates;
# 0.99 needs ~100x more steps than a desk-scale run performs.
BN_MOMENTUM = 0.9


@dataclass
class SepConvParams:
    """Depthwise kernel [C_in,1,kH,kW], pointwise [C_out,C_in,1,1], bias [C_out]."""

    depthwise: np.ndarray
    pointwise: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: str = "same"

    def __post_init__(self):
        kh, kw = self.depthwise.shape[2], self.depthwise.shape[3]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel dims must be odd, got {kh}x{kw}")
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise ConfigError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.pointwise.shape[1] != self.depthwise.shape[0]:
            raise ShapeError(
                f"pointwise expects {self.pointwise.shape[1]} input channels, "
                f"depthwise provides {self.depthwise.shape[0]}"
            )


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ConfigError(f"momentum must be in (0,1), got {self.momentum}")
        if self.epsilon <= 0.0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if np.any(self.running_var < 0):
            raise ConfigError("running_var must be nonnegative")


@dataclass
class DenseParams:
    weight: np.ndarray  # [out, in]
    bias: np.ndarray  # [out]


@dataclass
class SepConvCache:
    x_padded: np.ndarray
    mid: np.ndarray
    params: SepConvParams
    pad: tuple[int, int]
    in_hw: tuple[int, int]


@dataclass
class BatchNormCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    train: bool


@dataclass
class ReluCache:
    mask: np.ndarray


@dataclass
class PoolCache:
    in_shape: tuple


@dataclass
class DenseCache:
    x: np.ndarray
    params: DenseParams


@dataclass
class DropoutCache:
    scaled_mask: np.ndarray | None  # None means identity (infer or rate 0)


@dataclass
class SigmoidCache:
    out: np.ndarray


def _out_dims(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        return (h + stride - 1) // stride, (w + stride - 1) // stride, kh // 2, kw // 2
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"valid conv of {kh}x{kw} kernel over {h}x{w} input is empty")
    return ho, wo, 0, 0


def sepconv2d(x: np.ndarray, p: SepConvParams, mode: str = "train"):
    """Depthwise spatial convolution then 1x1 pointwise projection plus bias.

    No nonlinearity between the two stages. "same" padding is symmetric
    zero-padding of floor(k/2), so the output is ceil(H/stride) per side.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] input, got shape {x.shape}")
    n, c_in, h, w = x.shape
    if c_in != p.depthwise.shape[0]:
        raise ShapeError(f"input has {c_in} channels, depthwise expects {p.depthwise.shape[0]}")
    kh, kw = p.depthwise.shape[2], p.depthwise.shape[3]
    s = p.stride
    ho, wo, ph, pw = _out_dims(h, w, kh, kw, s, p.padding)
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x

    dw = p.depthwise[:, 0].astype(np.float64, copy=False)
    mid = np.zeros((n, c_in, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            mid += dw[:, i, j][None, :, None, None] * xp[:, :, i:i + s * ho:s, j:j + s * wo:s]

    pw_mat = p.pointwise[:, :, 0, 0].astype(np.float64, copy=False)
    out = np.einsum("oc,nchw->nohw", pw_mat, mid)
    out += p.bias.astype(np.float64, copy=False)[None, :, None, None]

    cache = SepConvCache(
        x_padded=xp,
        mid=mid.astype(x.dtype, copy=False),
        params=p,
        pad=(ph, pw),
        in_hw=(h, w),
    )
    return out.astype(x.dtype, copy=False), cache


def sepconv2d_backward(dout: np.ndarray, cache: SepConvCache):
    """Gradients of sepconv2d: returns (dx, d_depthwise, d_pointwise, d_bias)."""
    p = cache.params
    xp = cache.x_padded
    mid = cache.mid.astype(np.float64, copy=False)
    g = dout.astype(np.float64, copy=False)
    kh, kw = p.depthwise.shape[2], p.depthwise.shape[3]
    s = p.stride
    n, c_out, ho, wo = dout.shape

    d_bias = g.sum(axis=(0, 2, 3))
    pw_mat = p.pointwise[:, :, 0, 0].astype(np.float64, copy=False)
    d_pw = np.einsum("nohw,nchw->oc", g, mid)
    dmid = np.einsum("oc,nohw->nchw", pw_mat, g)

    dw = p.depthwise[:, 0].astype(np.float64, copy=False)
    d_dw = np.zeros((dw.shape[0], 1, kh, kw), dtype=np.float64)
    dxp = np.zeros(xp.shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            window = xp[:, :, i:i + s * ho:s, j:j + s * wo:s]
            d_dw[:, 0, i, j] = np.einsum("nchw,nchw->c", dmid, window.astype(np.float64, copy=False))
            dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dw[:, i, j][None, :, None, None] * dmid

    ph, pw_ = cache.pad
    h, w = cache.in_hw
    dx = dxp[:, :, ph:ph + h, pw_:pw_ + w]

    dtype = dout.dtype
    return (
        dx.astype(dtype, copy=False),
        d_dw.astype(dtype, copy=False),
        d_pw.reshape(p.pointwise.shape).astype(dtype, copy=False),
        d_bias.astype(dtype, copy=False),
    )


def batchnorm(x: np.ndarray, p: BatchNormParams, mode: str = "train"):
    """Per-channel standardization with scale/shift.

    Train mode standardizes with batch statistics over N*H*W per channel
    (biased variance) and folds them into the running statistics via
    ``running = momentum * running + (1 - momentum) * batch``. Infer mode
    uses the running statistics only and performs no update.
    """
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] input, got shape {x.shape}")
    x64 = x.astype(np.float64, copy=False)
    gamma = p.gamma.astype(np.float64, copy=False)[None, :, None, None]
    beta = p.beta.astype(np.float64, copy=False)[None, :, None, None]

    if mode == "train":
        n, _, h, w = x.shape
        m = n * h * w
        if m < 2:
            raise ShapeError(f"train-mode batchnorm needs N*H*W >= 2 per channel, got {m}")
        mean = x64.mean(axis=(0, 2, 3))
        var = ((x64 - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.epsilon)
        x_hat = (x64 - mean[None, :, None, None]) * inv_std[None, :, None, None]
        mom = p.momentum
        p.running_mean[...] = (mom * p.running_mean.astype(np.float64) + (1 - mom) * mean).astype(
            p.running_mean.dtype
        )
        p.running_var[...] = (mom * p.running_var.astype(np.float64) + (1 - mom) * var).astype(
            p.running_var.dtype
        )
        train = True
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(p.running_var.astype(np.float64) + p.epsilon)
        x_hat = (x64 - p.running_mean.astype(np.float64)[None, :, None, None]) * inv_std[None, :, None, None]
        train = False
    else:
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")

    out = gamma * x_hat + beta
    cache = BatchNormCache(
        x_hat=x_hat.astype(x.dtype, copy=False),
        inv_std=inv_std,
        gamma=p.gamma,
        train=train,
    )
    return out.astype(x.dtype, copy=False), cache


def batchnorm_backward(dout: np.ndarray, cache: BatchNormCache):
    """Gradients of batchnorm: returns (dx, d_gamma, d_beta)."""
    g = dout.astype(np.float64, copy=False)
    x_hat = cache.x_hat.astype(np.float64, copy=False)
    gamma = cache.gamma.astype(np.float64, copy=False)[None, :, None, None]
    inv_std = cache.inv_std[None, :, None, None]

    d_gamma = (g * x_hat).sum(axis=(0, 2, 3))
    d_beta = g.sum(axis=(0, 2, 3))
    dx_hat = g * gamma

    if cache.train:
        n, _, h, w = dout.shape
        m = n * h * w
        sum_dx_hat = dx_hat.sum(axis=(0, 2, 3))[None, :, None, None]
        sum_dx_hat_xhat = (dx_hat * x_hat).sum(axis=(0, 2, 3))[None, :, None, None]
        dx = (inv_std / m) * (m * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat)
    else:
        dx = dx_hat * inv_std

    dtype = dout.dtype
    return dx.astype(dtype, copy=False), d_gamma.astype(dtype, copy=False), d_beta.astype(dtype, copy=False)


def relu(x: np.ndarray):
    """max(0, x); the gradient passes only where x > 0 (subgradient 0 at 0)."""
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), ReluCache(mask=mask)


def relu_backward(dout: np.ndarray, cache: ReluCache):
    return np.where(cache.mask, dout, dout.dtype.type(0))


def global_avg_pool(x: np.ndarray):
    """Mean over the spatial dims: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ShapeError(f"expected [N,C,H,W] input, got shape {x.shape}")
    out = x.mean(axis=(2, 3), dtype=np.float64)
    return out.astype(x.dtype, copy=False), PoolCache(in_shape=x.shape)


def global_avg_pool_backward(dout: np.ndarray, cache: PoolCache):
    n, c, h, w = cache.in_shape
    dx = np.broadcast_to(dout[:, :, None, None], cache.in_shape) / (h * w)
    return dx.astype(dout.dtype, copy=False)


def dense(x: np.ndarray, p: DenseParams):
    """Affine map x @ W.T + b over [N, in] rows."""
    if x.ndim != 2:
        raise ShapeError(f"expected [N,in] input, got shape {x.shape}")
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} != weight in-dim {p.weight.shape[1]}")
    out = np.matmul(x.astype(np.float64, copy=False), p.weight.astype(np.float64, copy=False).T)
    out += p.bias.astype(np.float64, copy=False)
    return out.astype(x.dtype, copy=False), DenseCache(x=x, params=p)


def dense_backward(dout: np.ndarray, cache: DenseCache):
    """Gradients of dense: returns (dx, d_weight, d_bias)."""
    g = dout.astype(np.float64, copy=False)
    x64 = cache.x.astype(np.float64, copy=False)
    w64 = cache.params.weight.astype(np.float64, copy=False)
    dx = np.matmul(g, w64)
    d_w = np.matmul(g.T, x64)
    d_b = g.sum(axis=0)
    dtype = dout.dtype
    return dx.astype(dtype, copy=False), d_w.astype(dtype, copy=False), d_b.astype(dtype, copy=False)


def dropout(x: np.ndarray, rate: float, mode: str = "train", rng=None):
    """Inverted dropout: zero each element with probability ``rate`` and scale
    survivors by 1/(1-rate) so inference is exactly the identity.

    ``rng`` is a SplitMixStream, or a sequence of per-row streams so each
    sample's mask depends only on its own key.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
    if mode == "infer" or rate == 0.0:
        return x, DropoutCache(scaled_mask=None)
    if mode != "train":
        raise ConfigError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ConfigError("train-mode dropout with rate > 0 needs an rng stream")
    if isinstance(rng, SplitMixStream):
        u = rng.uniform(x.shape)
    else:
        streams: Sequence[SplitMixStream] = rng
        if len(streams) != x.shape[0]:
            raise ShapeError(f"{len(streams)} streams for {x.shape[0]} rows")
        u = np.stack([s.uniform(x.shape[1:]) for s in streams])
    scaled_mask = (u >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * scaled_mask, DropoutCache(scaled_mask=scaled_mask)


def dropout_backward(dout: np.ndarray, cache: DropoutCache):
    if cache.scaled_mask is None:
        return dout
    return dout * cache.scaled_mask


def sigmoid(x: np.ndarray):
    """Numerically stable logistic function, branch form on the sign of x."""
    x64 = x.astype(np.float64, copy=False)
    t = np.exp(-np.abs(x64))
    out = np.where(x64 >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    out = out.astype(x.dtype, copy=False)
    return out, SigmoidCache(out=out)


def sigmoid_backward(dout: np.ndarray, cache: SigmoidCache):
    s = cache.out.astype(np.float64, copy=False)
    return (dout.astype(np.float64, copy=False) * s * (1.0 - s)).astype(dout.dtype, copy=False)
