"""Layer kinds with explicit forward/backward rules.

Every layer works on a leading batch axis. Images are ``(B, C, H, W)``.
A layer's ``forward`` returns ``(output, cache)`` and ``backward`` consumes
that cache together with the upstream gradient and returns
``(input_grad, param_grads, style_grad)``; ``style_grad`` is ``None`` for
layers that do not read the style vector ``w``.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a layer expects."""


class Layer:
    kind = "layer"
    uses_style = False

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}

    def check_input(self, shape: tuple[int, ...]) -> None:
        pass

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x, w=None):
        raise NotImplementedError

    def backward(self, cache, g, need_params=True):
        raise NotImplementedError

    def __repr__(self):
        shapes = {k: v.shape for k, v in self.params.items()}
        return f"{type(self).__name__}({shapes})"


def _expect_ndim(shape, ndim, kind):
    if len(shape) != ndim:
        raise ShapeError(f"{kind} expects {ndim}-d input, got shape {tuple(shape)}")


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, gain: float = 1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        std = gain / np.sqrt(n_in)
        self.params["weight"] = (rng.standard_normal((n_out, n_in)) * std).astype(np.float32)
        self.params["bias"] = np.zeros(n_out, dtype=np.float32)

    def check_input(self, shape):
        _expect_ndim(shape, 2, self.kind)
        n_in = self.params["weight"].shape[1]
        if shape[1] != n_in:
            raise ShapeError(f"dense expects width {n_in}, got {shape[1]}")

    def output_shape(self, shape):
        return (shape[0], self.params["weight"].shape[0])

    def forward(self, x, w=None):
        return x @ self.params["weight"].T + self.params["bias"], x

    def backward(self, cache, g, need_params=True):
        x = cache
        dx = g @ self.params["weight"]
        grads = {}
        if need_params:
            grads = {"weight": g.T @ x, "bias": g.sum(axis=0)}
        return dx, grads, None


def _pad1(x):
    b, c, h, w = x.shape
    xp = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    return xp


def _im2col(x, stride):
    """Gather 3x3 zero-padded patches as ``(B, C*9, Ho*Wo)``."""
    b, c, h, w = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    xp = _pad1(x)
    cols = np.empty((b, c, 9, ho, wo), dtype=x.dtype)
    for ky in range(3):
        for kx in range(3):
            cols[:, :, 3 * ky + kx] = xp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(b, c * 9, ho * wo), ho, wo


def _col2im(dcols, x_shape, ho, wo, stride):
    b, c, h, w = x_shape
    dcols = dcols.reshape(b, c, 9, ho, wo)
    dxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            dxp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += dcols[:, :, 3 * ky + kx]
    return dxp[:, :, 1:-1, 1:-1]


def _conv_forward(x, weight, bias, stride):
    cout = weight.shape[0]
    cols, ho, wo = _im2col(x, stride)
    y = np.matmul(weight.reshape(cout, -1), cols)
    y += bias[:, None]
    return y.reshape(x.shape[0], cout, ho, wo), (cols, ho, wo)


def _conv_backward(g, weight, x_shape, conv_cache, stride, need_params):
    cols, ho, wo = conv_cache
    cout = weight.shape[0]
    gf = g.reshape(g.shape[0], cout, ho * wo)
    if stride == 1:
        # transposed conv as a plain conv with the flipped, channel-swapped kernel;
        # a gather is much cheaper than the strided scatter-add in _col2im
        flipped = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        cols_g, _, _ = _im2col(g, 1)
        dx = np.matmul(flipped.reshape(x_shape[1], -1), cols_g).reshape(x_shape)
    else:
        dcols = np.matmul(weight.reshape(cout, -1).T, gf)
        dx = _col2im(dcols, x_shape, ho, wo, stride)
    grads = {}
    if need_params:
        dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
        grads = {"weight": dw.reshape(weight.shape), "bias": gf.sum(axis=(0, 2))}
    return dx, grads


class Conv2d(Layer):
    """3x3 convolution with zero padding 1 and stride 1 or 2."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, stride: int = 1, rng=None, gain: float = np.sqrt(2.0)):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        std = gain / np.sqrt(c_in * 9)
        self.params["weight"] = (rng.standard_normal((c_out, c_in, 3, 3)) * std).astype(np.float32)
        self.params["bias"] = np.zeros(c_out, dtype=np.float32)

    def check_input(self, shape):
        _expect_ndim(shape, 4, self.kind)
        c_in = self.params["weight"].shape[1]
        if shape[1] != c_in:
            raise ShapeError(f"conv2d expects {c_in} channels, got {shape[1]}")

    def output_shape(self, shape):
        b, _, h, w = shape
        return (b, self.params["weight"].shape[0], (h - 1) // self.stride + 1, (w - 1) // self.stride + 1)

    def forward(self, x, w=None):
        y, cc = _conv_forward(x, self.params["weight"], self.params["bias"], self.stride)
        return y, (x.shape, cc)

    def backward(self, cache, g, need_params=True):
        x_shape, cc = cache
        dx, grads = _conv_backward(g, self.params["weight"], x_shape, cc, self.stride, need_params)
        return dx, grads, None


class StyleConv2d(Conv2d):
    """Convolution whose per-input-channel scale is an affine function of ``w``.

    ``y = conv(x * s, W) + b`` with ``s = A w + a``; equivalent to scaling the
    conv weights per input channel. No demodulation and no noise input.
    """

    kind = "style-conv"
    uses_style = True

    def __init__(self, c_in: int, c_out: int, w_dim: int, stride: int = 1, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        super().__init__(c_in, c_out, stride=stride, rng=rng)
        self.params["style_weight"] = (rng.standard_normal((c_in, w_dim)) / np.sqrt(w_dim)).astype(np.float32)
        self.params["style_bias"] = np.ones(c_in, dtype=np.float32)

    def forward(self, x, w=None):
        if w is None:
            raise ShapeError("style-conv requires a style vector w")
        if w.ndim != 2 or w.shape[0] != x.shape[0] or w.shape[1] != self.params["style_weight"].shape[1]:
            raise ShapeError(f"style vector shape {w.shape} does not match batch {x.shape[0]}")
        s = w @ self.params["style_weight"].T + self.params["style_bias"]
        xs = x * s[:, :, None, None]
        y, cc = _conv_forward(xs, self.params["weight"], self.params["bias"], self.stride)
        return y, (x, w, s, cc)

    def backward(self, cache, g, need_params=True):
        x, w, s, cc = cache
        dxs, grads = _conv_backward(g, self.params["weight"], x.shape, cc, self.stride, need_params)
        dx = dxs * s[:, :, None, None]
        ds = (dxs * x).sum(axis=(2, 3))
        dw = ds @ self.params["style_weight"]
        if need_params:
            grads["style_weight"] = ds.T @ w
            grads["style_bias"] = ds.sum(axis=0)
        return dx, grads, dw


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, w=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, cache, g, need_params=True):
        return g * cache, {}, None


class LeakyReLU(Layer):
    kind = "leaky-relu"

    def __init__(self, slope: float = 0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, w=None):
        scale = np.where(x > 0, 1.0, self.slope).astype(x.dtype)
        return x * scale, scale

    def backward(self, cache, g, need_params=True):
        return g * cache, {}, None


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, w=None):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, g, need_params=True):
        return g * (1 - cache * cache), {}, None


class Rescale(Layer):
    """Fixed affine map ``scale * x + shift`` (e.g. tanh output to [0, 1])."""

    kind = "rescale"

    def __init__(self, scale: float = 0.5, shift: float = 0.5):
        super().__init__()
        self.scale = scale
        self.shift = shift

    def forward(self, x, w=None):
        return x * self.scale + self.shift, None

    def backward(self, cache, g, need_params=True):
        return g * self.scale, {}, None


class Upsample2x(Layer):
    kind = "upsample2x"

    def check_input(self, shape):
        _expect_ndim(shape, 4, self.kind)

    def output_shape(self, shape):
        b, c, h, w = shape
        return (b, c, 2 * h, 2 * w)

    def forward(self, x, w=None):
        return x.repeat(2, axis=2).repeat(2, axis=3), None

    def backward(self, cache, g, need_params=True):
        b, c, h, w = g.shape
        return g.reshape(b, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), {}, None


class InstanceNorm(Layer):
    """Per-sample, per-channel normalization over spatial positions, with affine."""

    kind = "instance-norm"

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=np.float32)
        self.params["beta"] = np.zeros(channels, dtype=np.float32)

    def check_input(self, shape):
        _expect_ndim(shape, 4, self.kind)
        if shape[1] != self.params["gamma"].shape[0]:
            raise ShapeError(f"instance-norm expects {self.params['gamma'].shape[0]} channels, got {shape[1]}")

    def forward(self, x, w=None):
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        y = xhat * self.params["gamma"][None, :, None, None] + self.params["beta"][None, :, None, None]
        return y, (xhat, inv)

    def backward(self, cache, g, need_params=True):
        xhat, inv = cache
        gh = g * self.params["gamma"][None, :, None, None]
        dx = inv * (gh - gh.mean(axis=(2, 3), keepdims=True)
                    - xhat * (gh * xhat).mean(axis=(2, 3), keepdims=True))
        grads = {}
        if need_params:
            grads = {"gamma": (g * xhat).sum(axis=(0, 2, 3)), "beta": g.sum(axis=(0, 2, 3))}
        return dx, grads, None


class MinibatchStd(Layer):
    """Append one channel holding the mean across-batch standard deviation.

    Lets a discriminator see sample diversity; the batch elements are
    coupled, so real and generated batches must be passed separately.
    """

    kind = "minibatch-std"

    def __init__(self, eps: float = 1e-8):
        super().__init__()
        self.eps = eps

    def check_input(self, shape):
        _expect_ndim(shape, 4, self.kind)

    def output_shape(self, shape):
        b, c, h, w = shape
        return (b, c + 1, h, w)

    def forward(self, x, w=None):
        centered = x - x.mean(axis=0, keepdims=True)
        sd = np.sqrt((centered * centered).mean(axis=0) + self.eps)
        stat = np.full((x.shape[0], 1, *x.shape[2:]), sd.mean(), dtype=x.dtype)
        return np.concatenate([x, stat], axis=1), (centered, sd)

    def backward(self, cache, g, need_params=True):
        centered, sd = cache
        b = centered.shape[0]
        ds = g[:, -1].sum()
        # d mean(sd) / d x_b = (x_b - mu) / (B * sd * numel); the mean's own
        # derivative cancels because the centred values sum to zero
        dx = g[:, :-1] + (ds / (b * sd.size)) * centered / sd
        return dx.astype(g.dtype), {}, None


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, shape):
        return (shape[0], int(np.prod(shape[1:])))

    def forward(self, x, w=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, cache, g, need_params=True):
        return g.reshape(cache), {}, None


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: tuple[int, ...]):
        super().__init__()
        self.shape = tuple(shape)

    def check_input(self, shape):
        if int(np.prod(shape[1:])) != int(np.prod(self.shape)):
            raise ShapeError(f"cannot reshape {tuple(shape[1:])} to {self.shape}")

    def output_shape(self, shape):
        return (shape[0], *self.shape)

    def forward(self, x, w=None):
        return x.reshape(x.shape[0], *self.shape), x.shape

    def backward(self, cache, g, need_params=True):
        return g.reshape(cache), {}, None
