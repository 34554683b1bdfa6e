"""Neural network layers built on the autodiff engine.

Layer kinds: 2-d convolution, 2-d transpose convolution, causally masked
1-d convolution, linear, batch normalisation, and embedding lookup.  ReLU
and softmax are parameterless and live in :mod:`convdial.autodiff`.

Conventions
-----------
* Convolution inputs are channel-first: ``(batch, channels, height, width)``.
* Conv weights are ``(out_ch, in_ch, kh, kw)``; transpose-conv weights are
  ``(in_ch, out_ch, kh, kw)``.
* Output extents follow the standard formulas
  ``out = (in + 2p - k) // s + 1`` for convolution and
  ``out = (in - 1) * s - 2p + k`` for transpose convolution.
* Batch norm running statistics use
  ``running <- (1 - m) * running + m * batch`` with ``m = 0.001`` by
  default; the very first update copies the batch statistics outright so
  that evaluation immediately after a warm-up pass is sensible.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, accumulate_grad, make_node, relu


def _pair(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class: parameter/buffer registration for checkpointing."""

    def parameters(self):
        """Yield (name, tensor) pairs for trainable parameters."""
        return []

    def buffers(self):
        """Yield (name, array-holder) pairs for non-trainable state."""
        return []

    def forward(self, x, mode: str = "train"):
        raise NotImplementedError

    def __call__(self, x, mode: str = "train"):
        return self.forward(x, mode)


class Conv2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng: np.random.Generator | None = None, dtype=np.float32, bias: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel
        fan_in = in_channels * kh * kw
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kh, kw), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def out_shape(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        return (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride=1, padding=0,
                 rng: np.random.Generator | None = None, dtype=np.float32, bias: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = _pair(kernel)
        self.stride = _pair(stride)
        self.padding = _pair(padding)
        kh, kw = self.kernel
        fan_in = in_channels * kh * kw
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (in_channels, out_channels, kh, kw), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        out = [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def out_shape(self, h, w):
        kh, kw = self.kernel
        sh, sw = self.stride
        ph, pw = self.padding
        return (h - 1) * sh - 2 * ph + kh, (w - 1) * sw - 2 * pw + kw

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class Linear(Layer):
    """Affine map on the last axis.  ``weight`` may be a shared tensor."""

    def __init__(self, in_features, out_features, rng: np.random.Generator | None = None,
                 dtype=np.float32, weight: Tensor | None = None, bias: bool = True):
        self.in_features = in_features
        self.out_features = out_features
        self._shared_weight = weight is not None
        if weight is not None:
            if weight.shape != (out_features, in_features):
                raise ValueError(f"shared weight shape {weight.shape} != ({out_features}, {in_features})")
            self.weight = weight
        else:
            rng = rng or np.random.default_rng(0)
            self.weight = Tensor(kaiming_uniform(rng, (out_features, in_features), in_features, dtype),
                                 requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def parameters(self):
        out = [] if self._shared_weight else [("weight", self.weight)]
        if self.bias is not None:
            out.append(("bias", self.bias))
        return out

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        flat = x.reshape((-1, self.in_features)) if x.ndim != 2 else x
        out = flat @ self.weight.transpose()
        if self.bias is not None:
            out = out + self.bias
        if x.ndim != 2:
            out = out.reshape(tuple(x.shape[:-1]) + (self.out_features,))
        return out


class Embedding(Layer):
    """Token-id to vector lookup; rows initialised N(0, 0.02^2)."""

    def __init__(self, vocab_size, dim, rng: np.random.Generator | None = None, dtype=np.float32):
        self.vocab_size = vocab_size
        self.dim = dim
        rng = rng or np.random.default_rng(0)
        self.table = Tensor(rng.normal(0.0, 0.02, size=(vocab_size, dim)).astype(dtype),
                            requires_grad=True)

    def parameters(self):
        return [("table", self.table)]

    def forward(self, ids: np.ndarray, mode: str = "train") -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self.vocab_size:
            raise ValueError(f"token id {int(ids.max())} out of range for vocab {self.vocab_size}")
        table = self.table
        out_data = table.data[ids]

        def backward(g):
            if table.requires_grad:
                grad = np.zeros_like(table.data)
                np.add.at(grad, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
                accumulate_grad(table, grad)

        return make_node(out_data, (table,), backward)


class BatchNorm(Layer):
    """Batch normalisation over the channel axis (axis 1).

    Works for both (B, C, H, W) and (B, C, R) inputs.  Train mode
    normalises with batch statistics (biased variance) and updates running
    statistics; eval mode normalises with the running statistics and
    raises if they were never initialised.
    """

    def __init__(self, num_channels, momentum: float = 0.001, eps: float = 1e-5, dtype=np.float32,
                 causal_stats: bool = False):
        self.num_channels = num_channels
        self.momentum = momentum
        self.eps = eps
        # causal_stats: train mode normalises with the pre-update running
        # statistics instead of the batch statistics, so the output at one
        # position never depends on other positions of the same input.  The
        # autoregressive stack needs this to keep its Jacobian strictly
        # causal; everything else uses standard batch statistics.
        self.causal_stats = causal_stats
        self.gamma = Tensor(np.ones(num_channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(num_channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.batches_tracked = np.zeros(1, dtype=np.int64)
        self._calibrating = 0  # counts calibration batches; 0 = normal EMA updates

    def parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def buffers(self):
        return [("running_mean", self.running_mean),
                ("running_var", self.running_var),
                ("batches_tracked", self.batches_tracked)]

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if x.shape[1] != self.num_channels:
            raise ValueError(f"batchnorm expected {self.num_channels} channels, got {x.shape[1]}")
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, self.num_channels) + (1,) * (x.ndim - 2)
        if mode == "train" and self.causal_stats and not self._calibrating:
            norm_mean = self.running_mean.copy()
            norm_var = self.running_var.copy()
            batch_mean = x.data.mean(axis=axes)
            batch_var = x.data.var(axis=axes)
            self._update_running(batch_mean, batch_var)
            mean = Tensor(norm_mean.reshape(bshape).astype(x.dtype))
            var = Tensor(norm_var.reshape(bshape).astype(x.dtype))
            centred = x - mean
        elif mode == "train":
            mean = x.mean(axis=axes, keepdims=True)
            centred = x - mean
            var = (centred * centred).mean(axis=axes, keepdims=True)
            self._update_running(mean.data.reshape(-1), var.data.reshape(-1))
        elif mode == "eval":
            if int(self.batches_tracked[0]) == 0:
                raise RuntimeError("eval-mode batchnorm with uninitialised running statistics")
            mean = Tensor(self.running_mean.reshape(bshape).astype(x.dtype))
            var = Tensor(self.running_var.reshape(bshape).astype(x.dtype))
            centred = x - mean
        else:
            raise ValueError(f"unknown mode {mode!r}")
        inv = (var + self.eps).pow(-0.5)
        xhat = centred * inv
        return xhat * self.gamma.reshape(bshape) + self.beta.reshape(bshape)

    def _update_running(self, mean, var):
        if self._calibrating:
            # cumulative average: after a full sweep the running statistics
            # are the dataset statistics under the current parameters
            n = self._calibrating
            self.running_mean[:] = (self.running_mean * (n - 1) + mean) / n
            self.running_var[:] = (self.running_var * (n - 1) + var) / n
            self._calibrating += 1
        elif int(self.batches_tracked[0]) == 0:
            self.running_mean[:] = mean
            self.running_var[:] = var
        else:
            m = self.momentum
            self.running_mean[:] = (1.0 - m) * self.running_mean + m * mean
            self.running_var[:] = (1.0 - m) * self.running_var + m * var
        self.batches_tracked[0] += 1

    def begin_calibration(self):
        """Start a statistics-refresh sweep: next updates average from scratch."""
        self.running_mean[:] = 0.0
        self.running_var[:] = 0.0
        self._calibrating = 1

    def end_calibration(self):
        self._calibrating = 0


class MaskedConv1d(Layer):
    """Size-preserving 1-d convolution over rows with a causal tap mask.

    Input is ``(batch, channels, rows)``.  Mask ``"A"`` zeroes the centre
    tap and everything after it, so output row ``r`` depends only on input
    rows ``< r``; mask ``"B"`` keeps the centre, allowing rows ``<= r``.
    The kernel length must be odd so the convolution preserves the row
    count.
    """

    def __init__(self, in_channels, out_channels, kernel: int, mask: str,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if kernel % 2 != 1:
            raise ValueError("masked convolution kernel must be odd to preserve size")
        if mask not in ("A", "B"):
            raise ValueError(f"mask must be 'A' or 'B', got {mask!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.mask_type = mask
        centre = kernel // 2
        m = np.zeros(kernel, dtype=dtype)
        m[:centre] = 1.0
        if mask == "B":
            m[centre] = 1.0
        self.mask = m
        fan_in = in_channels * kernel
        rng = rng or np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (out_channels, in_channels, kernel), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x: Tensor, mode: str = "train") -> Tensor:
        if set(np.unique(self.mask)) - {0.0, 1.0}:
            raise ValueError("masked convolution mask must be binary")
        rows = x.shape[-1]
        masked_w = self.weight * Tensor(self.mask.reshape(1, 1, -1).astype(self.weight.dtype))
        x4 = x.reshape((x.shape[0], x.shape[1], 1, rows))
        w4 = masked_w.reshape((self.out_channels, self.in_channels, 1, self.kernel))
        out = conv2d(x4, w4, self.bias, (1, 1), (0, self.kernel // 2))
        return out.reshape((x.shape[0], self.out_channels, rows))


# -- functional convolutions -------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding) -> Tensor:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    b, c, h, w = x.shape
    f, c_w, kh, kw = weight.shape
    if c != c_w:
        raise ValueError(f"conv2d channel mismatch: input {c}, weight {c_w}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv2d output would be empty for input {(h, w)} kernel {(kh, kw)}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=x.data.dtype)
    for i in range(kh):
        hi = i + sh * (oh - 1) + 1
        for j in range(kw):
            wj = j + sw * (ow - 1) + 1
            cols[:, :, i, j] = xp[:, :, i:hi:sh, j:wj:sw]
    colmat = cols.reshape(b, c * kh * kw, oh * ow)
    wmat = weight.data.reshape(f, c * kh * kw)
    out_data = np.matmul(wmat, colmat).reshape(b, f, oh, ow)
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def backward(g):
        gmat = g.reshape(b, f, oh * ow)
        if weight.requires_grad:
            gw = np.matmul(gmat, colmat.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            accumulate_grad(weight, gw)
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat).reshape(b, c, kh, kw, oh, ow)
            gxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.data.dtype)
            for i in range(kh):
                hi = i + sh * (oh - 1) + 1
                for j in range(kw):
                    wj = j + sw * (ow - 1) + 1
                    gxp[:, :, i:hi:sh, j:wj:sw] += gcols[:, :, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gxp
            accumulate_grad(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out_data, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride, padding) -> Tensor:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    b, c, h, w = x.shape
    c_w, f, kh, kw = weight.shape
    if c != c_w:
        raise ValueError(f"conv_transpose2d channel mismatch: input {c}, weight {c_w}")
    full_h = (h - 1) * sh + kh
    full_w = (w - 1) * sw + kw
    oh = full_h - 2 * ph
    ow = full_w - 2 * pw
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv_transpose2d output would be empty for input {(h, w)}")

    full = np.zeros((b, f, full_h, full_w), dtype=x.data.dtype)
    xm = x.data.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    for i in range(kh):
        hi = i + sh * (h - 1) + 1
        for j in range(kw):
            wj = j + sw * (w - 1) + 1
            contrib = np.matmul(xm, weight.data[:, :, i, j]).reshape(b, h, w, f).transpose(0, 3, 1, 2)
            full[:, :, i:hi:sh, j:wj:sw] += contrib
    out_data = full[:, :, ph:ph + oh, pw:pw + ow] if (ph or pw) else full
    if bias is not None:
        out_data = out_data + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((b, f, full_h, full_w), dtype=x.data.dtype)
        gfull[:, :, ph:ph + oh, pw:pw + ow] = g
        if bias is not None and bias.requires_grad:
            accumulate_grad(bias, g.sum(axis=(0, 2, 3)))
        need_x = x.requires_grad
        need_w = weight.requires_grad
        if need_x:
            gx = np.zeros_like(x.data)
        if need_w:
            gw = np.zeros_like(weight.data)
        for i in range(kh):
            hi = i + sh * (h - 1) + 1
            for j in range(kw):
                wj = j + sw * (w - 1) + 1
                gpatch = gfull[:, :, i:hi:sh, j:wj:sw]
                gm = gpatch.transpose(0, 2, 3, 1).reshape(b * h * w, f)
                if need_x:
                    gx += np.matmul(gm, weight.data[:, :, i, j].T).reshape(b, h, w, c).transpose(0, 3, 1, 2)
                if need_w:
                    gw[:, :, i, j] = np.matmul(xm.T, gm)
        if need_x:
            accumulate_grad(x, gx)
        if need_w:
            accumulate_grad(weight, gw)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_node(out_data, parents, backward)


# -- spec-level dispatch -----------------------------------------------------


def layer_forward(layer: Layer, x, mode: str = "train"):
    """Run any layer kind on an input in the given mode."""
    return layer.forward(x, mode)


def masked_conv_forward(layer: MaskedConv1d, x: Tensor) -> Tensor:
    """Size-preserving causal convolution over the unravelled row stack."""
    if not isinstance(layer, MaskedConv1d):
        raise TypeError("masked_conv_forward requires a MaskedConv1d layer")
    return layer.forward(x)


class ConvBlock(Layer):
    """conv -> batchnorm -> relu, the standard downsampling unit."""

    def __init__(self, in_channels, out_channels, kernel=3, stride=1, padding=1,
                 rng=None, dtype=np.float32, momentum=0.001):
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, padding, rng=rng, dtype=dtype)
        self.norm = BatchNorm(out_channels, momentum=momentum, dtype=dtype)

    def parameters(self):
        return [("conv." + n, t) for n, t in self.conv.parameters()] + \
               [("norm." + n, t) for n, t in self.norm.parameters()]

    def buffers(self):
        return [("norm." + n, a) for n, a in self.norm.buffers()]

    def forward(self, x, mode="train"):
        return relu(self.norm(self.conv(x, mode), mode))


class DeconvBlock(Layer):
    """transpose-conv -> batchnorm -> relu upsampling unit."""

    def __init__(self, in_channels, out_channels, kernel, stride, padding,
                 rng=None, dtype=np.float32, momentum=0.001, activate: bool = True):
        self.deconv = ConvTranspose2d(in_channels, out_channels, kernel, stride, padding, rng=rng, dtype=dtype)
        self.activate = activate
        self.norm = BatchNorm(out_channels, momentum=momentum, dtype=dtype) if activate else None

    def parameters(self):
        out = [("deconv." + n, t) for n, t in self.deconv.parameters()]
        if self.norm is not None:
            out += [("norm." + n, t) for n, t in self.norm.parameters()]
        return out

    def buffers(self):
        if self.norm is None:
            return []
        return [("norm." + n, a) for n, a in self.norm.buffers()]

    def forward(self, x, mode="train"):
        out = self.deconv(x, mode)
        if self.activate:
            out = relu(self.norm(out, mode))
        return out
