"""Layer forward/backward passes for the from-scratch network stack.

Convolution weights use the axis order (C, W, T, H): input channels, kernel
width, output channels, kernel height. Activations are batched NCHW arrays.
Convolution is cross-correlation (no kernel flip) implemented as im2col plus
one matrix multiply, which keeps both training precisions (float32 on the
training path, float64 for gradient verification) on the BLAS fast path.

Each layer caches what its backward pass needs during ``forward`` and returns
``(input_grad, param_grads)`` from ``backward``, where ``param_grads`` maps
parameter names to arrays of matching shape.
"""

from __future__ import annotations

import numpy as np

from .tensor import (
    ShapeMismatchError,
    TuckerFactors,
    mode_multiply,
    tucker_reconstruct,
    unfold,
)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class _BufferPool:
    """Reusable scratch arrays keyed by name.

    Convolution touches tens of megabytes of patch/padding scratch per batch;
    reallocating it every call makes page faults the dominant cost. Buffers
    are zero-initialized once and fully overwritten (or interior-overwritten,
    for padding) on each use.
    """

    def __init__(self):
        self._bufs: dict[str, np.ndarray] = {}

    def get(self, key: str, shape: tuple[int, ...], dtype) -> np.ndarray:
        buf = self._bufs.get(key)
        if buf is None or buf.shape != shape or buf.dtype != dtype:
            buf = np.zeros(shape, dtype=dtype)
            self._bufs[key] = buf
        return buf


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int,
            out: np.ndarray | None = None) -> np.ndarray:
    """Extract sliding (kh, kw) patches of an already-padded NCHW batch.

    Returns a (N, C * kh * kw, OH * OW) array whose middle axis enumerates
    the patch in (C, kh, kw) order; ``out`` of that shape is filled in place
    when given.
    """
    n, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    if out is None:
        out = np.empty((n, c * kh * kw, oh * ow), dtype=x.dtype)
    np.copyto(out.reshape(n, c, kh, kw, oh, ow), windows)
    return out


def _pad_hw(x: np.ndarray, pad_h: int, pad_w: int,
            out: np.ndarray | None = None) -> np.ndarray:
    if pad_h == 0 and pad_w == 0:
        return x
    n, c, h, w = x.shape
    if out is None:
        out = np.zeros((n, c, h + 2 * pad_h, w + 2 * pad_w), dtype=x.dtype)
    # border cells are zero from allocation and never written afterwards
    out[:, :, pad_h : pad_h + h, pad_w : pad_w + w] = x
    return out


def _conv_gemm(x: np.ndarray, wmat: np.ndarray, kh: int, kw: int, stride: int,
               padding: int, pool: _BufferPool | None = None,
               prefix: str = "") -> tuple[np.ndarray, np.ndarray, int, int]:
    """Correlate padded patches of ``x`` with ``wmat`` (C*kh*kw, T).

    Returns (output NTHW, patch array, OH, OW); the patch array is reused by
    the backward pass. With a buffer pool, padding/patch/output scratch is
    recycled across calls.
    """
    n, c, h, w = x.shape
    ph, pw = h + 2 * padding, w + 2 * padding
    oh = (ph - kh) // stride + 1
    ow = (pw - kw) // stride + 1
    t = wmat.shape[1]
    if pool is None:
        xp = _pad_hw(x, padding, padding)
        cols = _im2col(xp, kh, kw, stride)
        out = np.matmul(wmat.T[None, :, :], cols)
    else:
        xp = x if padding == 0 else _pad_hw(
            x, padding, padding, pool.get(prefix + "pad", (n, c, ph, pw), x.dtype))
        cols = _im2col(xp, kh, kw, stride,
                       pool.get(prefix + "cols", (n, c * kh * kw, oh * ow), x.dtype))
        out = np.matmul(wmat.T[None, :, :], cols,
                        out=pool.get(prefix + "out", (n, t, oh * ow), x.dtype))
    return out.reshape(n, t, oh, ow), cols, oh, ow


def _check_conv_input(x: np.ndarray, c_in: int, kh: int, kw: int, stride: int,
                      padding: int) -> None:
    if x.ndim != 4:
        raise ShapeMismatchError(f"conv input must be NCHW, got shape {x.shape}")
    if x.shape[1] != c_in:
        raise ShapeMismatchError(
            f"input has {x.shape[1]} channels, layer expects {c_in}"
        )
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeMismatchError(
            f"spatial size {x.shape[2:]} too small for kernel ({kh}, {kw}) "
            f"with padding {padding}"
        )


def _conv_input_grad(dout: np.ndarray, weight: np.ndarray, in_hw: tuple[int, int],
                     stride: int, padding: int,
                     pool: _BufferPool | None = None) -> np.ndarray:
    """Gradient w.r.t. the conv input, computed as another correlation.

    The upstream gradient is dilated by the stride, padded by kernel-1-padding,
    and correlated with the spatially flipped kernel with in/out channels
    swapped. All gemm, no scatter loops.
    """
    c, kw, t, kh = weight.shape
    h_in, w_in = in_hw
    n, _, oh, ow = dout.shape
    dil_h = h_in + 2 * padding - kh + 1
    dil_w = w_in + 2 * padding - kw + 1
    if stride == 1 and (dil_h, dil_w) == (oh, ow):
        dil = dout
    else:
        dil = (pool.get("bw_dil", (n, t, dil_h, dil_w), dout.dtype) if pool
               else np.zeros((n, t, dil_h, dil_w), dtype=dout.dtype))
        dil[:, :, : (oh - 1) * stride + 1 : stride,
            : (ow - 1) * stride + 1 : stride] = dout
    # (C, W, T, H) -> (T, H, W, C), flipped over both spatial axes
    wflip = weight[:, ::-1, :, ::-1].transpose(2, 3, 1, 0)
    wmat = np.ascontiguousarray(wflip.reshape(t * kh * kw, c))
    dx_full, _, _, _ = _conv_gemm(dil, wmat, kh, kw, 1, kh - 1, pool, "bw_")
    return dx_full[:, :, padding : padding + h_in, padding : padding + w_in]


def _weight_matrix(weight: np.ndarray) -> np.ndarray:
    """(C, W, T, H) kernel as a (C*KH*KW, T) gemm operand matching _im2col."""
    c, kw, t, kh = weight.shape
    return np.ascontiguousarray(weight.transpose(0, 3, 1, 2).reshape(c * kh * kw, t))


def _weight_grad_from_cols(cols: np.ndarray, dout: np.ndarray,
                           kernel_shape: tuple[int, int, int, int]) -> np.ndarray:
    c, kw, t, kh = kernel_shape
    n = dout.shape[0]
    dout_mat = dout.reshape(n, t, -1)
    dwmat = np.matmul(cols, dout_mat.transpose(0, 2, 1)).sum(axis=0)
    return dwmat.reshape(c, kh, kw, t).transpose(0, 2, 3, 1)


class Conv2d:
    """Dense 2-D convolution with a (C, W, T, H) weight tensor."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1,
                 padding: int = 0):
        if weight.ndim != 4:
            raise ShapeMismatchError(f"conv weight must be rank 4, got {weight.ndim}")
        if bias.shape != (weight.shape[2],):
            raise ShapeMismatchError(
                f"bias length {bias.shape} does not match {weight.shape[2]} output channels"
            )
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self._cache = None
        self._pool = _BufferPool()

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
             stride: int = 1, padding: int = 0, dtype=np.float32) -> "Conv2d":
        """Fan-in-scaled uniform init: bound = sqrt(1 / (C * KH * KW))."""
        fan_in = c_in * kernel * kernel
        bound = np.sqrt(1.0 / fan_in)
        weight = rng.uniform(-bound, bound, size=(c_in, kernel, c_out, kernel))
        return cls(weight.astype(dtype), np.zeros(c_out, dtype=dtype),
                   stride=stride, padding=padding)

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, kw, t, kh = self.weight.shape
        _check_conv_input(x, c, kh, kw, self.stride, self.padding)
        out, cols, _, _ = _conv_gemm(x, _weight_matrix(self.weight), kh, kw,
                                     self.stride, self.padding, self._pool, "fw_")
        out += self.bias[None, :, None, None]
        self._cache = (cols, x.shape)
        return out

    def backward(self, dout: np.ndarray,
                 need_input_grad: bool = True) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        cols, x_shape = self._cache
        dw = _weight_grad_from_cols(cols, dout, self.weight.shape)
        db = dout.sum(axis=(0, 2, 3))
        dx = None
        if need_input_grad:
            dx = _conv_input_grad(dout, self.weight, x_shape[2:], self.stride,
                                  self.padding, self._pool)
        return dx, {"weight": dw, "bias": db}


class TuckerConv2d:
    """Convolution whose kernel lives as trainable Tucker factors.

    The forward pass contracts the core with its four factor matrices to
    assemble the dense (C, W, T, H) kernel, then runs one ordinary
    convolution. Backward chains the dense kernel gradient through the
    multilinear assembly, yielding gradients for the core and each factor.
    """

    def __init__(self, factors: TuckerFactors, bias: np.ndarray, stride: int = 1,
                 padding: int = 0):
        factors.validate()
        c, w, t, h = factors.full_shape
        if bias.shape != (t,):
            raise ShapeMismatchError(
                f"bias length {bias.shape} does not match {t} output channels"
            )
        if stride < 1 or padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        self.factors = factors
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self._cache = None
        self._pool = _BufferPool()

    @classmethod
    def init(cls, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
             ranks: tuple[int, int, int, int], stride: int = 1, padding: int = 0,
             dtype=np.float32) -> "TuckerConv2d":
        """Orthonormal factors (QR of a Gaussian draw) plus a Gaussian core
        scaled so the assembled kernel matches the dense layer's init
        variance."""
        dims = (c_in, kernel, c_out, kernel)
        mats = []
        for dim, r in zip(dims, ranks):
            if not 1 <= r <= dim:
                raise ShapeMismatchError(f"rank {r} outside valid range 1..{dim}")
            q, rr = np.linalg.qr(rng.standard_normal((dim, r)))
            q = q * np.sign(np.where(np.diag(rr) == 0, 1.0, np.diag(rr)))
            mats.append(q)
        fan_in = c_in * kernel * kernel
        dense_var = 1.0 / (3.0 * fan_in)
        rank_prod = int(np.prod(ranks))
        core_std = np.sqrt(dense_var * np.prod(dims) / rank_prod)
        core = rng.standard_normal(ranks) * core_std
        factors = TuckerFactors(core=core.astype(dtype),
                                factors=tuple(m.astype(dtype) for m in mats))
        return cls(factors, np.zeros(c_out, dtype=dtype), stride=stride,
                   padding=padding)

    def params(self) -> dict[str, np.ndarray]:
        out = {"core": self.factors.core}
        for i, f in enumerate(self.factors.factors):
            out[f"factor{i}"] = f
        out["bias"] = self.bias
        return out

    def assembled_kernel(self) -> np.ndarray:
        return tucker_reconstruct(self.factors)

    def forward(self, x: np.ndarray) -> np.ndarray:
        kernel = self.assembled_kernel()
        c, kw, t, kh = kernel.shape
        _check_conv_input(x, c, kh, kw, self.stride, self.padding)
        out, cols, _, _ = _conv_gemm(x, _weight_matrix(kernel), kh, kw,
                                     self.stride, self.padding, self._pool, "fw_")
        out += self.bias[None, :, None, None]
        self._cache = (cols, x.shape, kernel)
        return out

    def backward(self, dout: np.ndarray,
                 need_input_grad: bool = True) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        cols, x_shape, kernel = self._cache
        dkernel = _weight_grad_from_cols(cols, dout, kernel.shape)
        db = dout.sum(axis=(0, 2, 3))
        dx = None
        if need_input_grad:
            dx = _conv_input_grad(dout, kernel, x_shape[2:], self.stride,
                                  self.padding, self._pool)

        core = self.factors.core
        facs = self.factors.factors
        grads: dict[str, np.ndarray] = {}
        # factor i gradient: unfold the kernel gradient along mode i against
        # the partial assembly that uses every factor except i
        for i in range(4):
            partial = core
            for j, f in enumerate(facs):
                if j != i:
                    partial = mode_multiply(partial, f, j)
            grads[f"factor{i}"] = unfold(dkernel, i) @ unfold(partial, i).T
        dcore = dkernel
        for j, f in enumerate(facs):
            dcore = mode_multiply(dcore, f.T, j)
        grads["core"] = dcore
        grads["bias"] = db
        return dx, grads


class MaxPool2x2:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    The four window positions are compared as strided views; ties resolve to
    the first position in row-major window order, matching argmax semantics.
    """

    def __init__(self):
        self._cache = None
        self._pool = _BufferPool()

    def params(self) -> dict[str, np.ndarray]:
        return {}

    @staticmethod
    def _views(x: np.ndarray, oh: int, ow: int):
        return (
            x[:, :, 0 : oh * 2 : 2, 0 : ow * 2 : 2],
            x[:, :, 0 : oh * 2 : 2, 1 : ow * 2 : 2],
            x[:, :, 1 : oh * 2 : 2, 0 : ow * 2 : 2],
            x[:, :, 1 : oh * 2 : 2, 1 : ow * 2 : 2],
        )

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        oh, ow = h // 2, w // 2
        if oh == 0 or ow == 0:
            raise ShapeMismatchError(f"spatial size {(h, w)} too small for 2x2 pooling")
        views = self._views(x, oh, ow)
        out = np.maximum(views[0], views[1])
        np.maximum(out, views[2], out=out)
        np.maximum(out, views[3], out=out)
        self._cache = (x, out, x.shape)
        return out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        x, out, x_shape = self._cache
        n, c, h, w = x_shape
        oh, ow = h // 2, w // 2
        dx = self._pool.get("dx", x_shape, dout.dtype)
        dx[...] = 0.0
        taken = np.zeros(out.shape, dtype=bool)
        for xv, dv in zip(self._views(x, oh, ow), self._views(dx, oh, ow)):
            win = (xv == out) & ~taken
            dv[...] = np.where(win, dout, 0)
            taken |= win
        return dx, {}


class ReLU:
    def __init__(self):
        self._out = None
        self._pool = _BufferPool()

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = self._pool.get("out", x.shape, x.dtype)
        np.maximum(x, 0, out=out)
        self._out = out
        return out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        # out > 0 exactly where x > 0, so the cached output doubles as mask
        dx = self._pool.get("dx", dout.shape, dout.dtype)
        np.multiply(dout, self._out > 0, out=dx)
        return dx, {}


class Flatten:
    def __init__(self):
        self._shape = None

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        return dout.reshape(self._shape), {}


class Linear:
    """Fully connected layer, ``y = x @ weight + bias``."""

    def __init__(self, weight: np.ndarray, bias: np.ndarray):
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise ShapeMismatchError(
                f"inconsistent linear shapes: weight {weight.shape}, bias {bias.shape}"
            )
        self.weight = weight
        self.bias = bias
        self._x = None

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int,
             dtype=np.float32) -> "Linear":
        bound = np.sqrt(1.0 / n_in)
        weight = rng.uniform(-bound, bound, size=(n_in, n_out))
        return cls(weight.astype(dtype), np.zeros(n_out, dtype=dtype))

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.weight.shape[0]:
            raise ShapeMismatchError(
                f"linear input {x.shape} does not match weight {self.weight.shape}"
            )
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        dw = self._x.T @ dout
        db = dout.sum(axis=0)
        dx = dout @ self.weight.T
        return dx, {"weight": dw, "bias": db}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray,
                          labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy loss over the batch plus per-class probabilities."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(
            f"logits {logits.shape} incompatible with labels {labels.shape}"
        )
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(
            f"label out of range for {logits.shape[1]} classes: "
            f"[{labels.min()}, {labels.max()}]"
        )
    probs = softmax(logits)
    n = logits.shape[0]
    picked = np.clip(probs[np.arange(n), labels], 1e-30, None)
    loss = float(-np.mean(np.log(picked)))
    return loss, probs


def softmax_cross_entropy_backward(probs: np.ndarray,
                                   labels: np.ndarray) -> np.ndarray:
    """Gradient of the mean cross-entropy loss w.r.t. the logits."""
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1.0
    return dlogits / n
