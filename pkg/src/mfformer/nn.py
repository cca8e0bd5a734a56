"""Layers with learnable parameters and their differentiable kernels.

All spatial layers are channels-first: ``(batch, channels, *spatial)`` with
two or three spatial axes.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import math
import os
from typing import Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import mft
from .tensor import Tensor, contract_axis

LEAKY_SLOPE = 0.01

_REGION_LOG: list | None = None


@contextlib.contextmanager
def track_regions():
    """Collect the active piece of every LeakyReLU and max pool evaluated
    inside the block; two evaluations with equal logs lie in the same
    piecewise-smooth region."""
    global _REGION_LOG
    prev, _REGION_LOG = _REGION_LOG, []
    try:
        yield _REGION_LOG
    finally:
        _REGION_LOG = prev


class Parameter(Tensor):
    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)

    def __repr__(self):
        return f"Parameter(shape={self.shape})"


class Module:
    """Minimal container: parameters, buffers and submodules are discovered
    from instance attributes (lists/tuples of modules included)."""

    training = True

    def __init__(self):
        self._buffers: dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in getattr(self, "_buffers", {}).items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        owners = dict(self._buffer_owners())
        expected = set(params) | set(owners)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for name, value in state.items():
            value = np.asarray(value)
            if name in params:
                p = params[name]
                if p.shape != value.shape:
                    raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
                p.data = np.array(value, dtype=p.dtype)
            else:
                module, key = owners[name]
                module._buffers[key] = np.array(value, dtype=np.float64)

    def _buffer_owners(self, prefix: str = ""):
        for key in getattr(self, "_buffers", {}):
            yield prefix + key, (self, key)
        for name, child in self.children():
            yield from child._buffer_owners(f"{prefix}{name}.")

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------------------
# functional kernels


def _check_spatial(x: Tensor, name: str) -> int:
    n = x.ndim - 2
    if n not in (1, 2, 3):
        raise ValueError(f"{name} expects (batch, channels, *spatial) with 1-3 spatial axes, got {x.shape}")
    return n


def conv_nd(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero ("same") padding."""
    n = _check_spatial(x, "conv_nd")
    if weight.ndim != n + 2:
        raise ValueError(f"weight rank {weight.ndim} does not match {n} spatial axes")
    cout, cin = weight.shape[:2]
    ksize = weight.shape[2:]
    if x.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {cin}")
    if any(k % 2 == 0 for k in ksize):
        raise ValueError(f"kernel extents must be odd, got {ksize}")
    pads = [(k - 1) // 2 for k in ksize]
    batch = x.shape[0]
    spatial = x.shape[2:]
    n_vox = int(np.prod(spatial))

    xl = np.moveaxis(x.data, 1, -1)
    xp = np.pad(xl, [(0, 0)] + [(p, p) for p in pads] + [(0, 0)])
    win = sliding_window_view(xp, ksize, axis=tuple(range(1, n + 1)))
    # win: (B, *S, Cin, *K); rows ordered to match weight.reshape(cout, -1)
    cols = win.reshape(batch * n_vox, cin * int(np.prod(ksize)))
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.moveaxis(out.reshape((batch,) + spatial + (cout,)), -1, 1)

    def backward(g):
        gl = np.moveaxis(g, 1, -1).reshape(batch * n_vox, cout)
        gw = (gl.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gl.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            kp = int(np.prod(ksize))
            # weight columns reordered (offset, cin) so each offset slice is a view
            wperm = weight.data.reshape(cout, cin, kp).transpose(0, 2, 1).reshape(cout, kp * cin)
            gcols = (gl @ wperm).reshape((batch,) + spatial + (kp, cin))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for j, off in enumerate(itertools.product(*(range(k) for k in ksize))):
                idx = (slice(None),) + tuple(slice(o, o + s) for o, s in zip(off, spatial))
                gxp[idx] += gcols[..., j, :]
            inner = (slice(None),) + tuple(slice(p, p + s) for p, s in zip(pads, spatial))
            gx = np.moveaxis(gxp[inner], -1, 1)
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    if bias is None:
        return Tensor._from_op(out, "conv_nd", parents, lambda g: backward(g)[:2])
    return Tensor._from_op(out, "conv_nd", parents, backward)


def batchnorm_nd(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization.  In training mode the running statistics
    arrays are updated in place."""
    if x.ndim < 2:
        raise ValueError(f"batchnorm expects (batch, channels, ...), got {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    count = x.size // x.shape[1]
    g_ = gamma.data.reshape(bshape)

    if training:
        if count < 2:
            raise ValueError("batchnorm in training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
        xhat = xc * inv
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.reshape(-1)
        running_var *= 1.0 - momentum
        running_var += momentum * var.reshape(-1) * (count / (count - 1))

        def backward(gout):
            dxhat = gout * g_
            gx = inv / count * (
                count * dxhat
                - dxhat.sum(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
            )
            return gx, (gout * xhat).sum(axis=axes), gout.sum(axis=axes)
    else:
        inv = (1.0 / np.sqrt(running_var.reshape(bshape) + eps)).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * inv

        def backward(gout):
            return gout * g_ * inv, (gout * xhat).sum(axis=axes), gout.sum(axis=axes)

    out = xhat * g_ + beta.data.reshape(bshape)
    return Tensor._from_op(out, "batchnorm", (x, gamma, beta), backward)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    neg = x.data < 0
    if _REGION_LOG is not None:
        _REGION_LOG.append(np.packbits(neg).tobytes())
    out = np.where(neg, x.data * slope, x.data)

    def backward(g):
        return (np.where(neg, g * slope, g),)

    return Tensor._from_op(out, "leaky_relu", (x,), backward)


def maxpool_nd(x: Tensor, window: int | Sequence[int] = 2) -> Tensor:
    """Non-overlapping max pooling, stride equal to the window.

    Trailing elements that do not fill a window are dropped; gradient goes
    to the first maximum in row-major window order.
    """
    n = _check_spatial(x, "maxpool_nd")
    windows = (window,) * n if isinstance(window, int) else tuple(window)
    if len(windows) != n:
        raise ValueError(f"need {n} window extents, got {windows}")
    spatial = x.shape[2:]
    for s, w in zip(spatial, windows):
        if w < 1 or s < w:
            raise ValueError(f"spatial extent {s} too small for pooling window {w}")
    outs = tuple(s // w for s, w in zip(spatial, windows))
    crop = (slice(None), slice(None)) + tuple(slice(0, o * w) for o, w in zip(outs, windows))
    xc = x.data[crop]
    split_shape = x.shape[:2] + tuple(itertools.chain.from_iterable(zip(outs, windows)))
    perm = (0, 1) + tuple(2 + 2 * i for i in range(n)) + tuple(3 + 2 * i for i in range(n))
    blocks = np.transpose(xc.reshape(split_shape), perm)
    flat = blocks.reshape(x.shape[:2] + outs + (-1,))
    arg = flat.argmax(axis=-1)
    if _REGION_LOG is not None:
        _REGION_LOG.append(arg.tobytes())
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    in_shape = x.shape
    inv_perm = tuple(np.argsort(perm))

    def backward(g):
        gflat = np.zeros(flat.shape, dtype=g.dtype)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gblocks = np.transpose(gflat.reshape(blocks.shape), inv_perm).reshape(xc.shape)
        gx = np.zeros(in_shape, dtype=g.dtype)
        gx[crop] = gblocks
        return (gx,)

    return Tensor._from_op(out, "maxpool", (x,), backward)


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights with the half-pixel coordinate rule."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        src = min(max(src, 0.0), n_in - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def _apply_separable(x: Tensor, out_extents, builder, name: str) -> Tensor:
    n = _check_spatial(x, name)
    out_extents = tuple(int(o) for o in out_extents)
    if len(out_extents) != n:
        raise ValueError(f"{name}: need {n} output extents, got {out_extents}")
    if any(o < 1 for o in out_extents):
        raise ValueError(f"{name}: output extents must be >= 1, got {out_extents}")
    y = x
    for i, (s, o) in enumerate(zip(x.shape[2:], out_extents)):
        if s != o:
            y = contract_axis(y, builder(s, o), axis=2 + i)
    return y


def adaptive_avg_pool_nd(x: Tensor, out_extents, allow_upsample: bool = False) -> Tensor:
    """Average input cells ``[floor(i*in/out), ceil((i+1)*in/out))`` per axis.

    ``out > in`` is rejected unless ``allow_upsample`` is set, in which case
    each output cell averages the one or two input cells it overlaps.
    """
    if not allow_upsample:
        for s, o in zip(x.shape[2:], out_extents):
            if o > s:
                raise ValueError(f"adaptive_avg_pool: output extent {o} exceeds input extent {s}")
    return _apply_separable(x, out_extents, adaptive_pool_matrix, "adaptive_avg_pool_nd")


def interpolate_nd(x: Tensor, out_extents) -> Tensor:
    """Bi/trilinear resize (align_corners=False convention)."""
    return _apply_separable(x, out_extents, interpolation_matrix, "interpolate_nd")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    return out + bias if bias is not None else out


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, k = logits.shape
    if labels.shape[0] != b:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = np.mean(lse - z[np.arange(b), labels])
    probs = np.exp(z - lse[:, None])

    def backward(g):
        d = probs.copy()
        d[np.arange(b), labels] -= 1.0
        return (d * (g.item() / b),)

    return Tensor._from_op(np.asarray(loss), "cross_entropy", (logits,), backward)


# ---------------------------------------------------------------------------
# layers


def kaiming_std(fan_in: int, slope: float = LEAKY_SLOPE) -> float:
    return math.sqrt(2.0 / ((1.0 + slope**2) * fan_in))


class ConvNd(Module):
    def __init__(self, n_dims: int, in_ch: int, out_ch: int, kernel: int = 3, rng=None):
        super().__init__()
        if kernel % 2 == 0:
            raise ValueError(f"kernel extent must be odd, got {kernel}")
        rng = rng if rng is not None else np.random.default_rng(0)
        shape = (out_ch, in_ch) + (kernel,) * n_dims
        fan_in = in_ch * kernel**n_dims
        self.n_dims = n_dims
        self.weight = Parameter(rng.normal(0.0, kaiming_std(fan_in), size=shape))
        self.bias = Parameter(np.zeros(out_ch))

    def forward(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def forward(self, x: Tensor) -> Tensor:
        return batchnorm_nd(
            x, self.gamma, self.beta,
            self._buffers["running_mean"], self._buffers["running_var"],
            training=self.training, momentum=self.momentum, eps=self.eps,
        )


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(rng.normal(0.0, kaiming_std(in_features), size=(out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class ConvBlock(Module):
    """conv -> batchnorm -> LeakyReLU, optionally followed by 2x max pooling.

    Spatial axes already reduced to extent 1 are not pooled further.
    """

    def __init__(self, n_dims: int, in_ch: int, out_ch: int, kernel: int = 3, pool: bool = True,
                 slope: float = LEAKY_SLOPE, bn_eps: float = 1e-5, bn_momentum: float = 0.1, rng=None):
        super().__init__()
        self.conv = ConvNd(n_dims, in_ch, out_ch, kernel, rng=rng)
        self.bn = BatchNorm(out_ch, eps=bn_eps, momentum=bn_momentum)
        self.pool = pool
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        y = leaky_relu(self.bn(self.conv(x)), self.slope)
        if self.pool:
            y = maxpool_nd(y, tuple(2 if s >= 2 else 1 for s in y.shape[2:]))
        return y


class MLP(Module):
    def __init__(self, sizes: Sequence[int], slope: float = LEAKY_SLOPE, rng=None):
        super().__init__()
        self.layers = [Linear(a, b, rng=rng) for a, b in zip(sizes[:-1], sizes[1:])]
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = leaky_relu(x, self.slope)
        return x


# ---------------------------------------------------------------------------
# checkpoints

INDEX_FILE = "index.json"


def save_checkpoint(module: Module, directory: str | os.PathLike, dtype=np.float64, extra: dict | None = None) -> None:
    """Write every parameter and buffer as an MFT1 file plus a JSON index."""
    os.makedirs(directory, exist_ok=True)
    index = {}
    for i, (name, value) in enumerate(sorted(module.state_dict().items())):
        fname = f"t{i:04d}.mft"
        mft.save(os.path.join(directory, fname), value, dtype=dtype)
        index[name] = fname
    doc = {"tensors": index}
    if extra:
        doc.update(extra)
    with open(os.path.join(directory, INDEX_FILE), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def read_checkpoint(directory: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(directory, INDEX_FILE)) as fh:
        doc = json.load(fh)
    state = {name: mft.load(os.path.join(directory, fname)) for name, fname in doc["tensors"].items()}
    return state, doc


def load_checkpoint(module: Module, directory: str | os.PathLike) -> dict:
    state, doc = read_checkpoint(directory)
    module.load_state_dict(state)
    return doc
