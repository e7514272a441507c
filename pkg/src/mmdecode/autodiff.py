"""Minimal reverse-mode autodiff over dense numpy arrays.

Covers exactly the operations the twin-module decoder needs: dilated 1-D
convolutions (dense and rank-1 separable), ReLU, channel-wise cosine
similarity, a bias-free linear readout, sigmoid, binary cross-entropy and
the reductions used for batch losses.

Array convention: timeseries tensors are (channels, time) or batched
(batch, channels, time). Backward rules accumulate into ``Tensor.grad``;
``Tensor.backward`` visits each recorded node exactly once in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Above this many window elements the stacked-GEMM convolution path stops
# paying for its concatenate copy; fall back to per-tap einsum.
_STACK_LIMIT = 4_000_000

_COS_EPS = 1e-12   # zero-norm guard in cosine normalization
_BCE_EPS = 1e-7    # probability clamp in the cross-entropy


class Tensor:
    """A dense array plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("tensor data must be finite")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from this (scalar) tensor."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Promote (C, T) to (1, C, T); report whether a batch axis was added."""
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"expected a (C, T) or (B, C, T) array, got shape {x.shape}")


@dataclass(frozen=True)
class ConvLayerSpec:
    """Shape/dilation description of one convolutional layer."""

    in_channels: int
    out_channels: int = 16
    kernel_size: int = 3
    dilation: int = 1
    separable: bool = False

    def __post_init__(self):
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be >= 1")

    @property
    def min_input_length(self) -> int:
        return (self.kernel_size - 1) * self.dilation + 1

    def output_length(self, t: int) -> int:
        if t < self.min_input_length:
            raise ValueError(
                f"input length {t} too short: dilated kernel needs at least "
                f"{self.min_input_length} samples"
            )
        return t - (self.kernel_size - 1) * self.dilation


def _corr_taps(x: np.ndarray, w: np.ndarray, dilation: int) -> np.ndarray:
    """out[b,o,t] = sum_{c,k} w[o,c,k] * x[b,c,t + k*dilation]."""
    B, C, T = x.shape
    O, _, K = w.shape
    tp = T - (K - 1) * dilation
    if B * C * K * tp <= _STACK_LIMIT:
        cols = np.concatenate([x[:, :, k * dilation:k * dilation + tp] for k in range(K)], axis=1)
        return np.matmul(w.transpose(0, 2, 1).reshape(O, K * C), cols)
    out = np.zeros((B, O, tp), dtype=x.dtype)
    for k in range(K):
        out += np.einsum("oc,bct->bot", w[:, :, k], x[:, :, k * dilation:k * dilation + tp], optimize=True)
    return out


def conv1d_dilated(x: Tensor, spec: ConvLayerSpec, weights: Tensor, bias: Tensor) -> Tensor:
    """Unpadded dilated 1-D convolution; output time axis shrinks by (K-1)*dilation."""
    x, weights, bias = _as_tensor(x), _as_tensor(weights), _as_tensor(bias)
    xv, squeeze = _batched(x.data)
    w, b, d = weights.data, bias.data, spec.dilation
    if w.shape != (spec.out_channels, spec.in_channels, spec.kernel_size):
        raise ValueError(f"weight shape {w.shape} does not match layer spec {spec}")
    if b.shape != (spec.out_channels,):
        raise ValueError(f"bias shape {b.shape} does not match layer spec {spec}")
    if xv.shape[1] != spec.in_channels:
        raise ValueError(f"input has {xv.shape[1]} channels, layer expects {spec.in_channels}")
    tp = spec.output_length(xv.shape[2])

    out = _corr_taps(xv, w, d) + b[None, :, None]

    def backward(g):
        gv = g[None] if squeeze else g
        if weights.requires_grad:
            gw = np.empty_like(w)
            for k in range(spec.kernel_size):
                gw[:, :, k] = np.einsum("bot,bct->oc", gv, xv[:, :, k * d:k * d + tp], optimize=True)
            _accumulate(weights, gw)
        if bias.requires_grad:
            _accumulate(bias, gv.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = np.zeros_like(xv)
            for k in range(spec.kernel_size):
                gx[:, :, k * d:k * d + tp] += np.einsum("oc,bot->bct", w[:, :, k], gv, optimize=True)
            _accumulate(x, gx[0] if squeeze else gx)

    return _result(out[0] if squeeze else out, (x, weights, bias), backward)


def separable_conv1d(x: Tensor, spec: ConvLayerSpec, spatial: Tensor, temporal: Tensor, bias: Tensor) -> Tensor:
    """Dilated convolution with rank-1 kernels w[o,c,k] = spatial[o,c]*temporal[o,k].

    Computed as a channel projection followed by a per-filter (depthwise)
    temporal convolution, which is algebraically identical to the dense
    convolution with the expanded weights.
    """
    x, spatial, temporal, bias = map(_as_tensor, (x, spatial, temporal, bias))
    xv, squeeze = _batched(x.data)
    s, t, b, d = spatial.data, temporal.data, bias.data, spec.dilation
    if s.shape != (spec.out_channels, spec.in_channels):
        raise ValueError(f"spatial factor shape {s.shape} does not match layer spec {spec}")
    if t.shape != (spec.out_channels, spec.kernel_size):
        raise ValueError(f"temporal factor shape {t.shape} does not match layer spec {spec}")
    if xv.shape[1] != spec.in_channels:
        raise ValueError(f"input has {xv.shape[1]} channels, layer expects {spec.in_channels}")
    tp = spec.output_length(xv.shape[2])
    K = spec.kernel_size

    u = np.einsum("oc,bct->bot", s, xv, optimize=True)   # (B, O, T)
    out = np.zeros((u.shape[0], spec.out_channels, tp), dtype=u.dtype)
    for k in range(K):
        out += t[None, :, k:k + 1] * u[:, :, k * d:k * d + tp]
    out += b[None, :, None]

    def backward(g):
        gv = g[None] if squeeze else g
        if temporal.requires_grad:
            gt = np.empty_like(t)
            for k in range(K):
                gt[:, k] = np.einsum("bot,bot->o", gv, u[:, :, k * d:k * d + tp], optimize=True)
            _accumulate(temporal, gt)
        gu = np.zeros_like(u)
        for k in range(K):
            gu[:, :, k * d:k * d + tp] += t[None, :, k:k + 1] * gv
        if spatial.requires_grad:
            _accumulate(spatial, np.einsum("bot,bct->oc", gu, xv, optimize=True))
        if bias.requires_grad:
            _accumulate(bias, gv.sum(axis=(0, 2)))
        if x.requires_grad:
            gx = np.einsum("oc,bot->bct", s, gu, optimize=True)
            _accumulate(x, gx[0] if squeeze else gx)

    return _result(out[0] if squeeze else out, (x, spatial, temporal, bias), backward)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _result(out, (x,), backward)


def cosine_similarity_matrix(a: Tensor, b: Tensor) -> Tensor:
    """S[i, j] = <a_i, b_j> / (max(|a_i|, eps) * max(|b_j|, eps)) over the time axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    av, sq_a = _batched(a.data)
    bv, sq_b = _batched(b.data)
    if av.shape != bv.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    squeeze = sq_a and sq_b

    na = np.maximum(np.linalg.norm(av, axis=2, keepdims=True), _COS_EPS)
    nb = np.maximum(np.linalg.norm(bv, axis=2, keepdims=True), _COS_EPS)
    ah, bh = av / na, bv / nb
    s = np.matmul(ah, bh.transpose(0, 2, 1))

    def backward(g):
        gv = g[None] if squeeze else g

        def through_norm(gh, h, n, raw):
            # d(raw/n)/draw with n = max(|raw|, eps); the radial term only
            # exists where the norm is active (above the guard).
            active = (np.linalg.norm(raw, axis=2, keepdims=True) > _COS_EPS)
            radial = np.sum(gh * h, axis=2, keepdims=True) * h * active
            return (gh - radial) / n

        if a.requires_grad:
            ga = through_norm(np.matmul(gv, bh), ah, na, av)
            _accumulate(a, ga[0] if squeeze else ga)
        if b.requires_grad:
            gb = through_norm(np.matmul(gv.transpose(0, 2, 1), ah), bh, nb, bv)
            _accumulate(b, gb[0] if squeeze else gb)

    return _result(s[0] if squeeze else s, (a, b), backward)


def linear_readout(d: Tensor, v: Tensor) -> Tensor:
    """Bias-free linear combination: logit = sum_i v[i] * d[..., i]."""
    d, v = _as_tensor(d), _as_tensor(v)
    if d.data.shape[-1] != v.data.shape[0] or v.data.ndim != 1:
        raise ValueError(f"readout shapes incompatible: {d.data.shape} vs {v.data.shape}")
    out = d.data @ v.data

    def backward(g):
        if d.requires_grad:
            _accumulate(d, np.multiply.outer(g, v.data) if d.data.ndim > 1 else g * v.data)
        if v.requires_grad:
            gv = d.data.T @ g if d.data.ndim > 1 else g * d.data
            _accumulate(v, gv)

    return _result(out, (d, v), backward)


def sigmoid(z: Tensor) -> Tensor:
    z = _as_tensor(z)
    zd = z.data
    out = np.empty_like(zd)
    pos = zd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-zd[pos]))
    ez = np.exp(zd[~pos])
    out[~pos] = ez / (1.0 + ez)

    def backward(g):
        _accumulate(z, g * out * (1.0 - out))

    return _result(out, (z,), backward)


def bce_loss(y_hat: Tensor, y) -> Tensor:
    """Binary cross-entropy, elementwise; probabilities clamped to [1e-7, 1-1e-7]."""
    y_hat = _as_tensor(y_hat)
    yv = np.asarray(y, dtype=y_hat.data.dtype)
    if not np.all((yv == 0) | (yv == 1)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(y_hat.data, _BCE_EPS, 1.0 - _BCE_EPS)
    out = -(yv * np.log(p) + (1.0 - yv) * np.log1p(-p))

    def backward(g):
        inside = (y_hat.data > _BCE_EPS) & (y_hat.data < 1.0 - _BCE_EPS)
        _accumulate(y_hat, g * inside * (p - yv) / (p * (1.0 - p)))

    return _result(out, (y_hat,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data + b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data - b.data

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ValueError(f"shape mismatch: {a.data.shape} vs {b.data.shape}")
    out = a.data * b.data

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _result(out, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = x.data.reshape(shape)

    def backward(g):
        _accumulate(x, g.reshape(x.data.shape))

    return _result(out, (x,), backward)


def tsum(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    return _result(out, (x,), backward)


def mean(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def backward(g):
        _accumulate(x, np.full(x.data.shape, g / x.data.size, dtype=x.data.dtype))

    return _result(out, (x,), backward)


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` must be a zero-argument callable returning a scalar Tensor built
    from ``params`` (a sequence of Tensors, float64 recommended). Returns
    the maximum relative error over every parameter element.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(fd), 1e-8)
            worst = max(worst, abs(gflat[i] - fd) / denom)
    return worst
