"""Minimal reverse-mode autodiff over dense float64 arrays.

The op set is exactly what the forecaster's forward pass and its training
loss need: affine maps, kernel-3 "same" 1-D convolutions, GELU, average
pooling, layer normalization, centered moving averages, a one-sided real
FFT, and a handful of elementwise/reduction helpers.

Gradients are recorded on an explicit :class:`Tape`. Ops append nodes in
execution order; ``backward`` replays the adjoint rules in exact reverse
insertion order, which makes replay deterministic. Only leaf tensors
(those not produced by an op) accumulate into ``.grad``; repeated
``backward`` calls over the same tape are additive.

All math is double precision. Rank is capped at 3: every op accepts the
rank documented in its contract plus one optional leading batch axis.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import DimensionError, EvaluationError, ParameterError, UsageError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TANH_C = math.sqrt(2.0 / math.pi)

LAYER_NORM_EPS = 1e-5


class Tensor:
    """Dense real array (rank <= 3) that can participate in a gradient tape."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise DimensionError(f"rank {arr.ndim} > 3 not supported (shape {arr.shape})")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class ComplexSpectrum:
    """One-sided spectrum of a real sequence: paired (real, imaginary) tensors.

    ``n`` is the length of the originating time-domain signal; the bin count
    along the last axis is ``n // 2 + 1``.
    """

    __slots__ = ("real", "imag", "n")

    def __init__(self, real: Tensor, imag: Tensor, n: int):
        self.real = real
        self.imag = imag
        self.n = n

    @property
    def n_bins(self) -> int:
        return self.real.shape[-1]


class _Node:
    __slots__ = ("inputs", "outputs", "bw")

    def __init__(self, inputs, outputs, bw):
        self.inputs = inputs
        self.outputs = outputs
        self.bw = bw


class Tape:
    """Append-only record of operations; replayed in reverse for adjoints."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
               bw: Callable[[list], list]) -> None:
        """Append a node. ``bw`` maps output cotangents to input cotangents.

        Cotangents are plain ndarrays; a ``None`` entry means "no gradient
        flows here". Exposed so tests can register custom adjoints.
        """
        self.nodes.append(_Node(tuple(inputs), tuple(outputs), bw))


_ACTIVE: list[Tape] = []


def _tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _make_output(data: np.ndarray, inputs: Sequence[Tensor]) -> tuple[Tensor, Tape | None]:
    """Create an op output; it requires grad only if recorded on a live tape."""
    tape = _tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        out.is_leaf = False
        return out, tape
    return out, None


def backward(tape: Tape, seed: Tensor) -> None:
    """Accumulate adjoints of ``seed`` onto every requires-grad leaf.

    ``seed`` must be a scalar produced on this tape. Intermediate adjoints
    live in a scratch map owned by this call, so calling ``backward`` twice
    simply adds the same leaf gradients again.
    """
    if seed.size != 1:
        raise UsageError(f"backward seed must be scalar, got shape {seed.shape}")
    adjoint: dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
    leaves: dict[int, Tensor] = {}
    if seed.is_leaf and seed.requires_grad:
        leaves[id(seed)] = seed
    for node in reversed(tape.nodes):
        gouts = [adjoint.get(id(o)) for o in node.outputs]
        if all(g is None for g in gouts):
            continue
        gins = node.bw(gouts)
        for t, g in zip(node.inputs, gins):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in adjoint:
                adjoint[key] = adjoint[key] + g
            else:
                adjoint[key] = np.array(g, dtype=np.float64, copy=True)
            if t.is_leaf:
                leaves[key] = t
    for key, t in leaves.items():
        g = adjoint[key]
        t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, tape = _make_output(a.data + b.data, (a, b))
    if tape:
        tape.record((a, b), (out,), lambda g: (_unbroadcast(g[0], a.shape),
                                               _unbroadcast(g[0], b.shape)))
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, tape = _make_output(a.data - b.data, (a, b))
    if tape:
        tape.record((a, b), (out,), lambda g: (_unbroadcast(g[0], a.shape),
                                               _unbroadcast(-g[0], b.shape)))
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out, tape = _make_output(a.data * b.data, (a, b))
    if tape:
        ad, bd = a.data, b.data
        tape.record((a, b), (out,), lambda g: (_unbroadcast(g[0] * bd, a.shape),
                                               _unbroadcast(g[0] * ad, b.shape)))
    return out


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    if x.data.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {x.shape}")
    out, tape = _make_output(np.swapaxes(x.data, -1, -2), (x,))
    if tape:
        tape.record((x,), (out,), lambda g: (np.swapaxes(g[0], -1, -2),))
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    out, tape = _make_output(x.data.reshape(shape), (x,))
    if tape:
        tape.record((x,), (out,), lambda g: (g[0].reshape(old),))
    return out


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out, tape = _make_output(np.asarray(x.data.sum()), (x,))
    if tape:
        shape = x.shape
        tape.record((x,), (out,), lambda g: (np.broadcast_to(g[0], shape).copy(),))
    return out


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    n = x.size
    out, tape = _make_output(np.asarray(x.data.mean()), (x,))
    if tape:
        shape = x.shape
        tape.record((x,), (out,), lambda g: (np.broadcast_to(g[0] / n, shape).copy(),))
    return out


# ---------------------------------------------------------------------------
# dense linear algebra
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``y = x @ w + b`` with ``w: [p, q]``; ``x`` may carry a leading batch axis."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim < 2 or w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: x {x.shape} incompatible with w {w.shape}")
    y = np.matmul(x.data, w.data)
    inputs = [x, w]
    if b is not None:
        b = _as_tensor(b)
        if b.data.ndim != 1 or b.shape[0] != w.shape[1]:
            raise DimensionError(f"affine: bias {b.shape} incompatible with w {w.shape}")
        y = y + b.data
        inputs.append(b)
    out, tape = _make_output(y, inputs)
    if tape:
        xd, wd = x.data, w.data

        def bw(g):
            go = g[0]
            gx = np.matmul(go, wd.T)
            gw = np.matmul(np.swapaxes(xd, -1, -2), go)
            if gw.ndim == 3:
                gw = gw.sum(axis=0)
            gins = [gx, gw]
            if b is not None:
                gins.append(go.reshape(-1, go.shape[-1]).sum(axis=0))
            return gins

        tape.record(inputs, (out,), bw)
    return out


# ---------------------------------------------------------------------------
# convolutions
# ---------------------------------------------------------------------------

def _conv_pad(x: np.ndarray, padding: str) -> np.ndarray:
    if padding == "zeros":
        width = [(0, 0)] * (x.ndim - 1) + [(1, 1)]
        return np.pad(x, width)
    if padding == "circular":
        return np.concatenate([x[..., -1:], x, x[..., :1]], axis=-1)
    raise ParameterError(f"unknown padding mode {padding!r}")


def conv1d_same(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
                padding: str = "zeros") -> Tensor:
    """Kernel-3 1-D convolution preserving length.

    ``x: [C, L]`` or ``[B, C, L]``, ``kernels: [C_out, C, 3]``. Zero padding of
    one step on both ends by default; ``padding="circular"`` wraps instead.
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if kernels.data.ndim != 3 or kernels.shape[-1] != 3:
        raise DimensionError(f"kernels must be [C_out, C, 3], got {kernels.shape}")
    if x.data.ndim < 2 or x.shape[-2] != kernels.shape[1]:
        raise DimensionError(
            f"conv1d_same: input channels {x.shape} do not match kernels {kernels.shape}")
    L = x.shape[-1]
    xp = _conv_pad(x.data, padding)
    win = np.stack([xp[..., j:j + L] for j in range(3)], axis=-2)  # [..., C, 3, L]
    y = np.einsum("ocj,...cjl->...ol", kernels.data, win)
    inputs = [x, kernels]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (kernels.shape[0],):
            raise DimensionError(f"bias {bias.shape} does not match C_out {kernels.shape[0]}")
        y = y + bias.data[:, None]
        inputs.append(bias)
    out, tape = _make_output(y, inputs)
    if tape:
        kd = kernels.data

        def bw(g):
            go = g[0]
            gk = np.einsum("...ol,...cjl->ocj", go, win)
            gxp = np.zeros_like(xp)
            for j in range(3):
                gxp[..., j:j + L] += np.einsum("...ol,oc->...cl", go, kd[:, :, j])
            if padding == "zeros":
                gx = gxp[..., 1:L + 1]
            else:
                gx = gxp[..., 1:L + 1].copy()
                gx[..., -1] += gxp[..., 0]
                gx[..., 0] += gxp[..., L + 1]
            gins = [gx, gk]
            if bias is not None:
                gins.append(go.reshape(-1, go.shape[-1]).sum(axis=-1)
                            if go.ndim == 2 else go.sum(axis=(0, 2)))
            return gins

        tape.record(inputs, (out,), bw)
    return out


def conv1d_depthwise_same(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel kernel-3 convolution, zero padded. ``kernels: [C, 3]``."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if kernels.data.ndim != 2 or kernels.shape[-1] != 3:
        raise DimensionError(f"depthwise kernels must be [C, 3], got {kernels.shape}")
    if x.data.ndim < 2 or x.shape[-2] != kernels.shape[0]:
        raise DimensionError(
            f"depthwise conv: channels {x.shape} do not match kernels {kernels.shape}")
    L = x.shape[-1]
    xp = _conv_pad(x.data, "zeros")
    win = np.stack([xp[..., j:j + L] for j in range(3)], axis=-2)  # [..., C, 3, L]
    y = np.einsum("cj,...cjl->...cl", kernels.data, win)
    inputs = [x, kernels]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (kernels.shape[0],):
            raise DimensionError(f"bias {bias.shape} does not match C {kernels.shape[0]}")
        y = y + bias.data[:, None]
        inputs.append(bias)
    out, tape = _make_output(y, inputs)
    if tape:
        kd = kernels.data

        def bw(g):
            go = g[0]
            gk = np.einsum("...cl,...cjl->cj", go, win)
            gxp = np.zeros_like(xp)
            for j in range(3):
                gxp[..., j:j + L] += go * kd[:, j][:, None]
            gins = [gxp[..., 1:L + 1], gk]
            if bias is not None:
                gins.append(go.sum(axis=-1) if go.ndim == 2 else go.sum(axis=(0, 2)))
            return gins

        tape.record(inputs, (out,), bw)
    return out


# ---------------------------------------------------------------------------
# nonlinearities and normalization
# ---------------------------------------------------------------------------

def gelu(x: Tensor, tanh_approx: bool = False) -> Tensor:
    """Elementwise ``x * Phi(x)``; exact erf form by default.

    ``tanh_approx=True`` switches to the common tanh approximation (both the
    value and the adjoint).
    """
    x = _as_tensor(x)
    xd = x.data
    if tanh_approx:
        inner = _TANH_C * (xd + 0.044715 * xd ** 3)
        t = np.tanh(inner)
        y = 0.5 * xd * (1.0 + t)
    else:
        phi_cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
        y = xd * phi_cdf
    out, tape = _make_output(y, (x,))
    if tape:
        if tanh_approx:
            dinner = _TANH_C * (1.0 + 3 * 0.044715 * xd ** 2)
            deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * dinner
        else:
            deriv = phi_cdf + xd * np.exp(-0.5 * xd ** 2) * _INV_SQRT_2PI
        tape.record((x,), (out,), lambda g: (g[0] * deriv,))
    return out


def layer_norm(x: Tensor, scale: Tensor, shift: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization over the last (feature) axis, then ``* scale + shift``."""
    x, scale, shift = _as_tensor(x), _as_tensor(scale), _as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise DimensionError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} do not match features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out, tape = _make_output(xhat * scale.data + shift.data, (x, scale, shift))
    if tape:
        sd = scale.data

        def bw(g):
            go = g[0]
            lead = tuple(range(go.ndim - 1))
            gshift = go.sum(axis=lead)
            gscale = (go * xhat).sum(axis=lead)
            gh = go * sd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            return gx, gscale, gshift

        tape.record((x, scale, shift), (out,), bw)
    return out


# ---------------------------------------------------------------------------
# pooling and moving averages
# ---------------------------------------------------------------------------

def avg_pool1d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    """Non-overlapping mean pooling along the last axis.

    ``window`` must equal ``stride``. When the length is not a multiple of the
    window, the left end is replicate-padded to the next multiple so the most
    recent values are never synthetic.
    """
    x = _as_tensor(x)
    if stride is None:
        stride = window
    if window < 1:
        raise ParameterError(f"pooling window must be >= 1, got {window}")
    if stride != window:
        raise ParameterError(f"pooling requires stride == window, got {stride} != {window}")
    L = x.shape[-1]
    pad = (-L) % window
    xd = x.data
    if pad:
        left = np.repeat(xd[..., :1], pad, axis=-1)
        xd = np.concatenate([left, xd], axis=-1)
    n_out = xd.shape[-1] // window
    y = xd.reshape(xd.shape[:-1] + (n_out, window)).mean(axis=-1)
    out, tape = _make_output(y, (x,))
    if tape:
        def bw(g):
            gp = np.repeat(g[0] / window, window, axis=-1)
            gx = gp[..., pad:].copy()
            if pad:
                gx[..., 0] += gp[..., :pad].sum(axis=-1)
            return (gx,)

        tape.record((x,), (out,), bw)
    return out


def _moving_avg_matrix(length: int, kernel: int) -> np.ndarray:
    """Row-stochastic matrix of a centered moving average with replicated ends."""
    half = (kernel - 1) // 2
    mat = np.zeros((length, length))
    for t in range(length):
        for j in range(-half, half + 1):
            s = min(max(t + j, 0), length - 1)
            mat[t, s] += 1.0 / kernel
    return mat


_MOVING_AVG_CACHE: dict[tuple[int, int], np.ndarray] = {}


def moving_avg(x: Tensor, kernel: int) -> Tensor:
    """Centered moving average along the time axis with replicate padding.

    Time axis is the last axis for rank 1, otherwise the second-to-last
    (``[L, D]`` / ``[B, L, D]`` layouts). ``kernel`` must be odd.
    """
    x = _as_tensor(x)
    if kernel < 1 or kernel % 2 == 0:
        raise ParameterError(f"moving average kernel must be odd and positive, got {kernel}")
    t_axis = 0 if x.data.ndim == 1 else x.data.ndim - 2
    length = x.shape[t_axis]
    key = (length, kernel)
    mat = _MOVING_AVG_CACHE.get(key)
    if mat is None:
        mat = _moving_avg_matrix(length, kernel)
        _MOVING_AVG_CACHE[key] = mat
    if x.data.ndim == 1:
        y = mat @ x.data
    else:
        y = np.matmul(mat, x.data)
    out, tape = _make_output(y, (x,))
    if tape:
        matT = mat.T

        def bw(g):
            if g[0].ndim == 1:
                return (matT @ g[0],)
            return (np.matmul(matT, g[0]),)

        tape.record((x,), (out,), bw)
    return out


# ---------------------------------------------------------------------------
# frequency domain
# ---------------------------------------------------------------------------

def rfft(x: Tensor) -> ComplexSpectrum:
    """One-sided DFT of a real sequence (last axis); rows transform independently.

    The adjoint applies the conjugate transpose of the (linear) one-sided DFT
    to the upstream cotangent: the complex cotangent is zero-extended to the
    full spectrum and pushed through an inverse FFT scaled by ``n``, which is
    exactly the transpose map without any Hermitian-symmetry doubling.
    """
    x = _as_tensor(x)
    n = x.shape[-1]
    if n < 1:
        raise DimensionError("rfft input must have length >= 1")
    spec = np.fft.rfft(x.data, axis=-1)
    re_t, tape = _make_output(np.ascontiguousarray(spec.real), (x,))
    im_t, _ = _make_output(np.ascontiguousarray(spec.imag), (x,))
    if tape:
        m = spec.shape[-1]

        def bw(g):
            gre = g[0] if g[0] is not None else 0.0
            gim = g[1] if g[1] is not None else 0.0
            c = np.zeros(re_t.shape[:-1] + (n,), dtype=np.complex128)
            c[..., :m] = gre + 1j * gim
            return (np.fft.ifft(c, axis=-1).real * n,)

        tape.record((x,), (re_t, im_t), bw)
    return ComplexSpectrum(re_t, im_t, n)


def irfft(spectrum: ComplexSpectrum) -> np.ndarray:
    """Exact inverse of :func:`rfft` (no gradient tracking)."""
    c = spectrum.real.data + 1j * spectrum.imag.data
    return np.fft.irfft(c, n=spectrum.n, axis=-1)


def complex_modulus(spectrum: ComplexSpectrum, smoothing: float = 1e-12) -> Tensor:
    """Smoothed modulus ``sqrt(re^2 + im^2 + smoothing^2)`` per bin.

    The smoothing floor keeps the gradient defined at the origin.
    """
    re, im = spectrum.real, spectrum.imag
    mod = np.sqrt(re.data ** 2 + im.data ** 2 + smoothing ** 2)
    out, tape = _make_output(mod, (re, im))
    if tape:
        red, imd = re.data, im.data
        tape.record((re, im), (out,), lambda g: (g[0] * red / mod, g[0] * imd / mod))
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar function of a single tensor. The
    error at each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if step <= 0:
        raise ParameterError(f"step must be positive, got {step}")
    leaf = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(leaf)
    if y.size != 1:
        raise UsageError(f"grad_check target must be scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise EvaluationError("grad_check: f(x) is not finite")
    backward(tape, y)
    analytic = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
    flat = leaf.data.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(leaf.data)).item()
        flat[i] = orig - step
        lo = f(Tensor(leaf.data)).item()
        flat[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise EvaluationError(f"grad_check: non-finite evaluation at coordinate {i}")
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
        worst = max(worst, err)
    return worst
