"""Dense float64 ops with hand-derived backward passes.

Every differentiable op comes as a ``forward``/``backward`` pair working on
plain :class:`numpy.ndarray` values.  The ops are registered by name so that
:func:`grad_check` can compare the analytic gradients against central finite
differences.

Layout conventions: images and feature maps are ``C x H x W``; token matrices
are ``n x d`` (one token per row).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Raised for invalid op configuration (e.g. heads not dividing d)."""


class UnknownOpError(LookupError):
    """Raised when grad_check is asked for an op that was never registered."""


def _as_f64(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float64)


# ---------------------------------------------------------------------------
# correlation / convolution


def xcorr2d(search: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of ``C x H x W`` with ``C x h x w``, summed over C."""
    search = _as_f64(search)
    kernel = _as_f64(kernel)
    if search.ndim != 3 or kernel.ndim != 3:
        raise DimensionError(f"xcorr2d expects 3-d operands, got {search.shape} and {kernel.shape}")
    C, H, W = search.shape
    c, h, w = kernel.shape
    if c != C:
        raise DimensionError(f"channel mismatch: search has {C}, kernel has {c}")
    if h > H or w > W:
        raise DimensionError(f"kernel {h}x{w} larger than search {H}x{W}")
    win = sliding_window_view(search, (h, w), axis=(1, 2))  # C, H-h+1, W-w+1, h, w
    return np.einsum("cyxij,cij->yx", win, kernel, optimize=True)


def xcorr2d_backward(grad: np.ndarray, search: np.ndarray, kernel: np.ndarray):
    """Gradients of :func:`xcorr2d` w.r.t. ``search`` and ``kernel``."""
    search = _as_f64(search)
    kernel = _as_f64(kernel)
    _, h, w = kernel.shape
    win = sliding_window_view(search, (h, w), axis=(1, 2))
    g_kernel = np.einsum("cyxij,yx->cij", win, grad, optimize=True)
    # full correlation of grad with the flipped kernel
    oh, ow = grad.shape
    padded = np.pad(grad, ((h - 1, h - 1), (w - 1, w - 1)))
    gwin = sliding_window_view(padded, (h, w))  # H, W, h, w
    g_search = np.einsum("yxij,cij->cyx", gwin, kernel[:, ::-1, ::-1], optimize=True)
    return g_search, g_kernel


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid, stride-1 multi-channel correlation: ``Cin x H x W -> Cout x H' x W'``."""
    x = _as_f64(x)
    weight = _as_f64(weight)
    if weight.ndim != 4 or x.ndim != 3 or weight.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shape mismatch: x {x.shape}, weight {weight.shape}")
    _, _, kh, kw = weight.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    out = np.einsum("cyxij,ocij->oyx", win, weight, optimize=True)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[:, None, None]
    return out


def conv2d_backward(grad: np.ndarray, x: np.ndarray, weight: np.ndarray):
    """Returns ``(g_x, g_weight, g_bias)``."""
    x = _as_f64(x)
    _, _, kh, kw = weight.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    g_w = np.einsum("cyxij,oyx->ocij", win, grad, optimize=True)
    g_b = grad.sum(axis=(1, 2))
    padded = np.pad(grad, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    gwin = sliding_window_view(padded, (kh, kw), axis=(1, 2))  # O, H, W, kh, kw
    g_x = np.einsum("oyxij,ocij->cyx", gwin, weight[:, :, ::-1, ::-1], optimize=True)
    return g_x, g_w, g_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * (x > 0)


def avgpool2(x: np.ndarray) -> np.ndarray:
    """2x2 average pooling with stride 2 over the last two axes (even extents)."""
    x = _as_f64(x)
    if x.shape[-1] % 2 or x.shape[-2] % 2:
        raise DimensionError(f"avgpool2 needs even spatial extents, got {x.shape}")
    C, H, W = x.shape
    return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def avgpool2_backward(grad: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(grad, 2, axis=1), 2, axis=2) * 0.25


# ---------------------------------------------------------------------------
# attention


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    logits = _as_f64(logits)
    if logits.shape[-1] == 0:
        return logits.copy()
    e = logits - logits.max(axis=-1, keepdims=True)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    return e


def softmax_rows_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return out * (grad - (grad * out).sum(axis=-1, keepdims=True))


def _check_qkv(q, k, v):
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError("attention operands must be 2-d token matrices")
    if q.shape[1] != k.shape[1]:
        raise DimensionError(f"query dim {q.shape[1]} != key dim {k.shape[1]}")
    if k.shape[0] != v.shape[0]:
        raise DimensionError(f"{k.shape[0]} keys but {v.shape[0]} values")
    if k.shape[0] == 0:
        raise DimensionError("attention needs at least one key")


def attention_weights(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    d = q.shape[1]
    return softmax_rows(q @ k.T / np.sqrt(d))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``softmax(q k^T / sqrt(d)) v``."""
    q, k, v = _as_f64(q), _as_f64(k), _as_f64(v)
    _check_qkv(q, k, v)
    return attention_weights(q, k) @ v


def attention_backward(grad: np.ndarray, q: np.ndarray, k: np.ndarray, v: np.ndarray):
    q, k, v = _as_f64(q), _as_f64(k), _as_f64(v)
    scale = 1.0 / np.sqrt(q.shape[1])
    A = attention_weights(q, k)
    g_A = grad @ v.T
    g_v = A.T @ grad
    g_S = softmax_rows_backward(g_A, A) * scale
    return g_S @ k, g_S.T @ q, g_v


@dataclass(frozen=True)
class Projections:
    """Linear maps of a multi-head block; each is ``d_model x d_model``."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @classmethod
    def identity(cls, d: int) -> "Projections":
        eye = np.eye(d)
        return cls(eye, eye, eye, eye)

    @classmethod
    def random(cls, d: int, rng: np.random.Generator, gain: float = 1.0, out_gain: float = 1.0) -> "Projections":
        s = gain / np.sqrt(d)
        return cls(
            rng.normal(0, s, (d, d)),
            rng.normal(0, s, (d, d)),
            rng.normal(0, s, (d, d)),
            rng.normal(0, out_gain / np.sqrt(d), (d, d)),
        )


def _split_heads(d: int, heads: int) -> list[slice]:
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
    hd = d // heads
    return [slice(h * hd, (h + 1) * hd) for h in range(heads)]


def multihead(q, k, v, heads: int, proj: Projections) -> np.ndarray:
    """Per-head attention on projected inputs, concatenated, then output-projected."""
    q, k, v = _as_f64(q), _as_f64(k), _as_f64(v)
    d = q.shape[1]
    if k.shape[1] != d or v.shape[1] != d:
        raise DimensionError("multihead expects q, k, v with the same model dim")
    slices = _split_heads(d, heads)
    Q, K, V = q @ proj.wq, k @ proj.wk, v @ proj.wv
    concat = np.concatenate([attention(Q[:, s], K[:, s], V[:, s]) for s in slices], axis=1)
    return concat @ proj.wo


def multihead_backward(grad, q, k, v, heads: int, proj: Projections):
    q, k, v = _as_f64(q), _as_f64(k), _as_f64(v)
    slices = _split_heads(q.shape[1], heads)
    Q, K, V = q @ proj.wq, k @ proj.wk, v @ proj.wv
    g_concat = grad @ proj.wo.T
    gQ, gK, gV = np.zeros_like(Q), np.zeros_like(K), np.zeros_like(V)
    for s in slices:
        a, b, c = attention_backward(g_concat[:, s], Q[:, s], K[:, s], V[:, s])
        gQ[:, s], gK[:, s], gV[:, s] = a, b, c
    return gQ @ proj.wq.T, gK @ proj.wk.T, gV @ proj.wv.T


# ---------------------------------------------------------------------------
# losses (value + gradient w.r.t. the prediction)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None):
    """Summed binary cross-entropy on logits; returns ``(value, d value / d logits)``."""
    z = _as_f64(logits)
    y = _as_f64(labels)
    w = np.ones_like(z) if weights is None else _as_f64(weights)
    # log(1 + e^-|z|) + max(z, 0) - z y
    value = np.sum(w * (np.logaddexp(0.0, z) - z * y))
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return float(value), w * (sig - y)


def smooth_l1(pred: np.ndarray, target: np.ndarray, weights: np.ndarray | None = None, beta: float = 1.0):
    diff = _as_f64(pred) - _as_f64(target)
    w = np.ones_like(diff) if weights is None else np.broadcast_to(_as_f64(weights), diff.shape)
    a = np.abs(diff)
    quad = a < beta
    value = np.where(quad, 0.5 * diff**2 / beta, a - 0.5 * beta)
    grad = np.where(quad, diff / beta, np.sign(diff))
    return float(np.sum(w * value)), w * grad


# ---------------------------------------------------------------------------
# registry + finite-difference checker


@dataclass(frozen=True)
class Op:
    """A differentiable op: ``forward(*inputs) -> array``; ``backward(g, *inputs) -> grads``.

    ``sample`` draws a random evaluation point (tuple of inputs) for grad checks;
    ``check_coords`` caps the differenced coordinates per input in :func:`check_all`.
    """

    name: str
    forward: Callable[..., np.ndarray]
    backward: Callable[..., Sequence[np.ndarray]]
    sample: Callable[[np.random.Generator], tuple]
    check_coords: int | None = 128


REGISTRY: dict[str, Op] = {}


def register(op: Op) -> Op:
    REGISTRY[op.name] = op
    return op


def get_op(op_id: str) -> Op:
    try:
        return REGISTRY[op_id]
    except KeyError:
        raise UnknownOpError(f"no differentiable op registered as {op_id!r}") from None


@dataclass
class CheckReport:
    op_id: str
    max_rel_error: float
    per_input: list[float] = field(default_factory=list)
    tol: float = 1e-4
    coords_checked: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def grad_check(
    op: str | Op,
    point: Sequence[np.ndarray] | None = None,
    step: float = 1e-5,
    tol: float = 1e-4,
    *,
    seed: int = 0,
    max_coords: int | None = 128,
) -> CheckReport:
    """Compare analytic and central-difference gradients of ``op`` at ``point``.

    The scalar probed is ``sum(w * forward(*point))`` with a seeded random ``w``.
    For large inputs only ``max_coords`` randomly chosen coordinates per input
    are differenced.  Relative error per input is
    ``max|a - n| / max(max|a|, max|n|)`` (zero when both vanish).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    if isinstance(op, str):
        op = get_op(op)
    rng = np.random.default_rng(seed)
    if point is None:
        point = op.sample(rng)
    point = [np.array(p, dtype=np.float64) for p in point]
    out = np.asarray(op.forward(*point), dtype=np.float64)
    w = rng.normal(size=out.shape)
    analytic = op.backward(w, *point)

    def probe(args) -> float:
        return float(np.sum(w * np.asarray(op.forward(*args), dtype=np.float64)))

    errors = []
    n_checked = 0
    for i, x in enumerate(point):
        g = np.asarray(analytic[i], dtype=np.float64)
        if g.shape != x.shape:
            raise DimensionError(f"{op.name}: gradient for input {i} has shape {g.shape}, expected {x.shape}")
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(idx.size)
        for j, c in enumerate(idx):
            orig = flat[c]
            flat[c] = orig + step
            fp = probe(point)
            flat[c] = orig - step
            fm = probe(point)
            flat[c] = orig
            num[j] = (fp - fm) / (2 * step)
        ana = g.reshape(-1)[idx]
        scale = max(np.max(np.abs(ana), initial=0.0), np.max(np.abs(num), initial=0.0))
        err = 0.0 if scale == 0.0 else float(np.max(np.abs(ana - num)) / scale)
        errors.append(err)
        n_checked += idx.size
    return CheckReport(op.name, max(errors, default=0.0), errors, tol, n_checked)


# built-in registrations ------------------------------------------------------


def _mh_fixture(heads=2, d=8):
    proj = Projections.random(d, np.random.default_rng(1234))
    return heads, proj


_MH_HEADS, _MH_PROJ = _mh_fixture()

register(Op("xcorr2d", xcorr2d, xcorr2d_backward,
            lambda r: (r.normal(size=(2, 6, 6)), r.normal(size=(2, 3, 3)))))
register(Op("conv2d", lambda x, w, b: conv2d(x, w, b), lambda g, x, w, b: conv2d_backward(g, x, w),
            lambda r: (r.normal(size=(2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3))))
register(Op("softmax_rows", softmax_rows,
            lambda g, x: (softmax_rows_backward(g, softmax_rows(x)),),
            lambda r: (r.normal(size=(4, 5)) * 3,)))
register(Op("attention", attention, attention_backward,
            lambda r: (r.normal(size=(3, 4)), r.normal(size=(5, 4)), r.normal(size=(5, 4)))))
register(Op("multihead",
            lambda q, k, v: multihead(q, k, v, _MH_HEADS, _MH_PROJ),
            lambda g, q, k, v: multihead_backward(g, q, k, v, _MH_HEADS, _MH_PROJ),
            lambda r: (r.normal(size=(3, 8)), r.normal(size=(4, 8)), r.normal(size=(4, 8)))))
register(Op("relu", relu, lambda g, x: (relu_backward(g, x),),
            # keep samples away from the kink
            lambda r: (r.choice([-1.0, 1.0], size=(4, 4)) * r.uniform(0.1, 2.0, size=(4, 4)),)))
register(Op("avgpool2", avgpool2, lambda g, x: (avgpool2_backward(g),),
            lambda r: (r.normal(size=(2, 4, 6)),)))
register(Op("bce_with_logits",
            lambda z, y: np.array(bce_with_logits(z, y)[0]),
            lambda g, z, y: (g * bce_with_logits(z, y)[1], -g * np.asarray(z)),
            lambda r: (r.normal(size=7) * 3, (r.uniform(size=7) > 0.5).astype(float))))
register(Op("smooth_l1",
            lambda p, t: np.array(smooth_l1(p, t)[0]),
            lambda g, p, t: (g * smooth_l1(p, t)[1], -g * smooth_l1(p, t)[1]),
            lambda r: (r.normal(size=6) * 2, r.normal(size=6))))


def check_all(seeds: Sequence[int] = range(5), tol: float = 1e-4, names: Sequence[str] | None = None) -> list[CheckReport]:
    """Run :func:`grad_check` for every registered op at each seed."""
    reports = []
    for name in sorted(REGISTRY) if names is None else names:
        op = REGISTRY[name]
        for s in seeds:
            reports.append(grad_check(op, tol=tol, seed=s, max_coords=op.check_coords))
    return reports
