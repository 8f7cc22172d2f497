"""Differentiable primitives with exact reverse-mode gradients.

A lightweight tape: every operation returns a Tensor that records its parent
tensors and a closure distributing the upstream gradient. Calling
``backward()`` on a scalar output walks the graph in reverse topological
order. Graphs are built fresh per forward pass; tensors whose inputs do not
require gradients skip all bookkeeping, so the same ops double as the
inference path.

Convolution is cross-correlation with "same" zero padding and stride 1;
max-pool uses stride = kernel and routes gradient to the first (row-major)
maximum of each window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericalError, ShapeError

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805

GROUP_NORM_EPS = 1e-5
L2_NORM_EPS = 1e-12


class Tensor:
    """An n-d array plus an optional gradient accumulator and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every reachable tensor."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar, got shape {self.data.shape}")
        if self._done:
            raise RuntimeError("backward already invoked for this graph")
        self._done = True

        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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

        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)


def accumulate(t: Tensor, g: np.ndarray) -> None:
    """Add an upstream gradient contribution into ``t.grad``."""
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def make_node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Wrap an op result; the closure is kept only when a parent needs gradients."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _as_batched(data: np.ndarray, ndim: int):
    if data.ndim == ndim:
        return data, False
    if data.ndim == ndim - 1:
        return data[None], True
    raise ShapeError(f"expected {ndim - 1}-d or {ndim}-d input, got shape {data.shape}")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Same-padded stride-1 cross-correlation: (n, c_in, h, w) -> (n, c_out, h, w)."""
    xd, squeezed = _as_batched(x.data, 4)
    w = kernels.data
    if w.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ShapeError(
            f"kernels {w.shape} incompatible with input channels {xd.shape}"
        )
    if bias.data.shape != (w.shape[0],):
        raise ShapeError(f"bias shape {bias.data.shape} != ({w.shape[0]},)")
    n, c_in, h, wdt = xd.shape
    c_out, _, kh, kw = w.shape
    pt, pl = (kh - 1) // 2, (kw - 1) // 2
    pb, pr = kh - 1 - pt, kw - 1 - pl

    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    col = np.empty((n, c_in, kh, kw, h, wdt), dtype=xd.dtype)
    for dy in range(kh):
        for dx in range(kw):
            col[:, :, dy, dx] = xp[:, :, dy : dy + h, dx : dx + wdt]
    # (n, ckk, hw) and (c_out, ckk) feed a batched GEMM with no transposition
    col3 = col.reshape(n, c_in * kh * kw, h * wdt)
    w2 = w.reshape(c_out, c_in * kh * kw)
    out = np.matmul(w2, col3).reshape(n, c_out, h, wdt) + bias.data[None, :, None, None]

    def backward_fn(g):
        g4 = g if not squeezed else g[None]
        accumulate(bias, g4.sum(axis=(0, 2, 3)))
        g3 = g4.reshape(n, c_out, h * wdt)
        if kernels.requires_grad:
            gw2 = np.matmul(g3, col3.transpose(0, 2, 1)).sum(axis=0)
            accumulate(kernels, gw2.reshape(w.shape))
        if x.requires_grad:
            gcol = np.matmul(w2.T, g3).reshape(col.shape)
            gxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    gxp[:, :, dy : dy + h, dx : dx + wdt] += gcol[:, :, dy, dx]
            gx = gxp[:, :, pt : pt + h, pl : pl + wdt]
            accumulate(x, gx[0] if squeezed else gx)

    return make_node(out[0] if squeezed else out, (x, kernels, bias), backward_fn)


def selu(x: Tensor) -> Tensor:
    """Self-normalizing exponential-linear activation."""
    xd = x.data
    neg = SELU_SCALE * SELU_ALPHA * np.expm1(np.minimum(xd, 0.0))
    out = np.where(xd > 0, SELU_SCALE * xd, neg).astype(xd.dtype)

    def backward_fn(g):
        deriv = np.where(xd > 0, xd.dtype.type(SELU_SCALE), neg + xd.dtype.type(SELU_SCALE * SELU_ALPHA))
        accumulate(x, g * deriv)

    return make_node(out, (x,), backward_fn)


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor, n_groups: int) -> Tensor:
    """Normalize per (sample, channel-group) then apply per-channel affine."""
    xd, squeezed = _as_batched(x.data, 4)
    n, c, h, w = xd.shape
    if c % n_groups != 0:
        raise ShapeError(f"{n_groups} groups do not divide {c} channels")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("gamma/beta must be per-channel vectors")
    m = (c // n_groups) * h * w

    xr = xd.reshape(n, n_groups, m)
    mu = xr.mean(axis=2, keepdims=True)
    var = xr.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + xd.dtype.type(GROUP_NORM_EPS))
    x_hat = ((xr - mu) * inv_std).reshape(n, c, h, w)
    out = x_hat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward_fn(g):
        g4 = g if not squeezed else g[None]
        accumulate(beta, g4.sum(axis=(0, 2, 3)))
        accumulate(gamma, (g4 * x_hat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gh = (g4 * gamma.data[None, :, None, None]).reshape(n, n_groups, m)
            xh = x_hat.reshape(n, n_groups, m)
            gh_avg = gh.mean(axis=2, keepdims=True)
            ghx_avg = (gh * xh).mean(axis=2, keepdims=True)
            gx = (inv_std * (gh - gh_avg - xh * ghx_avg)).reshape(n, c, h, w)
            accumulate(x, (gx[0] if squeezed else gx).astype(xd.dtype))

    return make_node(out[0] if squeezed else out, (x, gamma, beta), backward_fn)


def max_pool2d(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    """Non-overlapping max pooling; trailing remainder rows/columns are dropped."""
    xd, squeezed = _as_batched(x.data, 4)
    kh, kw = kernel
    n, c, h, w = xd.shape
    ho, wo = h // kh, w // kw
    if ho == 0 or wo == 0:
        raise ShapeError(f"pool kernel {kernel} larger than input {xd.shape}")
    win = (
        xd[:, :, : ho * kh, : wo * kw]
        .reshape(n, c, ho, kh, wo, kw)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, kh * kw)
    )
    idx = win.argmax(axis=-1)  # first max wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        g4 = g if not squeezed else g[None]
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], g4[..., None], axis=-1)
        gx = np.zeros_like(xd)
        gx[:, :, : ho * kh, : wo * kw] = (
            gwin.reshape(n, c, ho, wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kh, wo * kw)
        )
        accumulate(x, gx[0] if squeezed else gx)

    return make_node(out[0] if squeezed else out, (x,), backward_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ W.T + b`` for a single vector or a batch of rows."""
    xd, squeezed = _as_batched(x.data, 2)
    wd = weight.data
    if wd.ndim != 2 or xd.shape[1] != wd.shape[1]:
        raise ShapeError(f"weight {wd.shape} incompatible with input {x.data.shape}")
    if bias.data.shape != (wd.shape[0],):
        raise ShapeError(f"bias shape {bias.data.shape} != ({wd.shape[0]},)")
    out = xd @ wd.T + bias.data[None, :]

    def backward_fn(g):
        g2 = g if not squeezed else g[None]
        accumulate(bias, g2.sum(axis=0))
        if weight.requires_grad:
            accumulate(weight, g2.T @ xd)
        if x.requires_grad:
            gx = g2 @ wd
            accumulate(x, gx[0] if squeezed else gx)

    return make_node(out[0] if squeezed else out, (x, weight, bias), backward_fn)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale rows (last axis) to unit Euclidean norm."""
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    if np.any(norms < L2_NORM_EPS):
        raise DomainError("cannot L2-normalize a (near-)zero vector")
    y = xd / norms

    def backward_fn(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        accumulate(x, (g - dot * y) / norms)

    return make_node(y, (x,), backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward_fn(g):
        accumulate(x, g.reshape(x.data.shape))

    return make_node(out, (x,), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"add requires matching shapes, got {a.data.shape} and {b.data.shape}")
    out = a.data + b.data

    def backward_fn(g):
        accumulate(a, g)
        accumulate(b, g)

    return make_node(out, (a, b), backward_fn)


def scale(x: Tensor, factor: float) -> Tensor:
    out = x.data * factor

    def backward_fn(g):
        accumulate(x, g * factor)

    return make_node(out, (x,), backward_fn)


def inner(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar inner product with a constant weight array (reduction for gradchecks)."""
    w = np.asarray(weights)
    if w.shape != x.data.shape:
        raise ShapeError(f"weights {w.shape} must match input {x.data.shape}")
    out = np.asarray((x.data * w).sum())

    def backward_fn(g):
        accumulate(x, float(g) * w)

    return make_node(out, (x,), backward_fn)


@dataclass
class GradcheckResult:
    max_error: float
    n_checked: int
    n_skipped: int


def gradcheck(
    func,
    inputs,
    *,
    n_samples=None,
    seed=0,
    step_scale=1e-5,
    exclude=None,
    skip_nonsmooth=False,
    nonsmooth_tol=1e-4,
    return_details=False,
):
    """Compare analytic gradients of a scalar-valued ``func`` to central differences.

    Parameters
    ----------
    func : callable taking one Tensor per input, returning a scalar Tensor.
    inputs : list of float arrays; evaluation happens in float64.
    n_samples : coordinates checked per input (None = all), drawn with ``seed``.
    step_scale : central-difference step is ``step_scale * (1 + |x|)`` per coordinate.
    exclude : optional list of boolean masks marking coordinates to skip
        (documented non-smooth points such as pooling ties).
    skip_nonsmooth : when set, also probe each coordinate at half the step and
        skip it if the two difference quotients disagree beyond
        ``nonsmooth_tol`` relative error. At such points the numeric oracle is
        self-inconsistent (an activation kink or pooling switch sits inside
        the step), so no comparison is meaningful; a genuinely wrong analytic
        gradient still fails because there the quotients agree with each other
        but not with the analytic value.

    Returns
    -------
    float, or GradcheckResult when ``return_details`` is set: max over checked
    coordinates of ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = func(*tensors)
    out.backward()
    analytic = []
    for t in tensors:
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite analytic gradient")
        analytic.append(np.asarray(g, dtype=np.float64))

    def central(arrs, i, j, x0, h):
        arrs[i].reshape(-1)[j] = x0 + h
        f_plus = float(np.asarray(func(*[Tensor(a) for a in arrs]).data).reshape(()))
        arrs[i].reshape(-1)[j] = x0 - h
        f_minus = float(np.asarray(func(*[Tensor(a) for a in arrs]).data).reshape(()))
        arrs[i].reshape(-1)[j] = x0
        return (f_plus - f_minus) / (2.0 * h)

    rng = np.random.default_rng(seed)
    max_err = 0.0
    n_checked = 0
    n_skipped = 0
    scratch = [a.copy() for a in arrays]
    for i, base in enumerate(arrays):
        flat = base.reshape(-1)
        size = flat.size
        if n_samples is None or n_samples >= size:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=n_samples, replace=False)
        skip = None if exclude is None else np.asarray(exclude[i]).reshape(-1)
        for j in coords:
            if skip is not None and skip[j]:
                n_skipped += 1
                continue
            h = step_scale * (1.0 + abs(flat[j]))
            numeric = central(scratch, i, j, flat[j], h)
            if skip_nonsmooth:
                numeric_half = central(scratch, i, j, flat[j], 0.5 * h)
                incons = abs(numeric - numeric_half) / max(abs(numeric), abs(numeric_half), 1e-8)
                if incons > nonsmooth_tol:
                    n_skipped += 1
                    continue
            a_val = analytic[i].reshape(-1)[j]
            err = abs(a_val - numeric) / max(abs(a_val), abs(numeric), 1e-8)
            max_err = max(max_err, err)
            n_checked += 1
    if return_details:
        return GradcheckResult(max_error=max_err, n_checked=n_checked, n_skipped=n_skipped)
    return max_err
