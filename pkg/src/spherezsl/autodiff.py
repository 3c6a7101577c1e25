"""Reverse-mode automatic differentiation over dense float64 tensors.

A graph is built explicitly by composing the kernel functions below on
:class:`Tensor` nodes; calling :meth:`Tensor.backward` on a scalar output
accumulates gradients into every ``requires_grad`` leaf. Nothing is taped
across calls: each loss evaluation constructs its own graph, which keeps
every evaluation independently verifiable against finite differences.

All kernels store values in float64 regardless of input precision.
"""

from __future__ import annotations

import math

import numpy as np

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

_debug_checks = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle NaN/Inf guards on every forward result (slow, test use)."""
    global _debug_checks
    _debug_checks = bool(enabled)


class Tensor:
    """A node in the expression graph: a float64 array plus backward edges."""

    __slots__ = ("values", "requires_grad", "grad", "_edges")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._edges = ()

    @property
    def shape(self):
        return self.values.shape

    def item(self) -> float:
        return float(self.values)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every grad-requiring leaf."""
        if self.values.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._edges:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            upstream = grads.pop(id(node), None)
            if upstream is None:
                continue
            if not node._edges:  # leaf
                node.grad = upstream if node.grad is None else node.grad + upstream
                continue
            for parent, pull in node._edges:
                if not parent.requires_grad:
                    continue
                contrib = pull(upstream)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + contrib
                else:
                    grads[id(parent)] = contrib

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def astensor(x) -> Tensor:
    """Wrap arrays/scalars as constant tensors; pass tensors through."""
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, edges) -> Tensor:
    if _debug_checks and not np.all(np.isfinite(values)):
        raise FloatingPointError("non-finite value produced by a forward kernel")
    live = tuple((p, fn) for p, fn in edges if p.requires_grad)
    out = Tensor(values, requires_grad=bool(live))
    out._edges = live
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` to undo numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise kernels

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.values + b.values, [
        (a, lambda g: _unbroadcast(g, a.values.shape)),
        (b, lambda g: _unbroadcast(g, b.values.shape)),
    ])


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.values - b.values, [
        (a, lambda g: _unbroadcast(g, a.values.shape)),
        (b, lambda g: _unbroadcast(-g, b.values.shape)),
    ])


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    return _make(a.values * b.values, [
        (a, lambda g: _unbroadcast(g * b.values, a.values.shape)),
        (b, lambda g: _unbroadcast(g * a.values, b.values.shape)),
    ])


def scale(a, c: float) -> Tensor:
    a = astensor(a)
    c = float(c)
    return _make(a.values * c, [(a, lambda g: g * c)])


def exp(a) -> Tensor:
    a = astensor(a)
    out = np.exp(a.values)
    return _make(out, [(a, lambda g: g * out)])


def relu(a) -> Tensor:
    a = astensor(a)
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), [(a, lambda g: g * mask)])


def gelu(a) -> Tensor:
    """tanh-form GELU: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    a = astensor(a)
    x = a.values
    inner = _SQRT_2_OVER_PI * (x + _GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def pull(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_CUBIC * x ** 2)
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner)

    return _make(out, [(a, pull)])


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum_(a, axis=None) -> Tensor:
    a = astensor(a)
    out = a.values.sum(axis=axis)

    def pull(g):
        if axis is None:
            return np.broadcast_to(g, a.values.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.values.shape).copy()

    return _make(out, [(a, pull)])


def mean(a, axis=None) -> Tensor:
    a = astensor(a)
    out = a.values.mean(axis=axis)
    count = a.values.size if axis is None else a.values.shape[axis]

    def pull(g):
        if axis is None:
            return np.broadcast_to(g / count, a.values.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / count, a.values.shape).copy()

    return _make(out, [(a, pull)])


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.values.shape[1] != b.values.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return _make(a.values @ b.values, [
        (a, lambda g: g @ b.values.T),
        (b, lambda g: a.values.T @ g),
    ])


def transpose(a) -> Tensor:
    a = astensor(a)
    if a.values.ndim != 2:
        raise ValueError("transpose expects a 2-D tensor")
    return _make(a.values.T.copy(), [(a, lambda g: g.T)])


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [astensor(t) for t in tensors]
    out = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def make_pull(i):
        lo, hi = bounds[i], bounds[i + 1]

        def pull(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return pull

    return _make(out, [(t, make_pull(i)) for i, t in enumerate(tensors)])


def stack_rows(tensors) -> Tensor:
    """Stack 1-D tensors into a 2-D matrix, one per row."""
    tensors = [astensor(t) for t in tensors]
    out = np.stack([t.values for t in tensors], axis=0)

    def make_pull(i):
        return lambda g: g[i]

    return _make(out, [(t, make_pull(i)) for i, t in enumerate(tensors)])


# ---------------------------------------------------------------------------
# geometry and losses

def l2_normalize(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    norms = np.linalg.norm(a.values, axis=axis, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot L2-normalize a zero vector")
    unit = a.values / norms

    def pull(g):
        inner = np.sum(g * unit, axis=axis, keepdims=True)
        return (g - unit * inner) / norms

    return _make(unit, [(a, pull)])


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis``, clamped to [-1, 1].

    The clamp only absorbs rounding past the boundary; gradients use the
    un-clamped expression.
    """
    a, b = astensor(a), astensor(b)
    na = np.linalg.norm(a.values, axis=axis, keepdims=True)
    nb = np.linalg.norm(b.values, axis=axis, keepdims=True)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise ValueError("cosine similarity undefined for zero-norm operand")
    dot = np.sum(a.values * b.values, axis=axis, keepdims=True)
    cos = dot / (na * nb)

    def pull_a(g):
        gk = np.expand_dims(g, axis)
        return gk * (b.values / (na * nb) - a.values * (cos / na ** 2))

    def pull_b(g):
        gk = np.expand_dims(g, axis)
        return gk * (a.values / (na * nb) - b.values * (cos / nb ** 2))

    out = np.clip(np.squeeze(cos, axis=axis), -1.0, 1.0)
    return _make(out, [(a, pull_a), (b, pull_b)])


def mse(a, b) -> Tensor:
    """Mean over all entries of the squared difference."""
    a, b = astensor(a), astensor(b)
    diff = a.values - b.values
    n = diff.size
    return _make(np.asarray((diff ** 2).sum() / n), [
        (a, lambda g: g * 2.0 * diff / n),
        (b, lambda g: -g * 2.0 * diff / n),
    ])


def softmax_cross_entropy(logits, labels, tau: float = 1.0) -> Tensor:
    """Mean cross-entropy of softmax(logits / tau) against integer labels.

    Computed with a max-shifted log1p form so that a saturated correct class
    yields a loss accurate down to the underflow floor rather than rounding
    to zero against the max logit.
    """
    logits = astensor(logits)
    if tau <= 0:
        raise ValueError("temperature must be positive")
    x = logits.values
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = x.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match batch {n}")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError("label out of range")

    scaled = x / tau
    jmax = np.argmax(scaled, axis=1)
    shifted = scaled - scaled[np.arange(n), jmax][:, None]
    expo = np.exp(shifted)
    # sum the non-max terms on their own so they are not absorbed by the
    # leading 1 before log1p sees them
    rest_terms = expo.copy()
    rest_terms[np.arange(n), jmax] = 0.0
    rest = rest_terms.sum(axis=1)
    losses = -shifted[np.arange(n), y] + np.log1p(rest)
    value = losses.mean()

    probs = expo / expo.sum(axis=1, keepdims=True)

    def pull(g):
        grad = probs.copy()
        grad[np.arange(n), y] -= 1.0
        grad *= float(g) / (tau * n)
        return grad[0] if squeeze else grad

    return _make(np.asarray(value), [(logits, pull)])


# ---------------------------------------------------------------------------
# evaluation and verification entry points

def eval_with_grad(graph_fn, params: dict[str, np.ndarray]):
    """Evaluate ``graph_fn`` on fresh leaves built from ``params``.

    ``graph_fn`` receives a dict of grad-requiring tensors and must return a
    scalar tensor. Returns ``(loss_value, grads)`` with one float64 gradient
    array per parameter (zeros where the graph never touched a parameter).
    """
    leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    out = graph_fn(leaves)
    if not isinstance(out, Tensor):
        raise TypeError("graph function must return a Tensor")
    if out.values.size != 1:
        raise ValueError(f"graph output must be scalar, got shape {out.shape}")
    out.backward()
    grads = {}
    for k, leaf in leaves.items():
        grads[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
    return float(out.values), grads


def eval_value(graph_fn, params: dict[str, np.ndarray]) -> float:
    """Forward-only evaluation used by the finite-difference oracle."""
    leaves = {k: Tensor(v) for k, v in params.items()}
    out = graph_fn(leaves)
    return float(out.values)


def finite_diff_check_directional(graph_fn, params: dict[str, np.ndarray],
                                  step: float = 1e-5, n_directions: int = 4,
                                  seed: int = 0) -> float:
    """Verify gradients along random unit directions instead of per coordinate.

    Sharp losses (for example cross-entropy at temperature 0.01) have gradient
    coordinates spanning hundreds of orders of magnitude; per-coordinate
    central differences on the small ones cancel below float64 resolution no
    matter the step. The directional derivative aggregates to the gradient's
    own scale, so it stays conditioned. Returns the max relative error over
    ``n_directions`` random directions.
    """
    _, grads = eval_with_grad(graph_fn, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_directions):
        dirs = {k: rng.standard_normal(np.shape(v)) for k, v in params.items()}
        norm = math.sqrt(sum(float((d ** 2).sum()) for d in dirs.values()))
        dirs = {k: d / norm for k, d in dirs.items()}
        hi = eval_value(graph_fn, {k: np.asarray(v, dtype=np.float64) + step * dirs[k]
                                   for k, v in params.items()})
        lo = eval_value(graph_fn, {k: np.asarray(v, dtype=np.float64) - step * dirs[k]
                                   for k, v in params.items()})
        central = (hi - lo) / (2.0 * step)
        analytic = sum(float((grads[k] * dirs[k]).sum()) for k in params)
        worst = max(worst, abs(analytic - central) / max(1e-8, abs(central)))
    return worst


def finite_diff_check(graph_fn, params: dict[str, np.ndarray], step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1e-8, |central|).

    Central differences only re-run the forward pass, so they are independent
    of the backward implementation they verify.
    """
    _, grads = eval_with_grad(graph_fn, params)
    worst = 0.0
    for name, base in params.items():
        flat = np.asarray(base, dtype=np.float64).ravel()
        for i in range(flat.size):
            bumped = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
            view = bumped[name].ravel()
            view[i] = flat[i] + step
            hi = eval_value(graph_fn, bumped)
            view[i] = flat[i] - step
            lo = eval_value(graph_fn, bumped)
            central = (hi - lo) / (2.0 * step)
            err = abs(grads[name].ravel()[i] - central) / max(1e-8, abs(central))
            worst = max(worst, err)
    return worst
