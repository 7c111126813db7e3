"""Plain feedforward building blocks: MLP and an input-convex network.

Both expose the same three surfaces as the bi-Lipschitz net: ``emit`` to
append the computation to an autodiff graph (training path), plus
closed-form ``forward_batch`` / ``gradient_batch`` evaluators for fast
simulation and metrics.  The two routes agree to roundoff and the test
suite pins that.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .bilipschitz import glorot_uniform
from .rng import stream_rng

__all__ = ["MLP", "ICNN"]

_ACTS = ("tanh", "relu", "softplus")


def _act_apply(name, pre):
    if name == "tanh":
        return np.tanh(pre)
    if name == "relu":
        return np.maximum(pre, 0.0)
    return np.logaddexp(0.0, pre)


def _act_derivative(name, pre):
    if name == "tanh":
        t = np.tanh(pre)
        return 1.0 - t * t
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    return np.exp(-np.logaddexp(0.0, -pre))  # sigmoid


class MLP:
    """Fully-connected net; hidden activations as configured, linear output."""

    def __init__(self, widths, activation: str = "tanh", seed: int = 0,
                 prefix: str = "mlp", init_index: int = 0):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"widths must chain >= 2 positive sizes, got {widths}")
        if activation not in _ACTS:
            raise ValueError(f"unsupported activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.prefix = prefix
        rng = stream_rng(seed, "init", init_index)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        for k in range(1, len(widths)):
            self.params[f"{prefix}.W{k}"] = glorot_uniform(rng, widths[k], widths[k - 1])
            self.params[f"{prefix}.b{k}"] = np.zeros(widths[k])
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def emit(self, graph: ad.Graph, x_id: int) -> int:
        p = self.prefix
        h = x_id
        n_layers = len(self.widths) - 1
        for k in range(1, n_layers + 1):
            w = graph.param(f"{p}.W{k}", self.params[f"{p}.W{k}"].shape)
            b = graph.param(f"{p}.b{k}", self.params[f"{p}.b{k}"].shape)
            h = graph.add(graph.matmul(w, h), b)
            if k < n_layers:
                h = getattr(graph, self.activation)(h)
        return h

    def _graph(self):
        if self._cache is None:
            g = ad.Graph()
            x = g.input("x", (self.in_dim,))
            out = self.emit(g, x)
            g.freeze()
            self._cache = (g, out)
        return self._cache

    def __call__(self, x) -> np.ndarray:
        g, out = self._graph()
        b = dict(self.params)
        b["x"] = x
        return np.asarray(ad.forward(g, b)[out])

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        p = self.prefix
        n_layers = len(self.widths) - 1
        for k in range(1, n_layers + 1):
            h = h @ self.params[f"{p}.W{k}"].T + self.params[f"{p}.b{k}"]
            if k < n_layers:
                h = _act_apply(self.activation, h)
        return h[0] if single else h

    def jacobian_batch(self, x: np.ndarray) -> np.ndarray:
        """d(out)/d(in) per row; shape (batch, out_dim, in_dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = self.prefix
        n_layers = len(self.widths) - 1
        h = x
        jac = None  # None means identity
        for k in range(1, n_layers + 1):
            w = self.params[f"{p}.W{k}"]
            pre = h @ w.T + self.params[f"{p}.b{k}"]
            wj = w[None, :, :] if jac is None else np.einsum("ij,bjk->bik", w, jac)
            if k < n_layers:
                d = _act_derivative(self.activation, pre)
                jac = d[:, :, None] * wj
                h = _act_apply(self.activation, pre)
            else:
                jac = wj
        return jac


class ICNN:
    """Scalar-output network convex in its input.

    Pass-through weights between hidden layers are stored raw and squared
    elementwise at use, so they are nonnegative for any parameter value and
    convexity holds unconditionally (softplus is convex and nondecreasing).
    Init scale of the raw weights is the fourth root of the usual Glorot
    limit so the squared weights land at Glorot magnitude.
    """

    def __init__(self, dim: int, hidden=(64, 64), seed: int = 0,
                 prefix: str = "icnn", init_index: int = 0):
        hidden = tuple(int(h) for h in hidden)
        if not hidden or any(h < 1 for h in hidden):
            raise ValueError("hidden widths must be non-empty positives")
        self.dim = int(dim)
        self.hidden = hidden
        self.prefix = prefix
        rng = stream_rng(seed, "init", init_index)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        p = prefix
        sizes = (self.dim,) + hidden + (1,)
        for k in range(1, len(sizes)):
            self.params[f"{p}.A{k}"] = glorot_uniform(rng, sizes[k], self.dim)
            self.params[f"{p}.b{k}"] = np.zeros(sizes[k])
            if k >= 2:
                limit = math.sqrt(6.0 / (sizes[k] + sizes[k - 1])) ** 0.5
                self.params[f"{p}.V{k}"] = rng.uniform(
                    -limit, limit, size=(sizes[k], sizes[k - 1]))
        self._cache = None

    def emit(self, graph: ad.Graph, x_id: int) -> int:
        """Append phi(x); returns a scalar node."""
        p = self.prefix
        sizes = (self.dim,) + self.hidden + (1,)
        h = None
        for k in range(1, len(sizes)):
            a = graph.param(f"{p}.A{k}", self.params[f"{p}.A{k}"].shape)
            b = graph.param(f"{p}.b{k}", self.params[f"{p}.b{k}"].shape)
            pre = graph.add(graph.matmul(a, x_id), b)
            if k >= 2:
                v = graph.param(f"{p}.V{k}", self.params[f"{p}.V{k}"].shape)
                pre = graph.add(graph.matmul(graph.square(v), h), pre)
            h = graph.softplus(pre) if k < len(sizes) - 1 else pre
        return graph.sum(h)

    def _graph(self):
        if self._cache is None:
            g = ad.Graph()
            x = g.input("x", (self.dim,))
            out = self.emit(g, x)
            g.freeze()
            self._cache = (g, out)
        return self._cache

    def __call__(self, x) -> float:
        g, out = self._graph()
        b = dict(self.params)
        b["x"] = x
        return float(ad.forward(g, b)[out])

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = self.prefix
        sizes = (self.dim,) + self.hidden + (1,)
        h = None
        for k in range(1, len(sizes)):
            pre = x @ self.params[f"{p}.A{k}"].T + self.params[f"{p}.b{k}"]
            if k >= 2:
                pre = pre + h @ (self.params[f"{p}.V{k}"] ** 2).T
            h = np.logaddexp(0.0, pre) if k < len(sizes) - 1 else pre
        return h[:, 0]

    def gradient_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = self.prefix
        sizes = (self.dim,) + self.hidden + (1,)
        h = None
        jac = None  # d(hidden)/d(x), shape (batch, width, dim)
        for k in range(1, len(sizes)):
            a = self.params[f"{p}.A{k}"]
            pre = x @ a.T + self.params[f"{p}.b{k}"]
            inner = np.broadcast_to(a, (x.shape[0],) + a.shape)
            if k >= 2:
                w = self.params[f"{p}.V{k}"] ** 2
                pre = pre + h @ w.T
                inner = inner + np.einsum("ij,bjk->bik", w, jac)
            if k < len(sizes) - 1:
                d = np.exp(-np.logaddexp(0.0, -pre))  # sigmoid
                jac = d[:, :, None] * inner
                h = np.logaddexp(0.0, pre)
            else:
                jac = inner
        return jac[:, 0, :]
