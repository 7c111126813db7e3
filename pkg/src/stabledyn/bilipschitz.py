"""Residual network with certified bi-Lipschitz bounds.

The map is ``g(x) = a x + gamma * sum_k Y_k z_k + b_y`` with hidden states
``z_1 = act(U_1 x + b_1)`` and ``z_k = act(W_k z_{k-1} + U_k x + b_k)``.
With identity gain ``a = (lip_min + lip_max) / 2`` and the residual path
rescaled so its Lipschitz constant provably stays below
``(lip_max - lip_min) / 2``, pairwise distances satisfy

    lip_min |x - x'|  <=  |g(x) - g(x')|  <=  lip_max |x - x'|

for every parameter value, trained or not.  The rescale ``gamma`` comes
from a spectral-norm product bound and is recomputed (not differentiated)
whenever the weights change.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .rng import stream_rng, uniform_in_ball

__all__ = ["BiLipNet", "ConvergenceError", "spectral_norm"]

_LOG2 = math.log(2.0)


class ConvergenceError(Exception):
    """Fixed-point inversion failed to reach tolerance (certification bug)."""


def spectral_norm(mat: np.ndarray, tol: float = 1e-9, max_iter: int = 500) -> float:
    """Largest singular value by power iteration on ``mat.T @ mat``.

    Deterministic start vector; stops at relative tolerance ``tol`` or
    after ``max_iter`` rounds.
    """
    mat = np.asarray(mat, dtype=np.float64)
    m, n = mat.shape
    # ramp breaks ties with sign-structured matrices; never zero
    v = 1.0 + np.arange(n, dtype=np.float64) / (3.0 * max(n, 1))
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        u = mat @ v
        sigma_new = float(np.linalg.norm(u))
        if sigma_new == 0.0:
            return 0.0
        w = mat.T @ (u / sigma_new)
        wn = float(np.linalg.norm(w))
        if wn == 0.0:
            return sigma_new
        v = w / wn
        if abs(sigma_new - sigma) <= tol * max(1.0, sigma_new):
            return sigma_new
        sigma = sigma_new
    return sigma


def glorot_uniform(rng, fan_out: int, fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


class BiLipNet:
    """Certified (lip_min, lip_max) bi-Lipschitz map on R^dim."""

    def __init__(self, dim: int, lip_min: float = 0.1, lip_max: float = 2.0,
                 hidden=(32, 32), activation: str = "tanh", seed: int = 0,
                 prefix: str = "g", init_index: int = 0):
        if dim < 1:
            raise ValueError("dim must be positive")
        if not (0.0 < lip_min <= lip_max):
            raise ValueError(
                f"need 0 < lip_min <= lip_max, got ({lip_min}, {lip_max})")
        hidden = tuple(int(h) for h in hidden)
        if not hidden or any(h < 1 for h in hidden):
            raise ValueError("hidden widths must be a non-empty list of positives")
        if activation not in ("tanh", "softplus"):
            raise ValueError(f"unsupported activation {activation!r}")
        self.dim = dim
        self.lip_min = float(lip_min)
        self.lip_max = float(lip_max)
        self.hidden = hidden
        self.activation = activation
        self.prefix = prefix
        self.gain = 0.5 * (self.lip_min + self.lip_max)
        self.residual_budget = 0.5 * (self.lip_max - self.lip_min)

        rng = stream_rng(seed, "init", init_index)
        self.params: OrderedDict[str, np.ndarray] = OrderedDict()
        p = prefix
        for k, h in enumerate(hidden, start=1):
            if k >= 2:
                self.params[f"{p}.W{k}"] = glorot_uniform(rng, h, hidden[k - 2])
            self.params[f"{p}.U{k}"] = glorot_uniform(rng, h, dim)
            self.params[f"{p}.b{k}"] = np.zeros(h)
        for k, h in enumerate(hidden, start=1):
            self.params[f"{p}.Y{k}"] = glorot_uniform(rng, dim, h)
        self.params[f"{p}.by"] = np.zeros(dim)

        self.bound = 0.0
        self.gamma = 1.0
        self.refresh_certification()
        self._forward_cache = None

    # -- graph emission ---------------------------------------------------

    def _act(self, graph: ad.Graph, pre: int) -> int:
        if self.activation == "tanh":
            return graph.tanh(pre)
        # softplus shifted to vanish at zero; still 1-Lipschitz
        shape = graph.nodes[pre].shape
        shift = graph.const(np.full(shape, -_LOG2))
        return graph.add(graph.softplus(pre), shift)

    def emit(self, graph: ad.Graph, x_id: int) -> int:
        """Append g(x) to ``graph`` reading this net's param leaves."""
        p = self.prefix
        gamma = graph.input(f"{p}.gamma", ())
        z = None
        res = None
        for k, h in enumerate(self.hidden, start=1):
            u = graph.param(f"{p}.U{k}", (h, self.dim))
            b = graph.param(f"{p}.b{k}", (h,))
            pre = graph.add(graph.matmul(u, x_id), b)
            if k >= 2:
                w = graph.param(f"{p}.W{k}", (h, self.hidden[k - 2]))
                pre = graph.add(graph.matmul(w, z), pre)
            z = self._act(graph, pre)
            y = graph.param(f"{p}.Y{k}", (self.dim, h))
            term = graph.matmul(y, z)
            res = term if res is None else graph.add(res, term)
        by = graph.param(f"{p}.by", (self.dim,))
        out = graph.add(graph.smul(x_id, self.gain),
                        graph.add(graph.mul(gamma, res), by))
        return out

    def bindings(self) -> dict:
        b = dict(self.params)
        b[f"{self.prefix}.gamma"] = np.float64(self.gamma)
        return b

    # -- evaluation ---------------------------------------------------------

    def _graph(self):
        if self._forward_cache is None:
            g = ad.Graph()
            x = g.input("x", (self.dim,))
            out = self.emit(g, x)
            g.freeze()
            self._forward_cache = (g, out)
        return self._forward_cache

    def __call__(self, x) -> np.ndarray:
        g, out = self._graph()
        b = self.bindings()
        b["x"] = x
        return np.asarray(ad.forward(g, b)[out])

    def forward_batch(self, x: np.ndarray) -> np.ndarray:
        """Closed-form batched evaluation; matches the graph to roundoff."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        zs, _ = self._hidden_batch(xb)
        out = self._combine_batch(xb, zs)
        return out[0] if single else out

    def _hidden_batch(self, x: np.ndarray):
        p = self.prefix
        zs, pres = [], []
        z = None
        for k in range(1, len(self.hidden) + 1):
            pre = x @ self.params[f"{p}.U{k}"].T + self.params[f"{p}.b{k}"]
            if k >= 2:
                pre = pre + z @ self.params[f"{p}.W{k}"].T
            pres.append(pre)
            z = np.tanh(pre) if self.activation == "tanh" else (
                np.logaddexp(0.0, pre) - _LOG2)
            zs.append(z)
        return zs, pres

    def _combine_batch(self, x, zs):
        p = self.prefix
        res = np.zeros_like(x)
        for k, z in enumerate(zs, start=1):
            res += z @ self.params[f"{p}.Y{k}"].T
        return self.gain * x + self.gamma * res + self.params[f"{p}.by"]

    def jacobian_batch(self, x: np.ndarray) -> np.ndarray:
        """dg/dx at each row of ``x``; shape (batch, dim, dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = self.prefix
        zs, pres = self._hidden_batch(x)
        jac = None
        total = np.zeros((x.shape[0], self.dim, self.dim))
        for k in range(1, len(self.hidden) + 1):
            if self.activation == "tanh":
                dact = 1.0 - zs[k - 1] ** 2
            else:
                dact = 1.0 / (1.0 + np.exp(-pres[k - 1]))
            u = self.params[f"{p}.U{k}"]
            inner = u[None, :, :] if jac is None else (
                np.einsum("ij,bjk->bik", self.params[f"{p}.W{k}"], jac) + u[None])
            jac = dact[:, :, None] * inner
            total += np.einsum("ij,bjk->bik", self.params[f"{p}.Y{k}"], jac)
        return self.gain * np.eye(self.dim)[None] + self.gamma * total

    # -- certification ------------------------------------------------------

    def certify(self) -> tuple[float, float]:
        """Residual-path Lipschitz bound and the rescale that enforces it.

        Layer constants chain as c_1 = |U_1|, c_k = |W_k| c_{k-1} + |U_k|
        (activations are 1-Lipschitz); the path bound is sum_k |Y_k| c_k.
        """
        p = self.prefix
        bound = 0.0
        c = 0.0
        for k in range(1, len(self.hidden) + 1):
            cu = spectral_norm(self.params[f"{p}.U{k}"])
            if k == 1:
                c = cu
            else:
                c = spectral_norm(self.params[f"{p}.W{k}"]) * c + cu
            bound += spectral_norm(self.params[f"{p}.Y{k}"]) * c
        if bound == 0.0:
            gamma = 1.0
        else:
            gamma = min(1.0, self.residual_budget / bound)
        return bound, gamma

    def refresh_certification(self) -> tuple[float, float]:
        self.bound, self.gamma = self.certify()
        return self.bound, self.gamma

    # -- inversion ------------------------------------------------------------

    def inverse(self, y, tol: float = 1e-10) -> np.ndarray:
        x, _ = self._invert(y, tol)
        return x

    def _invert(self, y, tol: float, max_iter: int = 10_000):
        if tol <= 0.0:
            raise ValueError("tol must be positive")
        y = np.asarray(y, dtype=np.float64)
        p = self.prefix
        by = self.params[f"{p}.by"]
        x = (y - by) / self.gain
        for it in range(max_iter):
            zs, _ = self._hidden_batch(x[None, :])
            res = np.zeros(self.dim)
            for k, z in enumerate(zs, start=1):
                res += (z @ self.params[f"{p}.Y{k}"].T)[0]
            gx = self.gain * x + self.gamma * res + by
            if float(np.linalg.norm(gx - y)) <= tol:
                return x, it
            x = (y - by - self.gamma * res) / self.gain
        raise ConvergenceError(
            f"inversion did not reach tol={tol} in {max_iter} iterations; "
            "the certified contraction bound appears violated")

    # -- empirical probe -------------------------------------------------------

    def lipschitz_probe(self, n_pairs: int, radius: float = 5.0,
                        seed: int = 0) -> tuple[float, float]:
        """Min/max distance-expansion ratio over random pairs in a ball."""
        if n_pairs < 1:
            raise ValueError("n_pairs must be at least 1")
        rng = stream_rng(seed, "probe")
        center = np.zeros(self.dim)
        xa = uniform_in_ball(rng, center, radius, n_pairs)
        xb = uniform_in_ball(rng, center, radius, n_pairs)
        same = np.all(xa == xb, axis=1)
        xb[same] += 1e-3
        num = np.linalg.norm(self.forward_batch(xa) - self.forward_batch(xb), axis=1)
        den = np.linalg.norm(xa - xb, axis=1)
        ratios = num / den
        return float(np.min(ratios)), float(np.max(ratios))

    # -- persistence -------------------------------------------------------------

    def meta(self) -> dict:
        return {
            "dim": float(self.dim),
            "lip_min": self.lip_min,
            "lip_max": self.lip_max,
            "hidden": [float(h) for h in self.hidden],
            "activation": 0.0 if self.activation == "tanh" else 1.0,
            "gamma": self.gamma,
            "bound": self.bound,
        }

    @classmethod
    def from_records(cls, records: dict, prefix: str = "g") -> "BiLipNet":
        dim = int(records[f"{prefix}.meta.dim"])
        hidden = tuple(int(h) for h in records[f"{prefix}.meta.hidden"])
        act = "tanh" if float(records[f"{prefix}.meta.activation"]) == 0.0 else "softplus"
        net = cls(dim, float(records[f"{prefix}.meta.lip_min"]),
                  float(records[f"{prefix}.meta.lip_max"]), hidden, act,
                  seed=0, prefix=prefix)
        for name in net.params:
            net.params[name] = np.array(records[name], dtype=np.float64)
        # stored rescale is authoritative for bit-exact round trips
        net.gamma = float(records[f"{prefix}.meta.gamma"])
        net.bound = float(records[f"{prefix}.meta.bound"])
        return net

    def to_records(self) -> OrderedDict:
        rec = OrderedDict(self.params)
        m = self.meta()
        p = self.prefix
        rec[f"{p}.meta.dim"] = np.float64(m["dim"])
        rec[f"{p}.meta.lip_min"] = np.float64(m["lip_min"])
        rec[f"{p}.meta.lip_max"] = np.float64(m["lip_max"])
        rec[f"{p}.meta.hidden"] = np.array(m["hidden"])
        rec[f"{p}.meta.activation"] = np.float64(m["activation"])
        rec[f"{p}.meta.gamma"] = np.float64(m["gamma"])
        rec[f"{p}.meta.bound"] = np.float64(m["bound"])
        return rec
