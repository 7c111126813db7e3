"""Energy functions of the form H(x) = 0.5 |g(x) - r|^2.

With g a certified (lip_min, lip_max) bi-Lipschitz map, H has a unique
minimum, satisfies the gradient-dominance (Polyak-Lojasiewicz) inequality
|grad H|^2 >= 2 lip_min^2 H, and is squeezed between the quadratics
0.5 lip_min^2 |x - x*|^2 and 0.5 lip_max^2 |x - x*|^2.  Those three facts
are what the stability certificates of the field models rest on.

Two anchoring modes:

* known equilibrium: r = g(x*) for a user-supplied x*, so H(x*) = 0;
* free: r = 0 and the equilibrium x* = g^{-1}(0) is implied by the
  weights, recoverable by fixed-point inversion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bilipschitz import BiLipNet
from .rng import stream_rng, uniform_in_ball

__all__ = ["Hamiltonian", "LandscapeReport", "landscape_report"]


class Hamiltonian:
    def __init__(self, net: BiLipNet, anchor=None):
        self.net = net
        if anchor is not None:
            anchor = np.asarray(anchor, dtype=np.float64)
            if anchor.shape != (net.dim,):
                raise ValueError(
                    f"anchor shape {anchor.shape} does not match dim {net.dim}")
        self.anchor = anchor
        self._value_cache = None
        self._grad_cache = None

    @property
    def pl_constant(self) -> float:
        """Gradient-dominance modulus: |grad H|^2 >= 2 * pl_constant * H."""
        return self.net.lip_min ** 2

    # -- graph emission -----------------------------------------------------

    def emit(self, graph: ad.Graph, x_id: int) -> int:
        gx = self.net.emit(graph, x_id)
        if self.anchor is not None:
            ref = self.net.emit(graph, graph.const(self.anchor))
            diff = graph.sub(gx, ref)
        else:
            diff = gx
        return graph.smul(graph.sum(graph.square(diff)), 0.5)

    def _graphs(self):
        if self._value_cache is None:
            g = ad.Graph()
            x = g.input("x", (self.net.dim,))
            h = self.emit(g, x)
            gg, grad = ad.make_gradient_graph(g, h, "x")
            g.freeze()
            gg.freeze()
            self._value_cache = (g, h)
            self._grad_cache = (gg, grad, h)
        return self._value_cache, self._grad_cache

    # -- evaluation -----------------------------------------------------------

    def value(self, x) -> float:
        (g, h), _ = self._graphs()
        b = self.net.bindings()
        b["x"] = x
        return float(ad.forward(g, b)[h])

    def gradient(self, x) -> np.ndarray:
        _, (gg, grad, _) = self._graphs()
        b = self.net.bindings()
        b["x"] = x
        return np.asarray(ad.forward(gg, b)[grad])

    def _reference(self) -> np.ndarray:
        if self.anchor is None:
            return np.zeros(self.net.dim)
        return self.net.forward_batch(self.anchor)

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = self.net.forward_batch(x) - self._reference()
        return 0.5 * np.sum(diff * diff, axis=1)

    def gradient_batch(self, x: np.ndarray) -> np.ndarray:
        """grad H = J_g(x)^T (g(x) - r), evaluated in closed form."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = self.net.forward_batch(x) - self._reference()
        jac = self.net.jacobian_batch(x)
        return np.einsum("bij,bi->bj", jac, diff)

    def equilibrium(self, tol: float = 1e-10) -> np.ndarray:
        if self.anchor is not None:
            return self.anchor.copy()
        return self.net.inverse(np.zeros(self.net.dim), tol=tol)


@dataclass
class LandscapeReport:
    """Worst-case slacks of the three energy-shape inequalities."""
    pl_margin_min: float
    lower_margin_min: float
    upper_margin_min: float

    def ok(self, slack: float = 1e-9) -> bool:
        return (self.pl_margin_min >= -slack
                and self.lower_margin_min >= -slack
                and self.upper_margin_min >= -slack)


def landscape_report(ham: Hamiltonian, n_samples: int, radius: float = 5.0,
                     seed: int = 0) -> LandscapeReport:
    """Sample the gradient-dominance and quadratic-bound inequalities."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    star = ham.equilibrium()
    rng = stream_rng(seed, "probe")
    xs = uniform_in_ball(rng, star, radius, n_samples)
    h = ham.value_batch(xs)
    grad = ham.gradient_batch(xs)
    gsq = np.sum(grad * grad, axis=1)
    dist_sq = np.sum((xs - star) ** 2, axis=1)
    lo = 0.5 * ham.net.lip_min ** 2 * dist_sq
    hi = 0.5 * ham.net.lip_max ** 2 * dist_sq
    return LandscapeReport(
        pl_margin_min=float(np.min(gsq - 2.0 * ham.pl_constant * h)),
        lower_margin_min=float(np.min(h - lo)),
        upper_margin_min=float(np.min(hi - h)),
    )
