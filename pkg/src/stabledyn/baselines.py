"""Projection-based stable baselines.

An unconstrained field net f_hat is paired with a learned scalar function
V; sampled velocities are corrected so V decays along the flow:

    f(x) = f_hat(x) - grad V * relu(grad V . f_hat + alpha V) / |grad V|^2

Two V choices: the squared output of a plain MLP (positive semidefinite
but not necessarily definite), and an input-convex network shifted to
vanish at the origin plus a small quadratic term.  Where |grad V| falls
below ``grad_floor`` the correction is undefined; the raw field is
returned and the event counted.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .fieldmodel import GraphFieldModel
from .nets import ICNN, MLP

__all__ = ["MlpLyapunov", "IcnnLyapunov", "ProjectedField", "project_velocity"]

_STREAM_FHAT = 2
_STREAM_VNET = 3
_STREAM_ICNN = 4


def project_velocity(f_hat: np.ndarray, grad_v: np.ndarray, value: float,
                     alpha: float, grad_floor: float):
    """Apply the decay correction to one velocity; returns (velocity, flagged)."""
    q = float(grad_v @ grad_v)
    if q < grad_floor ** 2:
        return np.array(f_hat, dtype=np.float64), True
    s = float(grad_v @ f_hat) + alpha * value
    if s <= 0.0:
        return np.array(f_hat, dtype=np.float64), False
    return f_hat - grad_v * (s / q), False


class MlpLyapunov:
    """V(x) = |g(x)|^2 for a plain MLP g (no positive-definiteness claim)."""

    def __init__(self, dim: int, hidden=(64, 64), activation: str = "tanh",
                 seed: int = 0):
        self.dim = int(dim)
        self.net = MLP((dim,) + tuple(hidden[:-1]) + (hidden[-1],),
                       activation=activation, seed=seed, prefix="vnet",
                       init_index=_STREAM_VNET)

    tag = "sd-mlp"

    @property
    def params(self) -> OrderedDict:
        return self.net.params

    def emit(self, graph: ad.Graph, x_id: int) -> int:
        return graph.sum(graph.square(self.net.emit(graph, x_id)))

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        g = self.net.forward_batch(np.atleast_2d(x))
        return np.sum(g * g, axis=1)

    def gradient_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = self.net.forward_batch(x)
        jac = self.net.jacobian_batch(x)
        return 2.0 * np.einsum("bij,bi->bj", jac, g)

    def meta(self) -> dict:
        return {"hidden": [float(w) for w in self.net.widths[1:]],
                "activation": float(("tanh", "relu", "softplus").index(
                    self.net.activation))}


class IcnnLyapunov:
    """V(x) = phi(x) - phi(0) + quad_eps |x|^2 with phi input-convex."""

    def __init__(self, dim: int, hidden=(64, 64), quad_eps: float = 0.01,
                 seed: int = 0):
        self.dim = int(dim)
        self.quad_eps = float(quad_eps)
        self.icnn = ICNN(dim, hidden, seed=seed, init_index=_STREAM_ICNN)

    tag = "sd-icnn"

    @property
    def params(self) -> OrderedDict:
        return self.icnn.params

    def emit(self, graph: ad.Graph, x_id: int) -> int:
        phi_x = self.icnn.emit(graph, x_id)
        phi_0 = self.icnn.emit(graph, graph.const(np.zeros(self.dim)))
        quad = graph.smul(graph.sum(graph.square(x_id)), self.quad_eps)
        return graph.add(graph.sub(phi_x, phi_0), quad)

    def value_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        phi0 = self.icnn.forward_batch(np.zeros((1, self.dim)))[0]
        return (self.icnn.forward_batch(x) - phi0
                + self.quad_eps * np.sum(x * x, axis=1))

    def gradient_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self.icnn.gradient_batch(x) + 2.0 * self.quad_eps * x

    def meta(self) -> dict:
        return {"hidden": [float(w) for w in self.icnn.hidden],
                "quad_eps": self.quad_eps}


class ProjectedField(GraphFieldModel):
    """Baseline pair (f_hat, V) with the decay projection applied pointwise."""

    def __init__(self, field_net: MLP, lyapunov, alpha: float = 0.5,
                 grad_floor: float = 1e-8):
        if alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if grad_floor <= 0.0:
            raise ValueError("grad_floor must be positive")
        if field_net.in_dim != field_net.out_dim or field_net.in_dim != lyapunov.dim:
            raise ValueError("field net must map the Lyapunov dimension to itself")
        self.f_hat = field_net
        self.lyapunov = lyapunov
        self.alpha = float(alpha)
        self.grad_floor = float(grad_floor)
        self.dim = field_net.in_dim
        self.floor_events = 0
        self.params = OrderedDict()
        self.params.update(field_net.params)
        self.params.update(lyapunov.params)
        self._proj_cache = None
        self._raw_cache = None

    @property
    def kind(self) -> str:
        return self.lyapunov.tag

    @classmethod
    def build(cls, dim: int = 4, kind: str = "sd-mlp", fhat_hidden=(100, 100),
              v_hidden=(64, 64), activation: str = "tanh", alpha: float = 0.5,
              grad_floor: float = 1e-8, quad_eps: float = 0.01,
              seed: int = 0) -> "ProjectedField":
        fnet = MLP((dim,) + tuple(fhat_hidden) + (dim,), activation=activation,
                   seed=seed, prefix="fhat", init_index=_STREAM_FHAT)
        if kind == "sd-mlp":
            lyap = MlpLyapunov(dim, v_hidden, activation=activation, seed=seed)
        elif kind == "sd-icnn":
            lyap = IcnnLyapunov(dim, v_hidden, quad_eps=quad_eps, seed=seed)
        else:
            raise ValueError(f"unknown projected-field kind {kind!r}")
        return cls(fnet, lyap, alpha=alpha, grad_floor=grad_floor)

    # -- graphs ------------------------------------------------------------

    def _build_projected(self):
        g = ad.Graph()
        x = g.input("x", (self.dim,))
        value = self.lyapunov.emit(g, x)
        gg, grad = ad.make_gradient_graph(g, value, "x")
        fhat = self.f_hat.emit(gg, x)
        drive = gg.add(gg.dot(grad, fhat), gg.smul(value, self.alpha))
        active = gg.relu(drive)
        gsq = gg.sum(gg.square(grad))
        correction = gg.mul(grad, gg.mul(active, gg.reciprocal(gsq)))
        field = gg.sub(fhat, correction)
        t = gg.input("target", (self.dim,))
        loss = gg.sum(gg.square(gg.sub(field, t)))
        ids = {"value": value, "grad": grad, "fhat": fhat, "gsq": gsq,
               "field": field, "loss": loss}
        return gg, ids

    def _projected(self):
        if self._proj_cache is None:
            gg, ids = self._build_projected()
            gg.freeze()
            self._proj_cache = (gg, ids)
        return self._proj_cache

    def _raw(self):
        if self._raw_cache is None:
            g = ad.Graph()
            x = g.input("x", (self.dim,))
            fhat = self.f_hat.emit(g, x)
            t = g.input("target", (self.dim,))
            loss = g.sum(g.square(g.sub(fhat, t)))
            g.freeze()
            self._raw_cache = (g, {"fhat": fhat, "loss": loss})
        return self._raw_cache

    # -- evaluation ----------------------------------------------------------

    def lyapunov_value(self, x) -> float:
        return float(self.lyapunov.value_batch(np.atleast_2d(x))[0])

    def lyapunov_gradient(self, x) -> np.ndarray:
        return self.lyapunov.gradient_batch(np.atleast_2d(x))[0]

    def field(self, x) -> np.ndarray:
        gg, ids = self._projected()
        b = dict(self.params)
        b["x"] = x
        b["target"] = np.zeros(self.dim)
        vals = ad.forward(gg, b, check_finite=False)
        if float(vals[ids["gsq"]]) < self.grad_floor ** 2:
            self.floor_events += 1
            return np.asarray(vals[ids["fhat"]])
        return np.asarray(vals[ids["field"]])

    def field_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        fhat = self.f_hat.forward_batch(xb)
        grad = self.lyapunov.gradient_batch(xb)
        value = self.lyapunov.value_batch(xb)
        gsq = np.sum(grad * grad, axis=1)
        drive = np.einsum("bi,bi->b", grad, fhat) + self.alpha * value
        ok = gsq >= self.grad_floor ** 2
        self.floor_events += int(np.count_nonzero(~ok))
        scale = np.where(ok, np.maximum(drive, 0.0) / np.where(ok, gsq, 1.0), 0.0)
        out = fhat - grad * scale[:, None]
        return out[0] if single else out

    def sample_loss_grads(self, x, v):
        gg, ids = self._projected()
        b = dict(self.params)
        b["x"] = x
        b["target"] = v
        values = ad.forward(gg, b, check_finite=False)
        if float(values[ids["gsq"]]) >= self.grad_floor ** 2:
            loss = float(values[ids["loss"]])
            grads = ad.backward(gg, ids["loss"], b, values=values)
            return loss, {k: grads[k] for k in self.params}
        # projection undefined here: fall back to the raw field
        self.floor_events += 1
        graw, rids = self._raw()
        values = ad.forward(graw, b, check_finite=False)
        loss = float(values[rids["loss"]])
        grads = ad.backward(graw, rids["loss"], b, values=values)
        zero = {k: np.zeros_like(p) for k, p in self.params.items()}
        zero.update({k: grads[k] for k in self.f_hat.params})
        return loss, zero

    # -- persistence ------------------------------------------------------------

    def to_records(self) -> OrderedDict:
        rec = OrderedDict(self.params)
        rec["meta.dim"] = np.float64(self.dim)
        rec["meta.alpha"] = np.float64(self.alpha)
        rec["meta.grad_floor"] = np.float64(self.grad_floor)
        rec["fhat.meta.hidden"] = np.array(
            [float(w) for w in self.f_hat.widths[1:-1]])
        rec["fhat.meta.activation"] = np.float64(
            ("tanh", "relu", "softplus").index(self.f_hat.activation))
        m = self.lyapunov.meta()
        rec["v.meta.hidden"] = np.array(m["hidden"])
        if self.kind == "sd-icnn":
            rec["v.meta.quad_eps"] = np.float64(m["quad_eps"])
        else:
            rec["v.meta.activation"] = np.float64(m["activation"])
        return rec

    @classmethod
    def from_records(cls, records: dict, kind: str) -> "ProjectedField":
        dim = int(records["meta.dim"])
        acts = ("tanh", "relu", "softplus")
        act = acts[int(records["fhat.meta.activation"])]
        fnet = MLP((dim,) + tuple(int(w) for w in records["fhat.meta.hidden"])
                   + (dim,), activation=act, prefix="fhat")
        v_hidden = tuple(int(w) for w in records["v.meta.hidden"])
        if kind == "sd-icnn":
            lyap = IcnnLyapunov(dim, v_hidden,
                                quad_eps=float(records["v.meta.quad_eps"]))
        elif kind == "sd-mlp":
            lyap = MlpLyapunov(dim, v_hidden,
                               activation=acts[int(records["v.meta.activation"])])
        else:
            raise ValueError(f"unknown projected-field kind {kind!r}")
        model = cls(fnet, lyap, alpha=float(records["meta.alpha"]),
                    grad_floor=float(records["meta.grad_floor"]))
        for name, arr in model.params.items():
            arr[...] = np.asarray(records[name], dtype=np.float64)
        return model
