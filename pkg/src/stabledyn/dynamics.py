"""Stable Hamiltonian vector fields and their passive port extension.

The closed model is ``dx/dt = (J(x) - R(x)) grad H(x)`` with H an anchored
bi-Lipschitz energy, J exactly skew-symmetric and R symmetric with
``R >= floor * I`` by construction (Gram form).  Energy therefore never
increases along trajectories, and with a positive damping floor the
equilibrium is globally exponentially stable with overshoot
``lip_max / lip_min`` and decay rate ``floor * lip_min^2``.

The open variant adds an input port: ``dx/dt += B(x) u`` with collocated
output ``y = B(x)^T grad H``, which is passive with storage function H
(the port terms cancel in the energy balance, leaving the damping term).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bilipschitz import BiLipNet
from .fieldmodel import GraphFieldModel
from .hamiltonian import Hamiltonian
from .nets import MLP
from .rng import stream_rng, uniform_in_ball

__all__ = [
    "JRNet",
    "HamiltonianField",
    "PortHamiltonianField",
    "StabilityCertificate",
    "descent_audit",
    "passivity_audit",
]

# fixed init-stream indices so composed submodels never share draws
_STREAM_BILIP = 0
_STREAM_JR = 1
_STREAM_PORT = 5


class JRNet:
    """Interconnection/damping matrix pair from one shared trunk MLP.

    The trunk maps the state to 2*dim^2 numbers, split row-major into two
    dim-by-dim matrices: S first, then L.  The emitted matrices are
    J = S - S^T (skew to the last bit) and R = L^T L + floor * I.
    """

    def __init__(self, dim: int, hidden=(90, 90), damping_floor: float = 0.01,
                 seed: int = 0, prefix: str = "jr"):
        if damping_floor < 0.0:
            raise ValueError("damping_floor must be nonnegative")
        self.dim = int(dim)
        self.damping_floor = float(damping_floor)
        self.prefix = prefix
        self.mlp = MLP((dim,) + tuple(hidden) + (2 * dim * dim,),
                       activation="tanh", seed=seed, prefix=f"{prefix}.mlp",
                       init_index=_STREAM_JR)
        self._cache = None

    @property
    def params(self) -> OrderedDict:
        return self.mlp.params

    def emit(self, graph: ad.Graph, x_id: int):
        n = self.dim
        out = self.mlp.emit(graph, x_id)
        s_mat = graph.reshape(graph.slice(out, 0, n * n), (n, n))
        l_mat = graph.reshape(graph.slice(out, n * n, 2 * n * n), (n, n))
        j_mat = graph.sub(s_mat, graph.transpose(s_mat))
        gram = graph.matmul(graph.transpose(l_mat), l_mat)
        r_mat = graph.add(gram, graph.const(self.damping_floor * np.eye(n)))
        return j_mat, r_mat

    def matrices(self, x):
        if self._cache is None:
            g = ad.Graph()
            xid = g.input("x", (self.dim,))
            j_id, r_id = self.emit(g, xid)
            g.freeze()
            self._cache = (g, j_id, r_id)
        g, j_id, r_id = self._cache
        b = dict(self.params)
        b["x"] = x
        vals = ad.forward(g, b)
        return np.asarray(vals[j_id]), np.asarray(vals[r_id])

    def matrices_batch(self, x: np.ndarray):
        n = self.dim
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self.mlp.forward_batch(x)
        s = out[:, : n * n].reshape(-1, n, n)
        l = out[:, n * n:].reshape(-1, n, n)
        j = s - np.swapaxes(s, 1, 2)
        r = np.einsum("bki,bkj->bij", l, l) + self.damping_floor * np.eye(n)
        return j, r


@dataclass
class StabilityCertificate:
    """Constants the trajectory audits check against."""
    overshoot: float    # lip_max / lip_min
    decay_rate: float   # damping_floor * lip_min^2
    lip_min: float
    lip_max: float
    damping_floor: float

    def containment_radius(self, eps: float) -> float:
        """Initial-ball radius that keeps trajectories inside radius eps."""
        return eps * self.lip_min / self.lip_max


class HamiltonianField(GraphFieldModel):
    """Closed stable model: velocity = (J - R) grad H."""

    kind = "shnd"

    def __init__(self, energy: Hamiltonian, structure: JRNet):
        if energy.net.dim != structure.dim:
            raise ValueError("energy and structure dimensions differ")
        self.energy = energy
        self.structure = structure
        self.dim = energy.net.dim
        self.params = OrderedDict()
        self.params.update(energy.net.params)
        self.params.update(structure.params)
        self._field_cache = None
        self._loss_cache = None

    @classmethod
    def build(cls, dim: int = 4, lip_min: float = 0.1, lip_max: float = 2.0,
              damping_floor: float = 0.01, bilip_hidden=(32, 32),
              jr_hidden=(90, 90), activation: str = "tanh", anchor=None,
              seed: int = 0) -> "HamiltonianField":
        net = BiLipNet(dim, lip_min, lip_max, bilip_hidden, activation,
                       seed=seed, init_index=_STREAM_BILIP)
        energy = Hamiltonian(net, anchor=anchor)
        structure = JRNet(dim, jr_hidden, damping_floor, seed=seed)
        return cls(energy, structure)

    # -- graphs ------------------------------------------------------------

    def _build_field(self):
        g = ad.Graph()
        x = g.input("x", (self.dim,))
        h = self.energy.emit(g, x)
        gg, grad = ad.make_gradient_graph(g, h, "x")
        j_id, r_id = self.structure.emit(gg, x)
        v = gg.matmul(gg.sub(j_id, r_id), grad)
        return gg, {"h": h, "grad": grad, "v": v}

    def _field_graph(self):
        if self._field_cache is None:
            gg, ids = self._build_field()
            gg.freeze()
            self._field_cache = (gg, ids)
        return self._field_cache

    def _loss_graph(self):
        if self._loss_cache is None:
            gg, ids = self._build_field()
            t = gg.input("target", (self.dim,))
            loss = gg.sum(gg.square(gg.sub(ids["v"], t)))
            gg.freeze()
            self._loss_cache = (gg, loss)
        return self._loss_cache

    def bindings(self) -> dict:
        b = self.energy.net.bindings()
        b.update(self.structure.params)
        return b

    def refresh_certification(self):
        self.energy.net.refresh_certification()

    # -- evaluation ----------------------------------------------------------

    def field(self, x) -> np.ndarray:
        gg, ids = self._field_graph()
        b = self.bindings()
        b["x"] = x
        return np.asarray(ad.forward(gg, b)[ids["v"]])

    def field_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        grad = self.energy.gradient_batch(xb)
        j, r = self.structure.matrices_batch(xb)
        v = np.einsum("bij,bj->bi", j - r, grad)
        return v[0] if single else v

    def certificate(self) -> StabilityCertificate:
        net = self.energy.net
        return StabilityCertificate(
            overshoot=net.lip_max / net.lip_min,
            decay_rate=self.structure.damping_floor * net.lip_min ** 2,
            lip_min=net.lip_min,
            lip_max=net.lip_max,
            damping_floor=self.structure.damping_floor,
        )

    # -- persistence ------------------------------------------------------------

    def to_records(self) -> OrderedDict:
        rec = self.energy.net.to_records()
        rec.update(self.structure.params)
        rec["jr.meta.hidden"] = np.array(
            [float(w) for w in self.structure.mlp.widths[1:-1]])
        rec["jr.meta.floor"] = np.float64(self.structure.damping_floor)
        if self.energy.anchor is not None:
            rec["anchor"] = self.energy.anchor.copy()
        return rec

    @classmethod
    def from_records(cls, records: dict) -> "HamiltonianField":
        net = BiLipNet.from_records(records, prefix="g")
        anchor = records.get("anchor")
        energy = Hamiltonian(net, anchor=anchor)
        structure = JRNet(net.dim,
                          tuple(int(w) for w in records["jr.meta.hidden"]),
                          float(records["jr.meta.floor"]))
        for name, arr in structure.params.items():
            arr[...] = np.asarray(records[name], dtype=np.float64)
        return cls(energy, structure)


class PortHamiltonianField(GraphFieldModel):
    """Open passive model: adds B(x) u to the velocity and reads y = B^T grad H."""

    kind = "phs"

    def __init__(self, base: HamiltonianField, input_dim: int,
                 port_hidden=(32,), seed: int = 0):
        if input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.base = base
        self.dim = base.dim
        self.input_dim = int(input_dim)
        self.port = MLP((self.dim,) + tuple(port_hidden) + (self.dim * input_dim,),
                        activation="tanh", seed=seed, prefix="port.mlp",
                        init_index=_STREAM_PORT)
        self.params = OrderedDict()
        self.params.update(base.params)
        self.params.update(self.port.params)
        self._io_cache = None
        self._loss_cache = None

    @classmethod
    def build(cls, dim: int = 4, input_dim: int = 1, port_hidden=(32,),
              seed: int = 0, **base_kwargs) -> "PortHamiltonianField":
        base = HamiltonianField.build(dim=dim, seed=seed, **base_kwargs)
        return cls(base, input_dim, port_hidden, seed=seed)

    def _build_io(self):
        gg, ids = self.base._build_field()
        u = gg.input("u", (self.input_dim,))
        b_flat = self.port.emit(gg, gg.leaf_id("x"))
        b_mat = gg.reshape(b_flat, (self.dim, self.input_dim))
        v = gg.add(ids["v"], gg.matmul(b_mat, u))
        y = gg.matmul(gg.transpose(b_mat), ids["grad"])
        ids = dict(ids, v=v, y=y)
        return gg, ids

    def _io_graph(self):
        if self._io_cache is None:
            gg, ids = self._build_io()
            gg.freeze()
            self._io_cache = (gg, ids)
        return self._io_cache

    def _loss_graph(self):
        if self._loss_cache is None:
            gg, ids = self._build_io()
            t = gg.input("target", (self.dim,))
            loss = gg.sum(gg.square(gg.sub(ids["v"], t)))
            gg.freeze()
            self._loss_cache = (gg, loss)
        return self._loss_cache

    def bindings(self) -> dict:
        b = self.base.bindings()
        b.update(self.port.params)
        b["u"] = np.zeros(self.input_dim)
        return b

    def refresh_certification(self):
        self.base.refresh_certification()

    def io(self, x, u):
        """Velocity and collocated output for one (state, input) pair."""
        u = np.asarray(u, dtype=np.float64)
        if u.shape != (self.input_dim,):
            raise ad.GraphError(
                f"input has shape {u.shape}, expected ({self.input_dim},)")
        gg, ids = self._io_graph()
        b = self.bindings()
        b["x"] = x
        b["u"] = u
        vals = ad.forward(gg, b)
        return np.asarray(vals[ids["v"]]), np.asarray(vals[ids["y"]])

    def field(self, x) -> np.ndarray:
        v, _ = self.io(x, np.zeros(self.input_dim))
        return v

    def field_batch(self, x: np.ndarray) -> np.ndarray:
        return self.base.field_batch(x)

    def port_matrix_batch(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        flat = self.port.forward_batch(x)
        return flat.reshape(-1, self.dim, self.input_dim)

    def certificate(self) -> StabilityCertificate:
        return self.base.certificate()

    def to_records(self) -> OrderedDict:
        rec = self.base.to_records()
        rec.update(self.port.params)
        rec["port.meta.hidden"] = np.array(
            [float(w) for w in self.port.widths[1:-1]])
        rec["port.meta.input_dim"] = np.float64(self.input_dim)
        return rec

    @classmethod
    def from_records(cls, records: dict) -> "PortHamiltonianField":
        base = HamiltonianField.from_records(records)
        model = cls(base, int(records["port.meta.input_dim"]),
                    tuple(int(w) for w in records["port.meta.hidden"]))
        for name, arr in model.port.params.items():
            arr[...] = np.asarray(records[name], dtype=np.float64)
        return model


def descent_audit(model: HamiltonianField, n_samples: int, seed: int = 0,
                  radius: float = 5.0) -> float:
    """Worst slack of grad H . v <= -floor |grad H|^2 over sampled states."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = stream_rng(seed, "probe")
    star = model.energy.equilibrium()
    xs = uniform_in_ball(rng, star, radius, n_samples)
    grad = model.energy.gradient_batch(xs)
    v = model.field_batch(xs)
    hdot = np.einsum("bi,bi->b", grad, v)
    floor = model.structure.damping_floor
    gsq = np.einsum("bi,bi->b", grad, grad)
    return float(np.max(hdot + floor * gsq))


def passivity_audit(model: PortHamiltonianField, n_samples: int, seed: int = 0,
                    radius: float = 5.0, input_scale: float = 1.0) -> float:
    """Worst slack of the dissipation inequality dH/dt - u.y <= 0.

    Evaluates the literal quantities grad H . v and u . y at sampled
    (state, input) pairs; exact port cancellation leaves roundoff plus the
    nonpositive damping term.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = stream_rng(seed, "probe")
    star = model.base.energy.equilibrium()
    xs = uniform_in_ball(rng, star, radius, n_samples)
    us = input_scale * rng.standard_normal((n_samples, model.input_dim))
    grad = model.base.energy.gradient_batch(xs)
    base_v = model.base.field_batch(xs)
    b_mats = model.port_matrix_batch(xs)
    v = base_v + np.einsum("bij,bj->bi", b_mats, us)
    y = np.einsum("bij,bi->bj", b_mats, grad)
    slack = np.einsum("bi,bi->b", grad, v) - np.einsum("bj,bj->b", us, y)
    return float(np.max(slack))
