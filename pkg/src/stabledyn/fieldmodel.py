"""Shared training surface for graph-backed vector-field models.

A model owns an ordered parameter store and a per-sample loss graph with
``x`` and ``target`` input leaves.  The trainer only needs three things:
the store, ``refresh_certification`` (a no-op unless a model carries a
rescale that must track the weights) and ``sample_loss_grads``.  Parameter
arrays are updated in place by the optimizer so every cached view of the
store stays current.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad

__all__ = ["GraphFieldModel"]


class GraphFieldModel:
    dim: int
    kind: str
    params: OrderedDict

    def bindings(self) -> dict:
        return dict(self.params)

    def refresh_certification(self):
        pass

    def _loss_graph(self):
        """Return (graph, loss id) with input leaves ``x`` and ``target``."""
        raise NotImplementedError

    def field(self, x) -> np.ndarray:
        raise NotImplementedError

    def field_batch(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.stack([self.field(row) for row in x])

    def sample_loss_grads(self, x, v):
        """Squared-residual loss |v - f(x)|^2 and its parameter gradients."""
        graph, loss_id = self._loss_graph()
        b = self.bindings()
        b["x"] = x
        b["target"] = v
        values = ad.forward(graph, b, check_finite=False)
        loss = float(values[loss_id])
        grads = ad.backward(graph, loss_id, b, values=values)
        return loss, {k: grads[k] for k in self.params}
