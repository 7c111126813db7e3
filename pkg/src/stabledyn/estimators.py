"""Scikit-learn estimator wrappers around the dynamics models.

``fit(X, y)`` learns a vector field f with dx/dt = f(x) from rows of
states ``X`` and sampled velocities ``y``; ``predict(X)`` evaluates the
learned field.  Construction arguments are stored verbatim (sklearn
convention), so ``get_params`` / ``set_params`` / ``clone`` work; learned
state lives in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import checkpoint
from .baselines import ProjectedField
from .dynamics import HamiltonianField, PortHamiltonianField
from .rng import stream_rng
from .simulate import Trajectory, simulate
from .training import Dataset, TrainConfig, train

__all__ = [
    "StableHamiltonianRegressor",
    "PortHamiltonianRegressor",
    "ProjectedFieldRegressor",
]


class _FieldRegressor(BaseEstimator, RegressorMixin):
    """Shared fit/predict machinery; subclasses build the concrete model."""

    def _make_model(self, dim: int):
        raise NotImplementedError

    def _validate_fit_args(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True,
                         dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if y.ndim != 2 or y.shape[1] != X.shape[1]:
            raise ValueError(
                "y must hold one velocity per state with matching dimension; "
                f"got X {X.shape} and y {y.shape}")
        return X, y

    def fit(self, X, y):
        X, y = self._validate_fit_args(X, y)
        self.n_features_in_ = X.shape[1]
        frac = getattr(self, "validation_fraction", 0.0)
        if not 0.0 <= frac < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        if frac > 0.0:
            n_val = max(1, int(round(frac * X.shape[0])))
            perm = stream_rng(self.seed, "split").permutation(X.shape[0])
            val_idx, tr_idx = perm[:n_val], perm[n_val:]
        else:
            tr_idx = np.arange(X.shape[0])
            val_idx = tr_idx
        bounds = np.max(np.abs(X), axis=0)
        train_set = Dataset(x=X[tr_idx], v=y[tr_idx], bounds=bounds,
                            seed=self.seed)
        val_set = Dataset(x=X[val_idx], v=y[val_idx], bounds=bounds,
                          seed=self.seed)
        model = self._make_model(X.shape[1])
        cfg = TrainConfig(epochs=self.epochs,
                          batch_size=min(self.batch_size, len(train_set)),
                          lr0=self.lr0, seed=self.seed)
        self.history_ = train(model, train_set, val_set, cfg)
        self.model_ = model
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return self.model_.field_batch(X)

    def simulate(self, x0, t_end: float = 20.0, dt: float = 0.01) -> Trajectory:
        """Integrate the learned field from one initial state."""
        check_is_fitted(self, "model_")
        return simulate(self.model_.field_batch, np.asarray(x0, dtype=np.float64),
                        dt, t_end)

    def save_checkpoint(self, path):
        check_is_fitted(self, "model_")
        checkpoint.save_model(path, self.model_)


def _resolve_anchor(anchor, dim: int):
    if anchor is None or anchor == "free":
        return None
    if isinstance(anchor, str):
        if anchor == "origin":
            return np.zeros(dim)
        raise ValueError(f"anchor must be 'origin', 'free' or a point, "
                         f"got {anchor!r}")
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != (dim,):
        raise ValueError(f"anchor shape {anchor.shape} does not match dim {dim}")
    return anchor


class StableHamiltonianRegressor(_FieldRegressor):
    """Field regressor with built-in Lyapunov/exponential stability.

    The learned field is (J - R) grad H for an energy H with certified
    quadratic bounds; predictions therefore come with a stability
    certificate (``certificate()``) valid for any weights, including
    mid-training ones.
    """

    _kind = "shnd"

    def __init__(self, lip_min=0.1, lip_max=2.0, damping_floor=0.01,
                 bilip_hidden=(32, 32), jr_hidden=(90, 90), activation="tanh",
                 anchor="origin", epochs=1000, batch_size=200, lr0=0.01,
                 seed=0, validation_fraction=0.0):
        self.lip_min = lip_min
        self.lip_max = lip_max
        self.damping_floor = damping_floor
        self.bilip_hidden = bilip_hidden
        self.jr_hidden = jr_hidden
        self.activation = activation
        self.anchor = anchor
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _make_model(self, dim: int):
        return HamiltonianField.build(
            dim=dim, lip_min=self.lip_min, lip_max=self.lip_max,
            damping_floor=self.damping_floor,
            bilip_hidden=tuple(self.bilip_hidden),
            jr_hidden=tuple(self.jr_hidden), activation=self.activation,
            anchor=_resolve_anchor(self.anchor, dim), seed=self.seed)

    def hamiltonian(self, X) -> np.ndarray:
        """Energy values of the learned Lyapunov function at the given states."""
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.energy.value_batch(X)

    def certificate(self):
        check_is_fitted(self, "model_")
        return self.model_.certificate()

    def equilibrium(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.energy.equilibrium()


class PortHamiltonianRegressor(StableHamiltonianRegressor):
    """Passive open-system variant; adds an input port B(x) u and y = B^T grad H.

    Fitting uses zero-input field data, which leaves the port untouched;
    the passivity certificate holds for any port weights.
    """

    _kind = "phs"

    def __init__(self, input_dim=1, port_hidden=(32,), lip_min=0.1, lip_max=2.0,
                 damping_floor=0.01, bilip_hidden=(32, 32), jr_hidden=(90, 90),
                 activation="tanh", anchor="origin", epochs=1000,
                 batch_size=200, lr0=0.01, seed=0, validation_fraction=0.0):
        super().__init__(lip_min=lip_min, lip_max=lip_max,
                         damping_floor=damping_floor, bilip_hidden=bilip_hidden,
                         jr_hidden=jr_hidden, activation=activation,
                         anchor=anchor, epochs=epochs, batch_size=batch_size,
                         lr0=lr0, seed=seed,
                         validation_fraction=validation_fraction)
        self.input_dim = input_dim
        self.port_hidden = port_hidden

    def _make_model(self, dim: int):
        base = super()._make_model(dim)
        return PortHamiltonianField(base, self.input_dim,
                                    tuple(self.port_hidden), seed=self.seed)

    def io(self, x, u):
        check_is_fitted(self, "model_")
        return self.model_.io(np.asarray(x, dtype=np.float64),
                              np.asarray(u, dtype=np.float64))


class ProjectedFieldRegressor(_FieldRegressor):
    """Projection-based stable baseline (unconstrained field + learned V)."""

    def __init__(self, lyapunov="mlp", fhat_hidden=(100, 100),
                 v_hidden=(64, 64), activation="tanh", alpha=0.5,
                 grad_floor=1e-8, quad_eps=0.01, epochs=1000, batch_size=200,
                 lr0=0.01, seed=0, validation_fraction=0.0):
        self.lyapunov = lyapunov
        self.fhat_hidden = fhat_hidden
        self.v_hidden = v_hidden
        self.activation = activation
        self.alpha = alpha
        self.grad_floor = grad_floor
        self.quad_eps = quad_eps
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.seed = seed
        self.validation_fraction = validation_fraction

    def _make_model(self, dim: int):
        if self.lyapunov not in ("mlp", "icnn"):
            raise ValueError("lyapunov must be 'mlp' or 'icnn'")
        return ProjectedField.build(
            dim=dim, kind=f"sd-{self.lyapunov}",
            fhat_hidden=tuple(self.fhat_hidden), v_hidden=tuple(self.v_hidden),
            activation=self.activation, alpha=self.alpha,
            grad_floor=self.grad_floor, quad_eps=self.quad_eps, seed=self.seed)

    def lyapunov_values(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        return self.model_.lyapunov.value_batch(X)
