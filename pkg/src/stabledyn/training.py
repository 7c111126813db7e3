"""Dataset generation and the deterministic training loop.

Training is plain minibatch Adam on the mean squared field-fitting loss.
Determinism contract: (seed, config) fully determine the loss history and
the final weights.  Randomness comes only from the named Philox streams
(dataset draws, init, epoch shuffles); per-sample gradients are reduced in
index order; the bi-Lipschitz rescale is refreshed before every step so
certified bounds hold at every iterate, not just at convergence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import checkpoint
from .rng import stream_rng

__all__ = [
    "Dataset",
    "TrainConfig",
    "History",
    "AdamState",
    "TrainingError",
    "gen_dataset",
    "save_dataset_csv",
    "load_dataset_csv",
    "mse_loss",
    "cosine_lr",
    "adam_step",
    "train",
]


class TrainingError(Exception):
    pass


@dataclass
class Dataset:
    x: np.ndarray          # (n, dim) states
    v: np.ndarray          # (n, dim) velocities
    bounds: np.ndarray     # (dim,) box half-widths around the origin
    seed: int

    def __len__(self) -> int:
        return self.x.shape[0]


def gen_dataset(field, n: int, bounds=None, seed: int = 0, dim: int = 4,
                stream_index: int = 0) -> Dataset:
    """Draw n states uniformly from the box and label them with the field."""
    if n < 1:
        raise ValueError("need at least one sample")
    if bounds is None:
        bounds = np.full(dim, np.pi)
    bounds = np.asarray(bounds, dtype=np.float64)
    rng = stream_rng(seed, "data", stream_index)
    x = rng.uniform(-bounds, bounds, size=(n, bounds.shape[0]))
    v = np.asarray(field(x), dtype=np.float64)
    return Dataset(x=x, v=v, bounds=bounds, seed=seed)


_DATASET_HEADER = "th1,th2,w1,w2,v1,v2,v3,v4"


def save_dataset_csv(path, ds: Dataset):
    if ds.x.shape[1] != 4:
        raise ValueError("dataset CSV schema is fixed to 4 state dimensions")
    with open(path, "w") as fh:
        fh.write(_DATASET_HEADER + "\n")
        for x, v in zip(ds.x, ds.v):
            row = list(x) + list(v)
            fh.write(",".join(format(float(c), ".17g") for c in row) + "\n")


def load_dataset_csv(path) -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return Dataset(x=data[:, :4], v=data[:, 4:], bounds=np.full(4, np.pi), seed=-1)


def mse_loss(field_fn, x: np.ndarray, v: np.ndarray) -> float:
    """Mean squared Euclidean residual of the field over a batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    resid = v - np.asarray(field_fn(x), dtype=np.float64)
    return float(np.mean(np.sum(resid * resid, axis=1)))


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params, grads, lr: float):
    """Standard bias-corrected update, applied to the arrays in place."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{p.shape} for {name}")
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        p[...] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 200
    lr0: float = 0.01
    seed: int = 0
    checkpoint_path: str | None = None
    timing: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr0 <= 0.0:
            raise ValueError("invalid training configuration")


@dataclass
class History:
    train_loss: list = dc_field(default_factory=list)
    test_loss: list = dc_field(default_factory=list)
    lr: list = dc_field(default_factory=list)
    wall_ms: list = dc_field(default_factory=list)

    def __len__(self) -> int:
        return len(self.train_loss)

    @property
    def final_test_loss(self) -> float:
        return self.test_loss[-1]

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,train_loss,test_loss,lr,wall_ms\n")
            for e in range(len(self.train_loss)):
                fh.write(f"{e},{self.train_loss[e]:.17g},"
                         f"{self.test_loss[e]:.17g},{self.lr[e]:.17g},"
                         f"{self.wall_ms[e]:.17g}\n")


def train(model, train_set: Dataset, test_set: Dataset | None,
          config: TrainConfig, step_callback=None) -> History:
    """Minibatch Adam with a cosine schedule; returns the per-epoch history.

    Epochs shuffle by a seeded permutation and keep the final short batch.
    The model's certification is refreshed before every optimizer step.
    """
    n = len(train_set)
    if config.batch_size > n:
        raise ValueError(f"batch_size {config.batch_size} exceeds dataset size {n}")
    shuffle_rng = stream_rng(config.seed, "shuffle")
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = max(1, config.epochs * steps_per_epoch)
    adam = AdamState.for_params(model.params)
    history = History()
    step = 0
    for epoch in range(config.epochs):
        tic = time.perf_counter()
        perm = shuffle_rng.permutation(n)
        epoch_lr = cosine_lr(step, total_steps, config.lr0)
        for lo in range(0, n, config.batch_size):
            idxs = perm[lo:lo + config.batch_size]
            model.refresh_certification()
            lr = cosine_lr(step, total_steps, config.lr0)
            acc = {k: np.zeros_like(p) for k, p in model.params.items()}
            batch_loss = 0.0
            for i in idxs:
                loss, grads = model.sample_loss_grads(train_set.x[i], train_set.v[i])
                batch_loss += loss
                for k in acc:
                    acc[k] += grads[k]
            if not np.isfinite(batch_loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, step {step}")
            inv = 1.0 / len(idxs)
            for k in acc:
                acc[k] *= inv
            adam_step(adam, model.params, acc, lr)
            step += 1
            if step_callback is not None:
                step_callback(step, model)
        model.refresh_certification()
        train_loss = mse_loss(model.field_batch, train_set.x, train_set.v)
        if test_set is not None and len(test_set):
            test_loss = mse_loss(model.field_batch, test_set.x, test_set.v)
        else:
            test_loss = train_loss
        if not (np.isfinite(train_loss) and np.isfinite(test_loss)):
            raise TrainingError(f"non-finite epoch loss at epoch {epoch}")
        wall = (time.perf_counter() - tic) * 1000.0 if config.timing else 0.0
        history.train_loss.append(train_loss)
        history.test_loss.append(test_loss)
        history.lr.append(epoch_lr)
        history.wall_ms.append(wall)
    model.refresh_certification()
    if config.checkpoint_path is not None:
        checkpoint.save_model(config.checkpoint_path, model)
    return history
