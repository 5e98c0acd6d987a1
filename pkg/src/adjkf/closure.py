"""Neural closure for discovered dynamics.

A small fully connected network (tanh hidden layers, linear output) is fit
to field-inversion output, most commonly the identifiable (v, d) pairs of
a diffusivity table, and then plugged back into the filter as an operator
generator.  Everything is plain numpy: explicit forward pass, explicit
backprop, full-batch Adam, z-score normalization of inputs and targets.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .benchmarks import AllenCahnConfig, ac_step_model
from .errors import DimensionMismatch, MissingInput, NonFiniteLoss
from .kalman import StepModel
from .linalg import make_rng

__all__ = [
    "Dataset",
    "MlpModel",
    "TrainConfig",
    "init_mlp",
    "forward",
    "backprop",
    "train",
    "predict_diffusivity",
    "closure_step_builder",
    "save_checkpoint",
    "load_checkpoint",
    "predictions_to_csv",
]

_MAGIC = b"AKFC"
_VERSION = 1


@dataclass(frozen=True)
class Dataset:
    """Supervised pairs with a provenance tag (where the targets came from)."""

    inputs: np.ndarray      # (n, d_in)
    targets: np.ndarray     # (n, d_out)
    provenance: str = ""

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        Y = np.atleast_2d(np.asarray(self.targets, dtype=float))
        if X.ndim != 2 or Y.ndim != 2 or X.shape[0] != Y.shape[0]:
            raise DimensionMismatch(f"inputs {X.shape} vs targets {Y.shape}")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", Y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]


@dataclass
class MlpModel:
    """Fully connected tanh network with affine input/output normalization.

    ``weights[i]`` has shape (sizes[i], sizes[i+1]); hidden activations are
    tanh, the output layer is linear.  ``forward`` consumes and produces
    raw (unnormalized) values; the z-score statistics are baked into the
    model so a checkpoint is self-contained.
    """

    sizes: tuple
    weights: list
    biases: list
    in_mean: np.ndarray
    in_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))


@dataclass(frozen=True)
class TrainConfig:
    """Training knobs: full-batch Adam, fixed seed, best-validation selection."""

    hidden: tuple = (32, 32)
    epochs: int = 4000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_frac: float = 0.1
    seed: int = 0


def init_mlp(sizes, seed: int) -> MlpModel:
    """He-style scaled normal init, zero biases, identity normalization."""
    sizes = tuple(int(s) for s in sizes)
    rng = make_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpModel(
        sizes=sizes,
        weights=weights,
        biases=biases,
        in_mean=np.zeros(sizes[0]),
        in_std=np.ones(sizes[0]),
        out_mean=np.zeros(sizes[-1]),
        out_std=np.ones(sizes[-1]),
    )


def _forward_normalized(model: MlpModel, Xn: np.ndarray):
    """Forward pass on normalized inputs; returns activations per layer."""
    acts = [Xn]
    h = Xn
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W + b
        h = z if i == last else np.tanh(z)
        acts.append(h)
    return acts


def forward(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Raw-space prediction for raw-space inputs, shape (n, d_out)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.sizes[0]:
        raise DimensionMismatch(f"input width {X.shape[1]} vs model {model.sizes[0]}")
    Xn = (X - model.in_mean) / model.in_std
    Yn = _forward_normalized(model, Xn)[-1]
    return Yn * model.out_std + model.out_mean


def backprop(model: MlpModel, Xn: np.ndarray, Yn: np.ndarray):
    """MSE loss and its gradients w.r.t. every weight and bias.

    Operates on normalized data; loss = mean over samples and outputs of
    squared error.  Returns (loss, dWs, dbs).
    """
    n = Xn.shape[0]
    acts = _forward_normalized(model, Xn)
    pred = acts[-1]
    diff = pred - Yn
    value = float(np.mean(diff**2))
    # d loss / d pred, then walk layers backward
    delta = (2.0 / diff.size) * diff
    dWs = [None] * len(model.weights)
    dbs = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        a_prev = acts[i]
        dWs[i] = a_prev.T @ delta
        dbs[i] = delta.sum(axis=0)
        if i > 0:
            # tanh' = 1 - tanh^2, and acts[i] already stores tanh(z)
            delta = (delta @ model.weights[i].T) * (1.0 - acts[i] ** 2)
    return value, dWs, dbs


def train(dataset: Dataset, cfg: TrainConfig = TrainConfig()) -> tuple[MlpModel, dict]:
    """Fit an MLP to the dataset.

    Normalization statistics come from the training split; the 90/10
    train/validation split is drawn from the config seed, and the returned
    parameters are the ones with the best validation loss.  Training is
    full-batch Adam, so a fixed seed reproduces the run bit for bit.

    Returns
    -------
    (model, history) with history arrays "train_loss" and "val_loss" per
    epoch (validation loss only where a validation set exists).
    """
    rng = make_rng(cfg.seed)
    n = dataset.n
    perm = rng.permutation(n)
    n_val = int(np.floor(cfg.val_frac * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if train_idx.size == 0:
        raise DimensionMismatch("training split is empty")
    X_tr, Y_tr = dataset.inputs[train_idx], dataset.targets[train_idx]

    in_mean = X_tr.mean(axis=0)
    in_std = np.where(X_tr.std(axis=0) < 1e-12, 1.0, X_tr.std(axis=0))
    out_mean = Y_tr.mean(axis=0)
    out_std = np.where(Y_tr.std(axis=0) < 1e-12, 1.0, Y_tr.std(axis=0))

    sizes = (dataset.inputs.shape[1],) + tuple(cfg.hidden) + (dataset.targets.shape[1],)
    model = init_mlp(sizes, cfg.seed)
    model.in_mean, model.in_std = in_mean, in_std
    model.out_mean, model.out_std = out_mean, out_std

    Xn_tr = (X_tr - in_mean) / in_std
    Yn_tr = (Y_tr - out_mean) / out_std
    if n_val:
        Xn_val = (dataset.inputs[val_idx] - in_mean) / in_std
        Yn_val = (dataset.targets[val_idx] - out_mean) / out_std

    params = model.weights + model.biases
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    best_val = np.inf
    best_params = [p.copy() for p in params]
    train_hist, val_hist = [], []
    for epoch in range(1, cfg.epochs + 1):
        value, dWs, dbs = backprop(model, Xn_tr, Yn_tr)
        if not np.isfinite(value):
            raise NonFiniteLoss(f"training loss became non-finite at epoch {epoch}")
        train_hist.append(value)
        grads = dWs + dbs
        for i, (p, gr) in enumerate(zip(params, grads)):
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gr
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gr**2
            m_hat = m[i] / (1.0 - cfg.beta1**epoch)
            v_hat = v[i] / (1.0 - cfg.beta2**epoch)
            p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        if n_val:
            pred = _forward_normalized(model, Xn_val)[-1]
            val = float(np.mean((pred - Yn_val) ** 2))
            val_hist.append(val)
            if val < best_val:
                best_val = val
                best_params = [p.copy() for p in params]
        else:
            best_params = [p.copy() for p in params]
    k = len(model.weights)
    model.weights = best_params[:k]
    model.biases = best_params[k:]
    history = {"train_loss": np.array(train_hist), "val_loss": np.array(val_hist)}
    return model, history


def predict_diffusivity(model: MlpModel, v: np.ndarray) -> np.ndarray:
    """Closure diffusivity at states v, clamped below at 1e-8.

    The clamp keeps downstream operators parabolic even where the fit
    undershoots zero.
    """
    v = np.asarray(v, dtype=float)
    out = forward(model, v.reshape(-1, 1))[:, 0]
    return np.maximum(out.reshape(v.shape), 1e-8)


def closure_step_builder(model: MlpModel, cfg: AllenCahnConfig, sigma: float):
    """Step builder whose operator uses the closure's d(v); drop-in for the filter."""

    def build(k: int, x_prev: np.ndarray) -> StepModel:
        return ac_step_model(cfg, predict_diffusivity(model, x_prev), x_prev, sigma)

    return build


def save_checkpoint(model: MlpModel, path) -> None:
    """Write a self-contained binary checkpoint.

    Layout (all little-endian): magic "AKFC", uint32 version, uint32 layer
    count L (= len(sizes)), uint32 sizes[L], then float64 blocks: in_mean,
    in_std, out_mean, out_std, then per layer W (row-major, shape
    sizes[i] x sizes[i+1]) followed by b.
    """
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(model.sizes)))
        fh.write(struct.pack(f"<{len(model.sizes)}I", *model.sizes))
        for arr in (model.in_mean, model.in_std, model.out_mean, model.out_std):
            fh.write(np.asarray(arr, dtype="<f8").tobytes())
        for W, b in zip(model.weights, model.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.asarray(b, dtype="<f8").tobytes())


def load_checkpoint(path) -> MlpModel:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise MissingInput(f"{path}: not a closure checkpoint")
    version, n_sizes = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise MissingInput(f"{path}: unsupported checkpoint version {version}")
    sizes = struct.unpack_from(f"<{n_sizes}I", data, 12)
    off = 12 + 4 * n_sizes

    def take(count):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).copy()
        off += 8 * count
        return arr

    d_in, d_out = sizes[0], sizes[-1]
    in_mean, in_std = take(d_in), take(d_in)
    out_mean, out_std = take(d_out), take(d_out)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(take(fan_in * fan_out).reshape(fan_in, fan_out))
        biases.append(take(fan_out))
    return MlpModel(
        sizes=tuple(sizes),
        weights=weights,
        biases=biases,
        in_mean=in_mean,
        in_std=in_std,
        out_mean=out_mean,
        out_std=out_std,
    )


def predictions_to_csv(model: MlpModel, grid: np.ndarray, path) -> None:
    """Write (v, d_prediction) over a grid of states."""
    grid = np.asarray(grid, dtype=float).reshape(-1)
    pred = predict_diffusivity(model, grid)
    with open(path, "w", newline="") as fh:
        fh.write("# adjkf-csv v1 closure-predictions\n")
        writer = csv.writer(fh)
        writer.writerow(["v", "d_pred"])
        for v, d in zip(grid, pred):
            writer.writerow([f"{v:.17g}", f"{d:.17g}"])
