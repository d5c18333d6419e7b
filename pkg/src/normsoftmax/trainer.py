"""
Embedding model and its SGD training loop.

The model maps features through an optional one-hidden-layer trunk
(``tanh``), a parameter-free layer norm, and a bias-free linear projection.
The projected vector is L2-normalized to give the embedding; during training
that last normalization happens inside the loss, which returns gradients
with respect to the raw projection output.
"""
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import linalg
from .errors import InvalidParams, NonFiniteLoss, ShapeMismatch, ZeroVector
from .losses import LossConfig, batch_loss, init_proxies
from .sampling import (
    BatchSpec,
    class_balanced_batches,
    make_rng,
    sequential_batches,
    subsample_classes,
)

log = logging.getLogger(__name__)

TRUNK_PARAMS = ("hidden_weight", "hidden_bias")


@dataclass
class EmbeddingModel:
    projection: np.ndarray
    hidden_weight: Optional[np.ndarray] = None
    hidden_bias: Optional[np.ndarray] = None
    layer_norm: bool = True
    layer_norm_epsilon: float = linalg.DEFAULT_EPSILON

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64)
        if (self.hidden_weight is None) != (self.hidden_bias is None):
            raise InvalidParams("hidden_weight and hidden_bias go together")
        if self.hidden_weight is not None:
            self.hidden_weight = np.asarray(self.hidden_weight, dtype=np.float64)
            self.hidden_bias = np.asarray(self.hidden_bias, dtype=np.float64)
            if self.hidden_weight.shape[1] != self.projection.shape[0] or \
                    self.hidden_bias.shape != (self.hidden_weight.shape[1],):
                raise ShapeMismatch("hidden layer and projection shapes disagree")
        if not self.layer_norm_epsilon > 0:
            raise InvalidParams("layer_norm_epsilon must be positive")

    @classmethod
    def create(cls, feature_dim, embed_dim, rng, hidden_dim=None, layer_norm=True,
               layer_norm_epsilon=linalg.DEFAULT_EPSILON):
        """Random init: weights ~ N(0, 1/fan_in), zero hidden bias."""
        W1 = b1 = None
        width = feature_dim
        if hidden_dim:
            W1 = rng.standard_normal((feature_dim, hidden_dim)) / np.sqrt(feature_dim)
            b1 = np.zeros(hidden_dim)
            width = hidden_dim
        P = rng.standard_normal((width, embed_dim)) / np.sqrt(width)
        return cls(P, W1, b1, layer_norm, layer_norm_epsilon)

    @property
    def has_hidden(self):
        return self.hidden_weight is not None

    @property
    def feature_dim(self):
        return (self.hidden_weight if self.has_hidden else self.projection).shape[0]

    @property
    def hidden_dim(self):
        return self.hidden_weight.shape[1] if self.has_hidden else 0

    @property
    def embed_dim(self):
        return self.projection.shape[1]

    def params(self):
        out = {}
        if self.has_hidden:
            out["hidden_weight"] = self.hidden_weight
            out["hidden_bias"] = self.hidden_bias
        out["projection"] = self.projection
        return out

    def copy(self):
        return replace(self, **{k: v.copy() for k, v in self.params().items()})


def _forward(model, features):
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != model.feature_dim:
        raise ShapeMismatch(f"expected (n, {model.feature_dim}) features, got {F.shape}")
    cache = {"input": F}
    h = F
    if model.has_hidden:
        h = np.tanh(F @ model.hidden_weight + model.hidden_bias)
        cache["hidden"] = h
    if model.layer_norm:
        h, denom = linalg.layer_norm_rows(h, model.layer_norm_epsilon)
        cache["ln_denom"] = denom
    cache["pre_projection"] = h
    return h @ model.projection, cache


def _backward(model, cache, grad_raw):
    z = cache["pre_projection"]
    grads = {"projection": z.T @ grad_raw}
    if not model.has_hidden:
        return grads
    g = grad_raw @ model.projection.T
    if model.layer_norm:
        g = linalg.layer_norm_rows_backward(z, cache["ln_denom"], g)
    g = g * (1.0 - cache["hidden"] ** 2)
    grads["hidden_weight"] = cache["input"].T @ g
    grads["hidden_bias"] = g.sum(axis=0)
    return grads


def embed(model, features):
    """Unit-norm embeddings; accepts one feature vector or a matrix of rows."""
    F = np.asarray(features, dtype=np.float64)
    single = F.ndim == 1
    raw, _ = _forward(model, F[None, :] if single else F)
    unit, _ = linalg.l2_normalize_rows(raw)
    return unit[0] if single else unit


def loss_and_grads(model, proxies, features, labels, loss_config, active=None):
    """Mean batch loss and gradients for every model parameter and the proxies."""
    raw, cache = _forward(model, features)
    res = batch_loss(raw, labels, proxies, loss_config, active=active)
    grads = _backward(model, cache, res.grad_embeddings)
    grads["proxies"] = res.grad_proxies
    return res.loss, grads


# -- optimization ------------------------------------------------------------

def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=1e-4):
    """Classical momentum SGD with weight decay coupled into the gradient.

    ``v <- momentum * v + (g + weight_decay * p)`` then ``p <- p - lr * v``.
    Updates ``params`` and ``state`` in place; parameters without an entry
    in ``grads`` are left untouched.  Returns ``(params, state)``.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        v = state.get(name)
        if v is None:
            v = state[name] = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeMismatch(f"{name}: velocity {v.shape} vs param {p.shape}")
        v *= momentum
        v += g + weight_decay * p
        p -= lr * v
    return params, state


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_spec: Optional[BatchSpec] = field(default_factory=lambda: BatchSpec(3, 25))
    batch_size: int = 75
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple = (15,)
    lr_gamma: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)
    subsample_ratio: float = 1.0
    warmstart_epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lr_steps, int):
            self.lr_steps = (self.lr_steps,)
        self.lr_steps = tuple(int(s) for s in self.lr_steps)
        if self.epochs < 0 or self.warmstart_epochs < 0:
            raise InvalidParams("epochs and warmstart_epochs must be non-negative")
        if not self.lr > 0:
            raise InvalidParams("lr must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidParams("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise InvalidParams("weight_decay must be non-negative")
        if not 0.0 < self.subsample_ratio <= 1.0:
            raise InvalidParams("subsample_ratio must lie in (0, 1]")
        if self.batch_spec is None and self.batch_size < 1:
            raise InvalidParams("batch_size must be >= 1")


def lr_at(epoch, config):
    """Step schedule: ``lr * gamma ** (boundaries at or before epoch)``."""
    passed = sum(1 for s in config.lr_steps if epoch >= s)
    return config.lr * config.lr_gamma ** passed


@dataclass
class TrainHistory:
    epoch_losses: list = field(default_factory=list)
    lrs: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    iteration_losses: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def __len__(self):
        return len(self.epoch_losses)


def epoch_batches(labels, config, rng, class_count=None):
    if config.batch_spec is not None:
        return class_balanced_batches(labels, config.batch_spec, rng, class_count)
    return sequential_batches(labels, config.batch_size, rng)


def fit(dataset, model, proxies, config, eval_fn: Optional[Callable] = None):
    """Train copies of ``model`` and ``proxies``; returns ``(model, proxies, history)``.

    The first ``config.warmstart_epochs`` epochs (counted within
    ``config.epochs``) update only the projection and the proxies.
    ``eval_fn(model, proxies, epoch)``, if given, is stored per epoch in
    ``history.snapshots``.
    """
    model = model.copy()
    proxies = np.array(proxies, dtype=np.float64)
    if proxies.shape != (dataset.class_count, model.embed_dim):
        raise ShapeMismatch(
            f"proxies {proxies.shape} vs ({dataset.class_count}, {model.embed_dim})"
        )
    rng = make_rng(config.seed)
    history = TrainHistory()
    state = {}
    iteration = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, config)
        frozen = epoch < config.warmstart_epochs
        batch_losses = []
        for idx in epoch_batches(dataset.labels, config, rng, dataset.class_count):
            labels = dataset.labels[idx]
            active = None
            if config.subsample_ratio < 1.0:
                active = subsample_classes(labels, dataset.class_count, config.subsample_ratio, rng)
            try:
                loss, grads = loss_and_grads(model, proxies, dataset.features[idx], labels,
                                             config.loss, active)
            except ZeroVector:
                # diverged parameters overflow the norms before the loss is formed
                if all(np.all(np.isfinite(p)) for p in model.params().values()) and \
                        np.all(np.isfinite(proxies)):
                    raise
                raise NonFiniteLoss(iteration, float("nan")) from None
            if not np.isfinite(loss):
                raise NonFiniteLoss(iteration, loss)
            if frozen:
                for name in TRUNK_PARAMS:
                    grads.pop(name, None)
            params = model.params()
            params["proxies"] = proxies
            sgd_step(params, grads, state, lr, config.momentum, config.weight_decay)
            batch_losses.append(loss)
            history.iteration_losses.append(loss)
            iteration += 1
        history.epoch_losses.append(float(np.mean(batch_losses)))
        history.lrs.append(lr)
        history.wall_times.append(time.perf_counter() - t0)
        if eval_fn is not None:
            history.snapshots.append(eval_fn(model, proxies, epoch))
        log.debug("epoch %d lr %.4g loss %.6f", epoch, lr, history.epoch_losses[-1])
    return model, proxies, history


def initial_model(dataset, embed_dim, config, hidden_dim=None, layer_norm=True,
                  layer_norm_epsilon=linalg.DEFAULT_EPSILON):
    """Model and proxies initialized from a stream independent of the batch order."""
    rng = make_rng(config.seed ^ 0x9E3779B97F4A7C15)
    model = EmbeddingModel.create(dataset.feature_dim, embed_dim, rng, hidden_dim,
                                  layer_norm, layer_norm_epsilon)
    return model, init_proxies(dataset.class_count, embed_dim, rng)


# -- gradient verification ---------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    checked: int


def grad_check(model, proxies, features, labels, loss_config, h=1e-5, active=None,
               max_coords=2000, rng=None, grad_fn=None):
    """Compare analytic gradients of the full pipeline with central differences.

    Every coordinate is checked when there are at most ``max_coords`` of them,
    otherwise a random subset of that size.  The relative error of a
    coordinate is ``|analytic - numeric| / max(|analytic|_inf, |numeric|)``,
    where the infinity norm runs over the coordinate's whole tensor.
    """
    if not 1e-7 <= h <= 1e-3:
        raise InvalidParams("h must lie in [1e-7, 1e-3]")
    grad_fn = grad_fn or loss_and_grads
    model = model.copy()
    proxies = np.array(proxies, dtype=np.float64)
    params = model.params()
    params["proxies"] = proxies
    _, grads = grad_fn(model, proxies, features, labels, loss_config, active)

    coords = [(name, i) for name, p in params.items() for i in range(p.size)]
    if len(coords) > max_coords:
        rng = make_rng(0) if rng is None else rng
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    def f():
        return grad_fn(model, proxies, features, labels, loss_config, active)[0]

    scale = {name: float(np.max(np.abs(g))) if g.size else 0.0 for name, g in grads.items()}
    worst = GradCheckResult(0.0, "", (), 0.0, 0.0, len(coords))
    for name, flat in coords:
        p = params[name]
        idx = np.unravel_index(flat, p.shape)
        orig = p[idx]
        p[idx] = orig + h
        fp = f()
        p[idx] = orig - h
        fm = f()
        p[idx] = orig
        numeric = (fp - fm) / (2 * h)
        analytic = float(grads[name][idx])
        denom = max(scale[name], abs(numeric), 1e-300)
        err = abs(analytic - numeric) / denom
        if not np.isfinite(err):
            err = np.inf
        if err > worst.max_rel_error or not worst.worst_param:
            worst = GradCheckResult(err, name, tuple(int(i) for i in idx), analytic, numeric,
                                    len(coords))
    return worst
