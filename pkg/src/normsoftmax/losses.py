"""
Proxy-based classification losses with analytic gradients.

All losses score an embedding against a matrix of class proxies through the
cosine similarity of their L2-normalized versions.  Embeddings and proxy rows
are passed *raw*; normalization happens inside every call and gradients are
returned with respect to the raw inputs, so callers never need to chain the
normalization Jacobians themselves.

Every variant reduces to the same template::

    logits_z = a * cos(x, p_z) + b   (target logit optionally shifted)
    loss     = -logits_y + logsumexp_{z in S} logits_z

where the denominator set ``S`` is all classes (normalized softmax, LMCL),
all classes but the target (NCA), or an active subset (class subsampling).
"""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import linalg
from .errors import (
    InvalidClass,
    InvalidMargin,
    InvalidParams,
    ShapeMismatch,
    SingleClass,
    TargetNotActive,
)

DEFAULT_TEMPERATURE = 0.05
DEFAULT_LMCL_SCALE = 30.0
DEFAULT_LMCL_MARGIN = 0.35


class LossVariant(str, Enum):
    NCA = "nca"
    PROXY_NCA = "proxy_nca"
    NORM_SOFTMAX = "norm_softmax"
    LMCL = "lmcl"


@dataclass
class LossConfig:
    """Loss selection plus its hyperparameters.

    ``temperature`` divides the cosine logits of NCA / PROXY_NCA /
    NORM_SOFTMAX.  LMCL uses ``scale`` and ``margin`` instead.
    """

    variant: LossVariant = LossVariant.NORM_SOFTMAX
    temperature: float = DEFAULT_TEMPERATURE
    scale: float = DEFAULT_LMCL_SCALE
    margin: float = DEFAULT_LMCL_MARGIN

    def __post_init__(self):
        self.variant = LossVariant(self.variant)
        if not self.temperature > 0:
            raise InvalidParams(f"temperature must be positive, got {self.temperature}")
        if not self.scale > 0:
            raise InvalidParams(f"scale must be positive, got {self.scale}")
        if self.variant is LossVariant.LMCL:
            _check_margin(self.margin)


@dataclass
class LossResult:
    loss: float
    grad_embedding: np.ndarray
    grad_proxies: np.ndarray
    probabilities: np.ndarray


@dataclass
class BatchLossResult:
    """Mean loss over a batch; gradients are of the mean."""

    loss: float
    grad_embeddings: np.ndarray
    grad_proxies: np.ndarray
    losses: np.ndarray = field(repr=False)


def _check_margin(m):
    if not 0.0 <= m < 1.0:
        raise InvalidMargin(f"margin must lie in [0, 1), got {m}")


def _template(variant, temperature, scale, margin):
    """Return ``(a, b, target_shift, include_target)`` for a variant."""
    variant = LossVariant(variant)
    if variant is LossVariant.NORM_SOFTMAX:
        return 1.0 / temperature, 0.0, 0.0, True
    if variant is LossVariant.LMCL:
        _check_margin(margin)
        return scale, 0.0, scale * margin, True
    if variant is LossVariant.NCA:
        # -d/sigma with d = 1 - cos
        return 1.0 / temperature, -1.0 / temperature, 0.0, False
    # squared euclidean between unit vectors: d = 2 - 2 cos
    return 2.0 / temperature, -2.0 / temperature, 0.0, False


def _single(x, y, proxies, a, b, shift, include_target, active=None):
    proxies = np.asarray(proxies, dtype=np.float64)
    if proxies.ndim != 2:
        raise ShapeMismatch(f"proxies must be 2-D, got shape {proxies.shape}")
    n_classes, dim = proxies.shape
    x = linalg.as_vector(x)
    if x.shape[0] != dim:
        raise ShapeMismatch(f"embedding dim {x.shape[0]} != proxy dim {dim}")
    if not 0 <= y < n_classes:
        raise InvalidClass(f"class {y} outside [0, {n_classes})")

    mask = np.ones(n_classes, dtype=bool) if active is None else active
    if not include_target:
        mask = mask.copy()
        mask[y] = False
        if not mask.any():
            raise SingleClass("denominator set is empty")

    xh, ctx = linalg.l2_normalize(x)
    ph, pnorms = linalg.l2_normalize_rows(proxies)
    cos = ph @ xh
    logits = a * cos + b
    logits[y] -= shift

    live = logits[mask]
    top = live.max()
    lse = top + np.log(np.sum(np.exp(live - top)))
    loss = float(lse - logits[y])

    probs = np.zeros(n_classes)
    probs[mask] = np.exp(live - lse)
    dcos = probs.copy()
    dcos[y] -= 1.0
    dcos *= a

    grad_x = linalg.l2_normalize_backward(x, ph.T @ dcos, ctx)
    grad_p = linalg.l2_normalize_rows_backward(ph, pnorms, np.outer(dcos, xh))
    return LossResult(loss, grad_x, grad_p, probs)


def nca_loss(x, y, proxies, temperature=1.0, distance="cosine"):
    """NCA loss against static proxies, target excluded from the denominator.

    ``distance`` is ``"cosine"`` (``1 - cos``) or ``"euclidean"`` (squared
    distance between the normalized vectors, ``2 - 2 cos``).  The value can be
    negative since the positive term is not part of the normalizer, and
    ``probabilities`` is the distribution over the non-target classes.
    """
    proxies = np.asarray(proxies, dtype=np.float64)
    if proxies.ndim == 2 and proxies.shape[0] < 2:
        raise SingleClass("NCA needs at least two classes")
    variant = {"cosine": LossVariant.NCA, "euclidean": LossVariant.PROXY_NCA}[distance]
    a, b, shift, inc = _template(variant, temperature, 0.0, 0.0)
    return _single(x, y, proxies, a, b, shift, inc)


def normalized_softmax_loss(x, y, proxies, temperature=DEFAULT_TEMPERATURE):
    """Softmax cross-entropy over ``cos(x, p_z) / temperature`` for all classes."""
    a, b, shift, inc = _template(LossVariant.NORM_SOFTMAX, temperature, 0.0, 0.0)
    return _single(x, y, proxies, a, b, shift, inc)


def lmcl_loss(x, y, proxies, scale=DEFAULT_LMCL_SCALE, margin=DEFAULT_LMCL_MARGIN):
    """Large margin cosine loss: target logit is ``scale * (cos_y - margin)``."""
    a, b, shift, inc = _template(LossVariant.LMCL, 1.0, scale, margin)
    return _single(x, y, proxies, a, b, shift, inc)


def _active_mask(active, n_classes):
    idx = np.unique(np.asarray(list(active) if isinstance(active, (set, frozenset)) else active,
                               dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= n_classes):
        raise InvalidClass(f"active classes must lie in [0, {n_classes})")
    mask = np.zeros(n_classes, dtype=bool)
    mask[idx] = True
    return mask


def subsampled_softmax_loss(x, y, proxies, active, temperature=DEFAULT_TEMPERATURE):
    """Normalized softmax restricted to the ``active`` classes.

    Proxies outside ``active`` get an exactly-zero gradient.
    """
    proxies = np.asarray(proxies, dtype=np.float64)
    mask = _active_mask(active, proxies.shape[0])
    if not (0 <= y < proxies.shape[0] and mask[y]):
        raise TargetNotActive(f"target class {y} is not in the active set")
    a, b, shift, inc = _template(LossVariant.NORM_SOFTMAX, temperature, 0.0, 0.0)
    return _single(x, y, proxies, a, b, shift, inc, active=mask)


def sample_loss(x, y, proxies, config, active=None):
    """Dispatch a single-sample loss from a :class:`LossConfig`."""
    a, b, shift, inc = _template(config.variant, config.temperature, config.scale, config.margin)
    proxies = np.asarray(proxies, dtype=np.float64)
    mask = None
    if active is not None:
        mask = _active_mask(active, proxies.shape[0])
        if not (0 <= y < proxies.shape[0] and mask[y]):
            raise TargetNotActive(f"target class {y} is not in the active set")
    return _single(x, y, proxies, a, b, shift, inc, active=mask)


def batch_loss(X, labels, proxies, config, active=None):
    """Mean per-sample loss over the rows of ``X`` with gradients of the mean.

    ``active`` optionally restricts every sample's denominator to a shared
    class subset, which must contain every label in the batch.
    """
    X = np.asarray(X, dtype=np.float64)
    P = np.asarray(proxies, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or P.ndim != 2 or X.shape[1] != P.shape[1]:
        raise ShapeMismatch(f"embeddings {X.shape} and proxies {P.shape} are incompatible")
    if labels.shape != (X.shape[0],):
        raise ShapeMismatch(f"{labels.shape[0] if labels.ndim else 0} labels for {X.shape[0]} rows")
    n, n_classes = X.shape[0], P.shape[0]
    if n == 0:
        raise ShapeMismatch("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise InvalidClass(f"labels must lie in [0, {n_classes})")

    a, b, shift, include_target = _template(
        config.variant, config.temperature, config.scale, config.margin
    )
    rows = np.arange(n)
    mask = np.ones((n, n_classes), dtype=bool)
    if active is not None:
        amask = _active_mask(active, n_classes)
        if not amask[labels].all():
            raise TargetNotActive("every batch label must be in the active set")
        mask &= amask[None, :]
    if not include_target:
        mask[rows, labels] = False
        if not mask.any(axis=1).all():
            raise SingleClass("denominator set is empty")

    Xh, xnorms = linalg.l2_normalize_rows(X)
    Ph, pnorms = linalg.l2_normalize_rows(P)
    logits = a * (Xh @ Ph.T) + b
    logits[rows, labels] -= shift

    masked = np.where(mask, logits, -np.inf)
    top = masked.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.sum(np.exp(masked - top), axis=1))
    losses = lse - logits[rows, labels]

    dcos = np.exp(masked - lse[:, None])
    dcos[rows, labels] -= 1.0
    dcos *= a / n

    grad_X = linalg.l2_normalize_rows_backward(Xh, xnorms, dcos @ Ph)
    grad_P = linalg.l2_normalize_rows_backward(Ph, pnorms, dcos.T @ Xh)
    return BatchLossResult(float(losses.mean()), grad_X, grad_P, losses)


def init_proxies(class_count, dim, rng):
    """Standard-normal proxy rows scaled to unit length."""
    P = rng.standard_normal((class_count, dim))
    return P / np.linalg.norm(P, axis=1, keepdims=True)
