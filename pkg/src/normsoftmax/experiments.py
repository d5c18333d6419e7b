"""
Desk-scale experiment helpers shared by the sweep command and the tests.
"""
import time
from dataclasses import dataclass, field

import numpy as np

from .retrieval import CUB_KS, EmbeddingSet, evaluate
from .sampling import class_split, generate_synthetic, holdout_split, make_rng
from .trainer import embed, fit, initial_model

# 20 classes x 100 samples, 64 features; nearest-center separable
DESK_SCALE = dict(class_count=20, per_class=100, feature_dim=64, center_scale=5.0,
                  noise_sigma=0.5)


def desk_scale_dataset(seed=0, **overrides):
    params = {**DESK_SCALE, **overrides}
    return generate_synthetic(rng=make_rng(seed), **params)


def split(dataset, how="holdout", seed=0, test_fraction=0.5):
    """``"holdout"``: half of every class held out.  ``"open"``: first half of
    the classes for training, the unseen rest for evaluation."""
    if how == "holdout":
        return holdout_split(dataset, test_fraction, make_rng(seed))
    if how == "open":
        return class_split(dataset, range(dataset.class_count // 2))
    raise ValueError(f"unknown split {how!r}")


@dataclass
class RunResult:
    float_report: object
    binary_report: object
    history: object
    wall_time: float
    model: object = field(repr=False, default=None)
    proxies: object = field(repr=False, default=None)


def train_and_evaluate(train, test, embed_dim, config, Ks=CUB_KS, with_binary=True,
                       hidden_dim=None, layer_norm=True):
    t0 = time.perf_counter()
    model, proxies = initial_model(train, embed_dim, config, hidden_dim, layer_norm)
    model, proxies, history = fit(train, model, proxies, config)
    eset = EmbeddingSet(embed(model, test.features), test.labels)
    reports = evaluate(eset, Ks, with_binary=with_binary, rng=make_rng(config.seed))
    return RunResult(reports[0], reports[1] if with_binary else None, history,
                     time.perf_counter() - t0, model, proxies)


def recall_gap(result, k=1):
    return abs(result.float_report.recall_at[k] - result.binary_report.recall_at[k])


def mean_first_batch_loss(dataset, embed_dim, config, seeds, layer_norm=True, input_scale=1.0,
                          hidden_dim=None):
    """Average loss of the very first minibatch over several initializations."""
    from dataclasses import replace
    from .sampling import Dataset
    from .trainer import epoch_batches, loss_and_grads

    scaled = Dataset(dataset.features * input_scale, dataset.labels, dataset.class_count)
    losses = []
    for s in seeds:
        cfg = replace(config, seed=s)
        model, proxies = initial_model(scaled, embed_dim, cfg, hidden_dim, layer_norm)
        idx = epoch_batches(scaled.labels, cfg, make_rng(s), scaled.class_count)[0]
        loss, _ = loss_and_grads(model, proxies, scaled.features[idx], scaled.labels[idx],
                                 cfg.loss)
        losses.append(loss)
    return float(np.mean(losses))
