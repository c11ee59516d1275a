"""Mini-batch training loops shared by federated clients and the centralized baseline.

Shuffle order and dropout masks come from streams keyed by
``(seed, client_id, epoch_index)``, where ``epoch_index`` counts epochs across
rounds. A single federated client running E local epochs per round therefore
walks exactly the same schedule as centralized training over T*E epochs.
"""

from __future__ import annotations

import numpy as np

from . import model as M
from .metrics import MetricsReport, classification_metrics, regression_metrics
from .nn import ParameterSet, make_optimizer
from .rng import stream


def run_epoch(params: ParameterSet, cfg: M.ModelConfig, ds, optimizer, batch_size: int,
              seed: int, client_id: int, epoch_index: int):
    """One shuffled pass over ``ds``; returns ``(params, mean batch loss)``."""
    n = len(ds)
    order = stream(seed, "shuffle", client_id, epoch_index).permutation(n)
    drop = stream(seed, "dropout", client_id, epoch_index)
    targets = ds.targets(cfg.task)
    losses = []
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        value, grads = M.loss_and_grad(
            params, cfg, ds.img[idx], ds.tab[idx], targets[idx], train=True, rng=drop
        )
        params = optimizer.step(params, grads)
        losses.append(value)
    return params, float(np.mean(losses)) if losses else 0.0


def evaluate(params: ParameterSet, cfg: M.ModelConfig, ds) -> MetricsReport:
    pred = M.predict(params, cfg, ds.img, ds.tab)
    if cfg.task == M.CLASSIFICATION:
        return classification_metrics(ds.labels, pred, cfg.num_classes)
    return regression_metrics(ds.pm25, pred)


def centralized_train(
    params: ParameterSet,
    cfg: M.ModelConfig,
    ds,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int,
    optimizer: str = "adam",
    val_ds=None,
    test_ds=None,
    client_id: int = 0,
    on_epoch=None,
):
    """Train on the pooled dataset.

    Returns ``(params, history)``. Each history row is a dict with the epoch,
    its mean training loss, ``"val"`` metrics (on ``val_ds``, or on the
    training data itself when no validation set is given) and, if
    ``test_ds`` is given, ``"test"`` metrics.
    """
    opt = make_optimizer(optimizer, lr)
    history = []
    for epoch in range(epochs):
        params, loss = run_epoch(params, cfg, ds, opt, batch_size, seed, client_id, epoch)
        row = {"epoch": epoch, "loss": loss, "val": evaluate(params, cfg, val_ds if val_ds is not None else ds)}
        if test_ds is not None:
            row["test"] = evaluate(params, cfg, test_ds)
        history.append(row)
        if on_epoch:
            on_epoch(row)
    return params, history
