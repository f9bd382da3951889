"""Losses and the mini-batch training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .encoder import EncoderConfig, LatentGraph, encode, init_params
from .errors import ConfigError, DataError, NumericError
from .graph import Graph, NodeDistribution, PathSample, Trajectory, path_edges
from .nbwalk import suffix_likelihood, target_marginal
from .nn import ParamStore, adam_step

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-30
LOSS_KINDS = ("suffix_nll", "target_ce")


@dataclass
class TrainSample:
    trajectory: Trajectory
    horizon: int
    true_suffix: PathSample | None = None
    true_target: NodeDistribution | None = None
    prefix_path: PathSample | None = None  # known node path ending at the current position

    def __post_init__(self):
        if self.true_suffix is None and self.true_target is None:
            raise DataError("a training sample needs a suffix or a target")
        if self.horizon < 1:
            raise DataError("horizon must be >= 1")
        if self.true_suffix is not None and len(self.true_suffix) != self.horizon:
            raise DataError(f"suffix has {len(self.true_suffix)} nodes but horizon is {self.horizon}")


@dataclass
class TrainConfig:
    loss_kind: str = "target_ce"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 0  # 0 disables early stopping on validation loss

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.epochs < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr > 0 required")


def suffix_nll_loss(lat: LatentGraph, sample: TrainSample):
    if sample.true_suffix is None:
        raise DataError("suffix_nll_loss needs a true suffix")
    path_edges(lat.graph, sample.true_suffix)
    p = suffix_likelihood(lat, sample.trajectory.last, sample.true_suffix)
    return -ad.log(p + PROB_FLOOR)


def target_ce_loss(lat: LatentGraph, sample: TrainSample):
    if sample.true_target is None:
        raise DataError("target_ce_loss needs a true target")
    xhat = target_marginal(lat, sample.trajectory.last, sample.horizon, mode="exact")
    nodes = sample.true_target.nodes_array()
    mass = sample.true_target.mass_array()
    return -ad.sum(ad.log(ad.gather(xhat, nodes) + PROB_FLOOR) * mass)


LOSSES = {"suffix_nll": suffix_nll_loss, "target_ce": target_ce_loss}


def sample_loss(g, sample, params, config: TrainConfig, tape=None):
    lat = encode(g, sample.trajectory, params, config.encoder, tape)
    return LOSSES[config.loss_kind](lat, sample)


def mean_loss(g, samples, params, config):
    if not samples:
        return math.nan
    return float(np.mean([float(sample_loss(g, s, params, config)) for s in samples]))


def gradient_step(g, batch, params: ParamStore, config: TrainConfig, t: int, indices=None):
    """Accumulate the mean batch gradient in sample order, then take one Adam step."""
    indices = range(len(batch)) if indices is None else indices
    params.zero_grad()
    losses = []
    for i, sample in enumerate(batch):
        tape = Tape()
        loss = sample_loss(g, sample, params, config, tape)
        val = float(loss)
        if not math.isfinite(val):
            raise NumericError(f"non-finite loss {val} at sample {indices[i]}")
        losses.append(val)
        if len(tape):
            backward(tape, seed=1.0 / len(batch), output=loss, accumulate=True)
    adam_step(params, config.lr, config.beta1, config.beta2, config.eps, t)
    return losses


def train(g: Graph, samples, config: TrainConfig, valid=None, params: ParamStore | None = None):
    """Returns ``(params, history)``; history rows are ``(epoch, train_loss, valid_loss)``."""
    samples = list(samples)
    if params is None:
        d_v, d_e = g.node_features.shape[1], g.edge_features.shape[1]
        params = init_params(config.encoder, d_v, d_e, config.seed)
    rng = np.random.default_rng([config.seed, 1])
    history = []
    best, bad_epochs = math.inf, 0
    t = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(samples))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            t += 1
            batch = [samples[i] for i in idx]
            try:
                epoch_losses += gradient_step(g, batch, params, config, t, idx.tolist())
            except NumericError as exc:
                raise NumericError(f"epoch {epoch}: {exc}") from None
        train_loss = float(np.mean(epoch_losses)) if epoch_losses else math.nan
        valid_loss = mean_loss(g, valid, params, config) if valid else math.nan
        history.append((epoch, train_loss, valid_loss))
        log.info("epoch %d train %.5f valid %.5f", epoch, train_loss, valid_loss)
        if config.patience and valid:
            if valid_loss < best - 1e-12:
                best, bad_epochs = valid_loss, 0
            else:
                bad_epochs += 1
                if bad_epochs >= config.patience:
                    break
    return params, history


def write_loss_curve(path, history):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch\ttrain_loss\tvalid_loss\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch}\t{tr!r}\t{va!r}\n")
