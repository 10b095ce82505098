"""Training loop shared by the unconditional and conditional models."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .config import RunConfig
from .corpus import iterate_batches
from .coupling import CoupledModel, LossBreakdown, coupled_forward, make_optimizer, train_step
from .cvae import CVAEModel, cvae_forward
from .metrics import nll_is
from .posterior import NumericalError

log = logging.getLogger(__name__)


@dataclass
class Streams:
    """Independent random streams derived from one run seed."""

    init: np.random.Generator
    batches: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        init, batches, noise = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        return cls(init, batches, noise)


def build_model(cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
    if cfg.task == "dialogue":
        return CVAEModel(cfg, vocab_size, rng)
    return CoupledModel(cfg, vocab_size, rng)


def forward_for(cfg: RunConfig):
    return cvae_forward if cfg.task == "dialogue" else coupled_forward


def validation_nll(model, data, n_samples: int, seed: int, step: int, max_rows: int = 512) -> float:
    """Mean importance-sampled NLL per text with a step-keyed stream."""
    rng = np.random.default_rng([seed, step, 7])
    if len(data) > max_rows:
        data = data.take(np.arange(max_rows))
    return float(np.mean(nll_is(model, data, n_samples, rng)))


@dataclass
class TrainResult:
    model: object
    history: list[LossBreakdown] = field(default_factory=list)
    valid_trace: list[tuple[int, float]] = field(default_factory=list)
    best_step: int | None = None
    best_state: dict | None = None
    steps_done: int = 0


def train(
    cfg: RunConfig,
    train_data,
    valid_data=None,
    vocab_size: int | None = None,
    model=None,
    tracker=None,
    on_step: Callable[[int, LossBreakdown], None] | None = None,
    on_crash: Callable[[object, int], None] | None = None,
) -> TrainResult:
    """Run ``cfg.steps`` updates.

    Validation happens every ``valid_every`` completed steps and after the last
    one; the parameters with the lowest validation NLL are kept in
    ``best_state``.  Probes (``tracker``) run before the update of every due
    step and once more after the final step.
    """
    streams = Streams.from_seed(cfg.seed)
    if model is None:
        model = build_model(cfg, vocab_size, streams.init)
    forward = forward_for(cfg)
    opt = make_optimizer(model, cfg)
    batches = iterate_batches(len(train_data), min(cfg.batch_size, len(train_data)), streams.batches)
    result = TrainResult(model)
    best = np.inf

    for step in range(cfg.steps):
        if tracker is not None and tracker.due(step):
            tracker(model, step)
        batch = train_data.take(next(batches))
        try:
            losses = train_step(model, batch, opt, streams.noise, step, forward=forward)
            if not all(np.isfinite(p.data).all() for p in model.parameters()):
                raise NumericalError(f"non-finite parameters after step {step}")
        except NumericalError:
            if on_crash is not None:
                on_crash(model, step)
            raise
        result.history.append(losses)
        if on_step is not None:
            on_step(step, losses)
        done = step + 1
        if valid_data is not None and (done % cfg.valid_every == 0 or done == cfg.steps):
            nll = validation_nll(model, valid_data, cfg.valid_samples, cfg.seed, done)
            result.valid_trace.append((done, nll))
            log.info("step %d valid nll %.4f", done, nll)
            if nll < best:
                best = nll
                result.best_step = done
                result.best_state = model.state_dict()
    if tracker is not None and tracker.due(cfg.steps):
        tracker(model, cfg.steps)
    result.steps_done = cfg.steps
    return result
