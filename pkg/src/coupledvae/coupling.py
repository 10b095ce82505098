"""Coupled VAE: a stochastic VAE path and a structurally identical deterministic
path that share one encoder, tied together by a signal matching loss.

    total = rec + weighted_reg + lambda_r * rec_c + lambda_m * match

The matching loss compares the stochastic decoding signal ``h`` with a
detached copy of the deterministic one ``h_c``: ``h_c`` guides ``h`` and never
the other way round.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import GraphError, Tensor, backward, detach, grad_wrt, no_grad
from .config import RunConfig
from .corpus import Batch
from .nn import Linear, Module
from .optim import Adam
from .posterior import (
    RQ_SCALES,
    LatentSample,
    NumericalError,
    RegSchedule,
    anneal_weight,
    check_finite,
    make_posterior,
    mmd_rq,
)
from .seqmodel import Decoder, Encoder

LAMBDA_M_PRESETS = (0.1, 0.5, 1.0, 2.0, 5.0, 10.0)
MMD_KL_WEIGHT = 0.8  # extra annealed KL term kept alongside the MMD regularizer


def match_loss(h: Tensor, h_c: Tensor, kind: str = "rq", c: float = 1.0) -> Tensor:
    """Distance from ``h`` to ``detach(h_c)``, averaged over the batch."""
    if h.shape != h_c.shape:
        raise GraphError(f"match_loss shape mismatch: {h.shape} vs {h_c.shape}")
    d2 = (h - detach(h_c)).square().sum(axis=-1)
    if kind == "eucl":
        return d2.mean()
    if kind != "rq":
        raise ValueError(f"unknown match kind {kind!r}")
    total = None
    for s in RQ_SCALES:
        term = (d2 + s * c) ** -1.0 * (-s * c)
        total = term if total is None else total + term
    return total.mean()


@dataclass
class LossBreakdown:
    rec: float
    reg_raw: float
    reg_weighted: float
    rec_c: float
    match: float
    total: float
    lambda_r: float
    lambda_m: float
    kl_weight: float = 0.0
    match_hc_adjoint: float | None = None  # debug: max |d(lambda_m * match)/d h_c|

    def identity_residual(self) -> float:
        """|total - (rec + reg_weighted + lambda_r rec_c + lambda_m match)|."""
        return abs(self.total - (self.rec + self.reg_weighted + self.lambda_r * self.rec_c + self.lambda_m * self.match))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardResult:
    total: Tensor
    losses: LossBreakdown
    e: Tensor
    h: Tensor
    rec: Tensor
    reg_raw: Tensor
    params: object
    sample: LatentSample | None = None
    h_c: Tensor | None = None
    rec_c: Tensor | None = None
    match: Tensor | None = None
    params_c: object = None


def schedule_from_config(cfg: RunConfig) -> RegSchedule:
    return RegSchedule(
        kind=cfg.schedule,
        beta=cfg.beta,
        start=cfg.anneal_start,
        end=cfg.anneal_end,
        cycles=cfg.cycles,
        ratio=cfg.cycle_ratio,
        total=cfg.steps,
        free_bits=cfg.free_bits,
    )


class CoupledModel(Module):
    """Shared encoder; stochastic path; optional coupled deterministic path.

    ``mode`` selects the variant: ``vae`` (stochastic path only), ``coupled``
    (both paths), or ``dae`` (stochastic path with sampling disabled and no
    regularizer).
    """

    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        self.cfg = cfg
        H, Z, D = cfg.hidden_dim, cfg.latent_dim, cfg.emb_dim
        self.encoder = Encoder(vocab_size, D, H, rng)
        self.posterior = make_posterior(cfg.family, H, Z, rng, n_flows=cfg.n_flows)
        self.signal = Linear(Z, H, rng)
        self.decoder = Decoder(vocab_size, D, H, H, rng)
        if cfg.coupled:
            self.posterior_c = make_posterior(cfg.family, H, Z, rng, n_flows=cfg.n_flows)
            self.signal_c = Linear(Z, H, rng)
            self.decoder_c = Decoder(vocab_size, D, H, H, rng)
        self.schedule = schedule_from_config(cfg)

    @property
    def family(self) -> str:
        return self.cfg.family

    def stochastic_parameters(self) -> list:
        return self.posterior.parameters() + self.signal.parameters() + self.decoder.parameters()

    def coupled_parameters(self) -> list:
        if not self.cfg.coupled:
            return []
        return self.posterior_c.parameters() + self.signal_c.parameters() + self.decoder_c.parameters()

    # -- signal maps shared with evaluation -----------------------------
    def encode_params(self, batch: Batch):
        """Stochastic-path posterior parameters as arrays (no graph, no dropout)."""
        with no_grad():
            return self.posterior(self.encoder(batch)).numpy()

    def log_likelihood(self, batch: Batch, z: np.ndarray) -> np.ndarray:
        """log P(x | z) per row for latent codes ``z`` (B x Z), no dropout."""
        with no_grad():
            h = self.signal(Tensor(z))
            return -self.decoder.teacher_forced(batch, h).nll_rows

    def log_prior(self, batch: Batch, z: np.ndarray) -> np.ndarray:
        return self.posterior.log_prior(z)

    def decode_codes(self, z: np.ndarray, max_len: int) -> np.ndarray:
        with no_grad():
            h = self.signal(Tensor(z)).data
        return self.decoder.greedy(h, max_len)


def coupled_forward(
    batch: Batch,
    model: CoupledModel,
    rng: np.random.Generator,
    step: int,
    train: bool = True,
) -> ForwardResult:
    """One forward pass of every loss term; ``train=False`` disables dropout."""
    cfg = model.cfg
    drop_rng = rng if train else None
    rate = cfg.dropout

    e = model.encoder(batch, drop_rng, rate)
    params = model.posterior(e)
    check_finite(params, "posterior")

    sample = None
    if cfg.mode == "dae":
        z = model.posterior.deterministic_code(params)
        reg_raw = Tensor(0.0)
        reg_weighted = Tensor(0.0)
        kl_weight = 0.0
    else:
        sample = model.posterior.sample(params, rng)
        z = sample.z
        reg_raw = model.posterior.regularizer(params, sample)
        kl_weight = anneal_weight(step, model.schedule)
        reg_weighted = model.schedule.apply(reg_raw, step)
        if cfg.reg == "mmd":
            prior = model.posterior.prior_sample(len(batch), rng)
            reg_weighted = reg_weighted * MMD_KL_WEIGHT + mmd_rq(z, prior, cfg.mmd_c)

    h = model.signal(z)
    rec = model.decoder.teacher_forced(batch, h, drop_rng, rate).rec_loss
    total = rec + reg_weighted

    h_c = rec_c = match = params_c = None
    rec_c_val = match_val = 0.0
    if cfg.coupled:
        params_c = model.posterior_c(e)
        check_finite(params_c, "coupled posterior")
        z_c = model.posterior_c.deterministic_code(params_c)
        h_c = model.signal_c(z_c)
        # dropout stays on in decoder_c for parity with the stochastic decoder
        rec_c = model.decoder_c.teacher_forced(batch, h_c, drop_rng, rate).rec_loss
        match = match_loss(h, h_c, cfg.match_kind, cfg.match_c)
        total = total + rec_c * cfg.lambda_r + match * cfg.lambda_m
        rec_c_val, match_val = rec_c.item(), match.item()

    losses = LossBreakdown(
        rec=rec.item(),
        reg_raw=reg_raw.item(),
        reg_weighted=reg_weighted.item(),
        rec_c=rec_c_val,
        match=match_val,
        total=total.item(),
        lambda_r=cfg.lambda_r if cfg.coupled else 0.0,
        lambda_m=cfg.lambda_m if cfg.coupled else 0.0,
        kl_weight=kl_weight,
    )
    for name in ("rec", "reg_raw", "reg_weighted", "rec_c", "match", "total"):
        if not np.isfinite(getattr(losses, name)):
            raise NumericalError(f"non-finite {name} at step {step}")
    return ForwardResult(total, losses, e, h, rec, reg_raw, params, sample, h_c, rec_c, match, params_c)


def make_optimizer(model: Module, cfg: RunConfig) -> Adam:
    return Adam(
        model.parameters(),
        lr=cfg.lr,
        betas=(cfg.beta1, cfg.beta2),
        decay_start=cfg.decay_start if cfg.decay_start > 0 else None,
        decay_interval=cfg.decay_interval,
    )


def detach_check(out) -> float:
    """Largest |adjoint| reaching h_c from the weighted match term (must be exactly 0)."""
    if out.h_c is None:
        return 0.0
    g, _ = grad_wrt(out.match * out.losses.lambda_m, out.h_c)
    return float(np.abs(g).max())


def train_step(
    model: CoupledModel,
    batch: Batch,
    optimizer: Adam,
    rng: np.random.Generator,
    step: int,
    forward=coupled_forward,
) -> LossBreakdown:
    """Forward, backward over the total, one Adam update."""
    out = forward(batch, model, rng, step)
    if model.cfg.debug:
        out.losses.match_hc_adjoint = detach_check(out)
    optimizer.zero_grad()
    backward(out.total)
    optimizer.step(step)
    return out.losses
