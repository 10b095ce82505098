"""Conditional (Coupled-)CVAE for post -> response generation.

The post is encoded as ``e_u``.  The prior network maps ``e_u`` to p(z|post),
the posterior networks read ``[e_x; e_u]``, and both decoders receive
``[h; e_u]`` as their decoding signal.  The objective has the same four terms
as the unconditional coupled model, with KL(q(z|x,u) || p(z|u)) as regularizer.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concat, no_grad
from .config import RunConfig
from .corpus import PairBatch
from .coupling import ForwardResult, LossBreakdown, match_loss, schedule_from_config
from .nn import Linear, Module
from .posterior import (
    GaussianParams,
    GaussianPosterior,
    NumericalError,
    anneal_weight,
    check_finite,
    gaussian_log_density,
    kl_gaussian_pair,
)
from .seqmodel import Decoder, Encoder


class CVAEModel(Module):
    def __init__(self, cfg: RunConfig, vocab_size: int, rng: np.random.Generator):
        if cfg.family != "gaussian":
            raise ValueError("the conditional model supports the gaussian family only")
        self.cfg = cfg
        H, Z, D = cfg.hidden_dim, cfg.latent_dim, cfg.emb_dim
        self.post_encoder = Encoder(vocab_size, D, H, rng)
        self.encoder = Encoder(vocab_size, D, H, rng)
        self.prior_net = Linear(H, 2 * Z, rng)
        self.posterior = GaussianPosterior(2 * H, Z, rng)
        self.signal = Linear(Z, H, rng)
        self.decoder = Decoder(vocab_size, D, H, 2 * H, rng)
        if cfg.coupled:
            self.posterior_c = GaussianPosterior(2 * H, Z, rng)
            self.signal_c = Linear(Z, H, rng)
            self.decoder_c = Decoder(vocab_size, D, H, 2 * H, rng)
        self.schedule = schedule_from_config(cfg)

    @property
    def family(self) -> str:
        return "gaussian"

    def prior(self, e_u: Tensor) -> GaussianParams:
        out = self.prior_net(e_u)
        Z = self.cfg.latent_dim
        return GaussianParams(out[:, :Z], out[:, Z:])

    # -- evaluation interface ---------------------------------------------
    def encode_params(self, pair: PairBatch) -> GaussianParams:
        with no_grad():
            e_u = self.post_encoder(pair.post)
            e_x = self.encoder(pair.response)
            return self.posterior(concat([e_x, e_u], axis=-1)).numpy()

    def log_prior(self, pair: PairBatch, z: np.ndarray) -> np.ndarray:
        with no_grad():
            p = self.prior(self.post_encoder(pair.post)).numpy()
        return gaussian_log_density(z, p.mu, p.logvar)

    def log_likelihood(self, pair: PairBatch, z: np.ndarray) -> np.ndarray:
        with no_grad():
            e_u = self.post_encoder(pair.post)
            sig = concat([self.signal(Tensor(z)), e_u], axis=-1)
            return -self.decoder.teacher_forced(pair.response, sig).nll_rows

    def respond(self, post, mode: str, rng: np.random.Generator | None, max_len: int) -> np.ndarray:
        """Greedy-decode one response per post from z ~ p(z|post) (``sample``) or its mean (``greedy``)."""
        with no_grad():
            e_u = self.post_encoder(post)
            p = self.prior(e_u).numpy()
            if mode == "sample":
                z = p.mu + np.exp(0.5 * p.logvar) * rng.standard_normal(p.mu.shape)
            elif mode == "greedy":
                z = p.mu
            else:
                raise ValueError(f"unknown respond mode {mode!r}")
            sig = np.concatenate([self.signal(Tensor(z)).data, e_u.data], axis=-1)
        return self.decoder.greedy(sig, max_len)


def coupled_rec_c_conditioned(pair: PairBatch, model: CVAEModel, e_x: Tensor, e_u: Tensor, drop_rng=None):
    """Coupled reconstruction with decoder_c conditioned on the post; returns (rec_c, h_c, params_c)."""
    params_c = model.posterior_c(concat([e_x, e_u], axis=-1))
    check_finite(params_c, "coupled posterior")
    h_c = model.signal_c(model.posterior_c.deterministic_code(params_c))
    rec_c = model.decoder_c.teacher_forced(
        pair.response, concat([h_c, e_u], axis=-1), drop_rng, model.cfg.dropout
    ).rec_loss
    return rec_c, h_c, params_c


def cvae_forward(
    pair: PairBatch,
    model: CVAEModel,
    rng: np.random.Generator,
    step: int,
    train: bool = True,
    zero_condition: bool = False,
) -> ForwardResult:
    cfg = model.cfg
    drop_rng = rng if train else None
    rate = cfg.dropout

    e_u = model.post_encoder(pair.post, drop_rng, rate)
    if zero_condition:
        e_u = e_u * 0.0
    e_x = model.encoder(pair.response, drop_rng, rate)
    params = model.posterior(concat([e_x, e_u], axis=-1))
    check_finite(params, "posterior")
    prior = model.prior(e_u)

    if cfg.mode == "dae":
        z = params.mu
        sample = None
        reg_raw = Tensor(0.0)
        reg_weighted = Tensor(0.0)
        kl_weight = 0.0
    else:
        sample = model.posterior.sample(params, rng)
        z = sample.z
        reg_raw = kl_gaussian_pair(params, prior)
        kl_weight = anneal_weight(step, model.schedule)
        reg_weighted = model.schedule.apply(reg_raw, step)

    h = model.signal(z)
    rec = model.decoder.teacher_forced(pair.response, concat([h, e_u], axis=-1), drop_rng, rate).rec_loss
    total = rec + reg_weighted

    h_c = rec_c = match = params_c = None
    rec_c_val = match_val = 0.0
    if cfg.coupled:
        rec_c, h_c, params_c = coupled_rec_c_conditioned(pair, model, e_x, e_u, drop_rng)
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
    return ForwardResult(total, losses, e_x, h, rec, reg_raw, params, sample, h_c, rec_c, match, params_c)
