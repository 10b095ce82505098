"""Posterior families, their regularizers, deterministic codes, and weight schedules.

Three families share one interface:

* ``net(e)`` maps the encoded text to posterior parameters (graph tensors),
* ``net.sample(params, rng)`` draws a reparameterized latent sample,
* ``net.regularizer(params, sample)`` is the raw (unweighted) KL-type term,
* ``net.deterministic_code(params)`` is the sampling-free code of the coupled path,

plus numpy-only helpers (``log_density``, ``sample_np``, ``log_prior``,
``prior_sample``) used by the evaluation estimators.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
from scipy.special import gammaln

from .autodiff import GraphError, Tensor, _log_bessel_series, concat, l2_norm, log_bessel_i, maximum
from .nn import Linear, Module

log = logging.getLogger(__name__)

KAPPA_MAX = 1e4
RQ_SCALES = (0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0)
LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(ArithmeticError):
    """Non-finite or degenerate quantity during a forward pass."""


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# -- parameter containers --------------------------------------------------


@dataclass
class GaussianParams:
    mu: Tensor
    logvar: Tensor

    def numpy(self) -> "GaussianParams":
        return GaussianParams(_arr(self.mu), _arr(self.logvar))


@dataclass
class PlanarLayer:
    u: Tensor  # already reparameterized so that w.u >= -1
    w: Tensor
    b: Tensor  # B x 1


@dataclass
class FlowParams:
    mu0: Tensor
    logvar0: Tensor
    layers: list[PlanarLayer] = field(default_factory=list)

    def numpy(self) -> "FlowParams":
        return FlowParams(
            _arr(self.mu0), _arr(self.logvar0), [PlanarLayer(_arr(l.u), _arr(l.w), _arr(l.b)) for l in self.layers]
        )


@dataclass
class VMFParams:
    mu: Tensor  # unit rows
    kappa: Tensor  # B x 1, positive

    def numpy(self) -> "VMFParams":
        return VMFParams(_arr(self.mu), _arr(self.kappa))


def take_rows(params, rows):
    """Row-subset of a numpy parameter container."""
    if isinstance(params, FlowParams):
        return FlowParams(
            params.mu0[rows], params.logvar0[rows], [PlanarLayer(l.u[rows], l.w[rows], l.b[rows]) for l in params.layers]
        )
    return replace(params, **{f.name: getattr(params, f.name)[rows] for f in fields(params)})


def check_finite(params, where: str) -> None:
    arrays = []
    if isinstance(params, FlowParams):
        arrays = [params.mu0, params.logvar0] + [x for l in params.layers for x in (l.u, l.w, l.b)]
    else:
        arrays = [getattr(params, f.name) for f in fields(params)]
    for a in arrays:
        if not np.all(np.isfinite(_arr(a))):
            raise NumericalError(f"non-finite posterior parameters in {where}")


@dataclass
class LatentSample:
    z: Tensor
    log_q: np.ndarray  # per-row log density of z under the posterior
    z0: Tensor | None = None
    logdets: list[Tensor] = field(default_factory=list)


# -- Gaussian --------------------------------------------------------------


def gaussian_log_density(z, mu, logvar) -> np.ndarray:
    z, mu, logvar = _arr(z), _arr(mu), _arr(logvar)
    return -0.5 * np.sum(LOG_2PI + logvar + (z - mu) ** 2 / np.exp(logvar), axis=-1)


def std_normal_log_density(z) -> np.ndarray:
    z = _arr(z)
    return -0.5 * np.sum(LOG_2PI + z * z, axis=-1)


def kl_gaussian(params: GaussianParams) -> Tensor:
    """KL(N(mu, diag exp(logvar)) || N(0, I)), summed over dims, meaned over the batch."""
    mu, logvar = params.mu, params.logvar
    per_row = (mu.square() + logvar.exp() - 1.0 - logvar).sum(axis=-1) * 0.5
    return per_row.mean()


def kl_gaussian_pair(q: GaussianParams, p: GaussianParams) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over dims, meaned over the batch."""
    var_ratio = (q.logvar - p.logvar).exp()
    quad = (q.mu - p.mu).square() / p.logvar.exp()
    per_row = (var_ratio + quad - 1.0 - (q.logvar - p.logvar)).sum(axis=-1) * 0.5
    return per_row.mean()


class GaussianPosterior(Module):
    family = "gaussian"

    def __init__(self, in_dim: int, latent_dim: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.proj = Linear(in_dim, 2 * latent_dim, rng)

    def __call__(self, e: Tensor) -> GaussianParams:
        out = self.proj(e)
        Z = self.latent_dim
        return GaussianParams(out[:, :Z], out[:, Z:])

    def sample(self, params: GaussianParams, rng: np.random.Generator, eps: np.ndarray | None = None) -> LatentSample:
        if eps is None:
            eps = rng.standard_normal(params.mu.shape)
        z = params.mu + (params.logvar * 0.5).exp() * eps
        return LatentSample(z, gaussian_log_density(z, params.mu, params.logvar))

    def regularizer(self, params: GaussianParams, sample: LatentSample | None = None) -> Tensor:
        return kl_gaussian(params)

    def deterministic_code(self, params: GaussianParams) -> Tensor:
        return params.mu

    # numpy side
    @staticmethod
    def log_density(params: GaussianParams, z) -> np.ndarray:
        return gaussian_log_density(z, params.mu, params.logvar)

    @staticmethod
    def sample_np(params: GaussianParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        mu, logvar = _arr(params.mu), _arr(params.logvar)
        z = mu + np.exp(0.5 * logvar) * rng.standard_normal((n,) + mu.shape)
        return z, gaussian_log_density(z, mu, logvar)

    @staticmethod
    def code_np(params: GaussianParams) -> np.ndarray:
        return _arr(params.mu)

    def log_prior(self, z) -> np.ndarray:
        return std_normal_log_density(z)

    def prior_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim))


# -- planar flows ----------------------------------------------------------


def planar_u_hat(u: Tensor, w: Tensor) -> Tensor:
    """Reparameterize u so that w.u_hat >= -1 (invertibility of the planar map)."""
    wu = (w * u).sum(axis=-1, keepdims=True)
    m = wu.softplus() - 1.0
    return u + (m - wu) * w / (w.square().sum(axis=-1, keepdims=True) + 1e-12)


def planar_apply(z0: Tensor, layers: list[PlanarLayer]) -> tuple[Tensor, Tensor, list[Tensor]]:
    """Apply f(z) = z + u tanh(w.z + b) layer by layer.

    Returns ``(z_K, sum_logdet, per_layer_logdets)``; log-dets are per row.
    """
    z = z0
    logdets = []
    for layer in layers:
        a = (layer.w * z).sum(axis=-1, keepdims=True) + layer.b
        t = a.tanh()
        psi_u = (1.0 - t.square()) * (layer.w * layer.u).sum(axis=-1, keepdims=True)
        det = 1.0 + psi_u
        if np.any(np.abs(det.data) < 1e-12):
            raise NumericalError("planar flow Jacobian determinant is numerically zero")
        logdets.append((det.square().log() * 0.5).reshape(-1))
        z = z + layer.u * t
    total = logdets[0] if logdets else Tensor(np.zeros(z0.shape[0]))
    for ld in logdets[1:]:
        total = total + ld
    return z, total, logdets


def planar_forward_np(z0: np.ndarray, layers) -> tuple[np.ndarray, np.ndarray]:
    z = z0
    total = np.zeros(z0.shape[:-1])
    for l in layers:
        a = np.sum(l.w * z, axis=-1, keepdims=True) + l.b
        t = np.tanh(a)
        det = 1.0 + (1.0 - t * t)[..., 0] * np.sum(l.w * l.u, axis=-1)
        total = total + np.log(np.abs(det))
        z = z + l.u * t
    return z, total


def planar_inverse_np(zk: np.ndarray, layers, iters: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Invert a stack of planar layers; returns ``(z0, sum_logdet)`` evaluated on the way."""
    z = zk
    total = np.zeros(zk.shape[:-1])
    for l in reversed(layers):
        wu = np.sum(l.w * l.u, axis=-1)
        wy = np.sum(l.w * z, axis=-1)
        b = l.b[..., 0]
        wu, wy, b = np.broadcast_arrays(wu, wy, b)
        # w.y = alpha + wu * tanh(alpha + b) is non-decreasing in alpha; bisect
        lo = wy - np.abs(wu) - 1.0
        hi = wy + np.abs(wu) + 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            f = mid + wu * np.tanh(mid + b) - wy
            lo = np.where(f < 0, mid, lo)
            hi = np.where(f < 0, hi, mid)
        alpha = 0.5 * (lo + hi)
        t = np.tanh(alpha + b)
        z = z - l.u * t[..., None]
        total = total + np.log(np.abs(1.0 + (1.0 - t * t) * wu))
    return z, total


class FlowPosterior(Module):
    """Gaussian base posterior followed by K amortized planar layers."""

    family = "flow"

    def __init__(self, in_dim: int, latent_dim: int, rng: np.random.Generator, n_flows: int = 3):
        self.latent_dim = latent_dim
        self.n_flows = n_flows
        self.proj = Linear(in_dim, 2 * latent_dim, rng)
        self.flow_proj = [Linear(in_dim, 2 * latent_dim + 1, rng) for _ in range(n_flows)]

    def __call__(self, e: Tensor) -> FlowParams:
        Z = self.latent_dim
        out = self.proj(e)
        layers = []
        for lin in self.flow_proj:
            f = lin(e)
            u, w, b = f[:, :Z], f[:, Z : 2 * Z], f[:, 2 * Z :]
            layers.append(PlanarLayer(planar_u_hat(u, w), w, b))
        return FlowParams(out[:, :Z], out[:, Z:], layers)

    def sample(self, params: FlowParams, rng: np.random.Generator, eps: np.ndarray | None = None) -> LatentSample:
        if eps is None:
            eps = rng.standard_normal(params.mu0.shape)
        z0 = params.mu0 + (params.logvar0 * 0.5).exp() * eps
        zk, total, logdets = planar_apply(z0, params.layers)
        log_q = gaussian_log_density(z0, params.mu0, params.logvar0) - total.data
        return LatentSample(zk, log_q, z0=z0, logdets=logdets)

    def regularizer(self, params: FlowParams, sample: LatentSample) -> Tensor:
        return flow_reg_term(params, sample)

    def deterministic_code(self, params: FlowParams) -> Tensor:
        zk, _, _ = planar_apply(params.mu0, params.layers)
        return zk

    @staticmethod
    def log_density(params: FlowParams, z) -> np.ndarray:
        z0, total = planar_inverse_np(_arr(z), params.layers)
        return gaussian_log_density(z0, params.mu0, params.logvar0) - total

    @staticmethod
    def sample_np(params: FlowParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        mu0, logvar0 = _arr(params.mu0), _arr(params.logvar0)
        z0 = mu0 + np.exp(0.5 * logvar0) * rng.standard_normal((n,) + mu0.shape)
        zk, total = planar_forward_np(z0, params.layers)
        return zk, gaussian_log_density(z0, mu0, logvar0) - total

    @staticmethod
    def code_np(params: FlowParams) -> np.ndarray:
        zk, _ = planar_forward_np(_arr(params.mu0), params.layers)
        return zk

    def log_prior(self, z) -> np.ndarray:
        return std_normal_log_density(z)

    def prior_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.latent_dim))


def flow_reg_term(params: FlowParams, sample: LatentSample) -> Tensor:
    """Single-sample estimate of E[log q0(z0) - sum log|det| - log p(z_K)], meaned over the batch."""
    z0, zk = sample.z0, sample.z
    log_q0 = ((z0 - params.mu0).square() / params.logvar0.exp() + params.logvar0 + LOG_2PI).sum(axis=-1) * -0.5
    log_pk = (zk.square() + LOG_2PI).sum(axis=-1) * -0.5
    per_row = log_q0 - log_pk
    for ld in sample.logdets:
        per_row = per_row - ld
    return per_row.mean()


# -- von Mises-Fisher ------------------------------------------------------


def log_sphere_area(dim: int) -> float:
    """log of the surface area of S^{dim-1}."""
    return math.log(2.0) + 0.5 * dim * math.log(math.pi) - float(gammaln(0.5 * dim))


def vmf_log_normalizer(kappa, dim: int):
    """log C_dim(kappa); works on tensors (differentiable) and arrays."""
    v = 0.5 * dim - 1.0
    if isinstance(kappa, Tensor):
        return kappa.log() * v - 0.5 * dim * LOG_2PI - log_bessel_i(v, kappa)
    kappa = np.asarray(kappa, dtype=np.float64)
    return v * np.log(kappa) - 0.5 * dim * LOG_2PI - _log_bessel_series(v, kappa)


def vmf_log_density(z, mu, kappa) -> np.ndarray:
    z, mu, kappa = _arr(z), _arr(mu), _arr(kappa)
    dim = mu.shape[-1]
    return vmf_log_normalizer(kappa[..., 0], dim) + kappa[..., 0] * np.sum(mu * z, axis=-1)


def bessel_ratio(kappa, dim: int):
    """Mean resultant length I_{d/2}(k) / I_{d/2-1}(k)."""
    v = 0.5 * dim - 1.0
    if isinstance(kappa, Tensor):
        return (log_bessel_i(v + 1.0, kappa) - log_bessel_i(v, kappa)).exp()
    kappa = np.asarray(kappa, dtype=np.float64)
    return np.exp(_log_bessel_series(v + 1.0, kappa) - _log_bessel_series(v, kappa))


def vmf_kl_uniform(kappa, dim: int):
    """KL(vMF(mu, kappa) || Uniform(S^{dim-1})) per row; independent of mu."""
    return kappa * bessel_ratio(kappa, dim) + vmf_log_normalizer(kappa, dim) + log_sphere_area(dim)


def sample_vmf_weight(kappa: np.ndarray, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Rejection-sample the Beta variate eps behind w = <mu, z> (Wood, 1994).

    Returns eps; the tangent weight is ``w = (1 - (1 + b) eps) / (1 - (1 - b) eps)``.
    """
    kappa = np.asarray(kappa, dtype=np.float64).reshape(-1)
    m1 = dim - 1.0
    b = m1 / (2.0 * kappa + np.sqrt(4.0 * kappa**2 + m1**2))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * np.log(1.0 - x0**2)
    eps = np.empty_like(kappa)
    todo = np.arange(kappa.size)
    while todo.size:
        e = rng.beta(m1 / 2.0, m1 / 2.0, size=todo.size)
        u = rng.random(todo.size)
        bb = b[todo]
        w = (1.0 - (1.0 + bb) * e) / (1.0 - (1.0 - bb) * e)
        ok = kappa[todo] * w + m1 * np.log(1.0 - x0[todo] * w) - c[todo] >= np.log(u)
        eps[todo[ok]] = e[ok]
        todo = todo[~ok]
    return eps


def _householder(zp, mu):
    """Reflect samples drawn around e1 onto mean direction mu (tensor or array)."""
    dim = mu.shape[-1]
    e1 = np.zeros(dim)
    e1[0] = 1.0
    if isinstance(mu, Tensor):
        diff = (mu * -1.0) + e1
        u = diff / ((diff.square().sum(axis=-1, keepdims=True) + 1e-30).sqrt())
        return zp - u * ((zp * u).sum(axis=-1, keepdims=True) * 2.0)
    diff = e1 - mu
    u = diff / np.sqrt(np.sum(diff * diff, axis=-1, keepdims=True) + 1e-30)
    return zp - 2.0 * np.sum(zp * u, axis=-1, keepdims=True) * u


def _tangent(rng: np.random.Generator, shape) -> np.ndarray:
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def sample_vmf_np(mu: np.ndarray, kappa: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n samples per row of (mu, kappa); returns n x B x dim."""
    mu = np.asarray(mu, dtype=np.float64)
    B, dim = mu.shape
    kap = np.broadcast_to(np.asarray(kappa, dtype=np.float64).reshape(B), (n, B)).reshape(-1)
    eps = sample_vmf_weight(kap, dim, rng)
    m1 = dim - 1.0
    b = m1 / (2.0 * kap + np.sqrt(4.0 * kap**2 + m1**2))
    w = ((1.0 - (1.0 + b) * eps) / (1.0 - (1.0 - b) * eps)).reshape(n, B, 1)
    v = _tangent(rng, (n, B, dim - 1))
    zp = np.concatenate([w, np.sqrt(np.clip(1.0 - w * w, 0.0, None)) * v], axis=-1)
    return _householder(zp, np.broadcast_to(mu, (n, B, dim)))


class VMFPosterior(Module):
    """vMF posterior with per-instance learnable concentration, uniform prior on the sphere."""

    family = "vmf"

    def __init__(self, in_dim: int, latent_dim: int, rng: np.random.Generator):
        self.latent_dim = latent_dim
        self.proj_mu = Linear(in_dim, latent_dim, rng)
        self.proj_kappa = Linear(in_dim, 1, rng)

    def __call__(self, e: Tensor) -> VMFParams:
        raw = self.proj_mu(e)
        mu = raw / l2_norm(raw, axis=-1, keepdims=True)
        kappa = self.proj_kappa(e).softplus() + 1.0
        if np.any(kappa.data > KAPPA_MAX):
            log.warning("vMF concentration above %.0f clamped", KAPPA_MAX)
            kappa = kappa - maximum(kappa - KAPPA_MAX, 0.0)
        return VMFParams(mu, kappa)

    def sample(self, params: VMFParams, rng: np.random.Generator, eps=None) -> LatentSample:
        mu, kappa = params.mu, params.kappa
        B, dim = mu.shape
        if eps is None:
            eps_w = sample_vmf_weight(kappa.data, dim, rng)
            tangent = _tangent(rng, (B, dim - 1))
        else:
            eps_w, tangent = eps
        m1 = dim - 1.0
        # reparameterized through b(kappa) for the accepted Beta draw
        b = m1 / (kappa * 2.0 + (kappa.square() * 4.0 + m1 * m1).sqrt())
        e = eps_w.reshape(B, 1)
        w = (1.0 - (b + 1.0) * e) / (1.0 - (1.0 - b) * e)
        rest = (maximum(1.0 - w.square(), 1e-30)).sqrt() * tangent
        zp = concat([w, rest], axis=-1)
        z = _householder(zp, mu)
        return LatentSample(z, vmf_log_density(z, mu, kappa))

    def regularizer(self, params: VMFParams, sample: LatentSample | None = None) -> Tensor:
        return vmf_kl_uniform(params.kappa, self.latent_dim).mean()

    def deterministic_code(self, params: VMFParams) -> Tensor:
        return params.mu

    @staticmethod
    def log_density(params: VMFParams, z) -> np.ndarray:
        return vmf_log_density(z, params.mu, params.kappa)

    @staticmethod
    def sample_np(params: VMFParams, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        z = sample_vmf_np(_arr(params.mu), _arr(params.kappa), n, rng)
        return z, vmf_log_density(z, params.mu, params.kappa)

    @staticmethod
    def code_np(params: VMFParams) -> np.ndarray:
        return _arr(params.mu)

    def log_prior(self, z) -> np.ndarray:
        z = _arr(z)
        return np.full(z.shape[:-1], -log_sphere_area(self.latent_dim))

    def prior_sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return _tangent(rng, (n, self.latent_dim))


FAMILIES = {"gaussian": GaussianPosterior, "flow": FlowPosterior, "vmf": VMFPosterior}


def make_posterior(family: str, in_dim: int, latent_dim: int, rng: np.random.Generator, n_flows: int = 3) -> Module:
    if family not in FAMILIES:
        raise ValueError(f"unknown posterior family {family!r}; expected one of {sorted(FAMILIES)}")
    if family == "flow":
        return FlowPosterior(in_dim, latent_dim, rng, n_flows=n_flows)
    return FAMILIES[family](in_dim, latent_dim, rng)


# -- MMD -------------------------------------------------------------------


def rq_kernel_np(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    d2 = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    return sum(s * c / (s * c + d2) for s in RQ_SCALES)


def _sq_dists(x: Tensor, y: Tensor) -> Tensor:
    xx = x.square().sum(axis=-1, keepdims=True)
    yy = y.square().sum(axis=-1, keepdims=True).transpose()
    return maximum(xx + yy - (x @ y.transpose()) * 2.0, 0.0)


def _rq(d2: Tensor, c: float) -> Tensor:
    total = None
    for s in RQ_SCALES:
        term = (d2 + s * c) ** -1.0 * (s * c)
        total = term if total is None else total + term
    return total


def mmd_rq(x, y, c: float = 1.0, unbiased: bool = True) -> Tensor:
    """Squared MMD between two equal-size sample sets under the rational-quadratic kernel sum."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    y = y if isinstance(y, Tensor) else Tensor(y)
    n = x.shape[0]
    if n < 2 or y.shape[0] != n:
        raise GraphError(f"mmd_rq needs equal sample counts n >= 2, got {x.shape[0]} and {y.shape[0]}")
    kxx = _rq(_sq_dists(x, x), c)
    kyy = _rq(_sq_dists(y, y), c)
    kxy = _rq(_sq_dists(x, y), c)
    if unbiased:
        off = 1.0 - np.eye(n)
        return ((kxx + kyy) * off).sum() * (1.0 / (n * (n - 1))) - kxy.sum() * (2.0 / (n * n))
    return (kxx.sum() + kyy.sum() - kxy.sum() * 2.0) * (1.0 / (n * n))


# -- schedules -------------------------------------------------------------


class ScheduleError(ValueError):
    pass


@dataclass
class RegSchedule:
    """Regularization weight over training steps.

    kind: ``constant`` | ``linear`` | ``cyclic``.  ``free_bits`` > 0 floors the
    regularizer at that value before weighting.
    """

    kind: str = "linear"
    beta: float = 1.0
    start: int = 200
    end: int = 4200
    cycles: int = 4
    ratio: float = 0.5
    total: int = 40000
    free_bits: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "linear", "cyclic"):
            raise ScheduleError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "linear" and self.start >= self.end:
            raise ScheduleError(f"anneal start {self.start} must precede end {self.end}")
        if self.kind == "cyclic" and (self.cycles < 1 or not 0.0 < self.ratio <= 1.0 or self.total < self.cycles):
            raise ScheduleError("cyclic schedule needs cycles >= 1, 0 < ratio <= 1, total >= cycles")
        if self.beta < 0:
            raise ScheduleError("beta must be non-negative")

    def apply(self, reg: Tensor, step: int) -> Tensor:
        """Weighted (and, with free bits, floored) regularization term."""
        if self.free_bits > 0.0:
            reg = maximum(reg, self.free_bits)
        return reg * anneal_weight(step, self)


def anneal_weight(step: int, schedule: RegSchedule) -> float:
    if step < 0:
        raise ScheduleError("step must be non-negative")
    s = schedule
    if s.kind == "constant":
        frac = 1.0
    elif s.kind == "linear":
        frac = min(1.0, max(0.0, (step - s.start) / (s.end - s.start)))
    else:
        period = s.total / s.cycles
        tau = (step % period) / period
        frac = min(1.0, tau / s.ratio)
    return s.beta * frac
