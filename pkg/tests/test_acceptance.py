"""Acceptance gate: one PASS/FAIL line per criterion, also summarized at the end of the run.

Criteria 7-9 train real models on the synthetic corpora (about an hour on one
CPU when nothing is cached; see ``experiments.py``).
"""

import math
import time

import numpy as np
import pytest
from conftest import record_criterion
from experiments import dialogue_run, lm_config, lm_data, lm_run
from gradcheck import numeric_grad
from oracles import LinearGaussian, Observations, mi_by_quadrature, two_cluster_params
from toys import VOCAB, tiny_batch

from coupledvae import checkpoint as ckpt_io
from coupledvae.autodiff import (
    Tensor,
    backward,
    concat,
    embedding,
    l2_norm,
    log_bessel_i,
    log_softmax,
    maximum,
    softmax,
    stack,
)
from coupledvae.checkpoint import Checkpoint
from coupledvae.cli import main
from coupledvae.coupling import CoupledModel, match_loss
from coupledvae.metrics import kl_mc, mi_estimate, nll_is
from coupledvae.nn import Linear
from coupledvae.posterior import (
    FlowPosterior,
    GaussianParams,
    GaussianPosterior,
    PlanarLayer,
    VMFPosterior,
    bessel_ratio,
    kl_gaussian,
    mmd_rq,
    planar_apply,
    planar_u_hat,
    sample_vmf_np,
    std_normal_log_density,
    vmf_log_density,
)
from coupledvae.seqmodel import GRU, Decoder, Encoder, gru_step
from coupledvae.training import train

SEEDS = (0, 1, 2)


def fd_error(loss_fn, tensors) -> float:
    """Largest norm-wise relative error between backprop and central differences (eps = 1e-5)."""
    for t in tensors:
        t.grad = None
    backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numeric_grad(lambda: loss_fn().item(), t.data)
        scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    return worst


def leaf(rng, *shape, positive=False):
    data = rng.uniform(0.5, 2.0, shape) if positive else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


# -- 1 -------------------------------------------------------------------------


def gradient_checks(rng) -> dict[str, float]:
    errs = {}
    x, p = leaf(rng, 4, 5), leaf(rng, 4, 5, positive=True)
    unary = {
        "tanh": lambda: x.tanh(), "sigmoid": lambda: x.sigmoid(), "exp": lambda: x.exp(), "log": lambda: p.log(),
        "sqrt": lambda: p.sqrt(), "square": lambda: x.square(), "softplus": lambda: x.softplus(), "pow": lambda: p**-1.5,
        "div": lambda: x / p, "softmax": lambda: softmax(x, axis=-1), "log_softmax": lambda: log_softmax(x, axis=0),
        "l2_norm": lambda: l2_norm(x, axis=-1), "maximum": lambda: maximum(x, 0.1), "mean": lambda: x.mean(axis=0) * x.mean(),
        "index": lambda: x[np.array([0, 0, 3]), np.array([1, 1, 4])].exp(), "reshape": lambda: x.reshape(5, 4).transpose(1, 0),
        "broadcast": lambda: x[:1].broadcast_to((6, 5)).tanh(),
    }
    for name, f in unary.items():
        tensors = [p] if name in ("log", "sqrt", "pow") else ([x, p] if name == "div" else [x])
        errs[name] = fd_error(lambda: (f() * Tensor(rng_fixed(f().shape))).sum(), tensors)
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 5)
    errs["matmul"] = fd_error(lambda: ((a @ b).tanh()).sum(), [a, b])
    errs["concat_stack"] = fd_error(lambda: (concat([a, a.square()], axis=1) * 0.5).tanh().sum() + stack([a, a], 0).exp().sum(), [a])
    table = leaf(rng, 6, 4)
    errs["embedding"] = fd_error(lambda: embedding(table, np.array([[0, 2], [2, 5]])).tanh().sum(), [table])
    k = Tensor(np.array([0.4, 3.0, 30.0]), requires_grad=True)
    errs["log_bessel"] = fd_error(lambda: log_bessel_i(3.0, k).sum(), [k])

    gru = GRU(4, 5, rng)
    xs, h0 = leaf(rng, 2, 4), leaf(rng, 2, 5)
    seed = Tensor(rng.standard_normal((2, 5)))
    errs["gru_step"] = fd_error(lambda: (gru_step(xs, h0, gru) * seed).sum(), gru.weights() + [xs, h0])

    V = len(VOCAB)
    enc, sig, dec = Encoder(V, 4, 6, rng), Linear(6, 6, rng), Decoder(V, 4, 6, 6, rng)
    seq_params = enc.parameters() + sig.parameters() + dec.parameters()
    for q in seq_params:  # at the default init, encoder adjoints (~1e-7) sit below difference roundoff
        q.data[...] = rng.standard_normal(q.shape) * 0.4
    batch = tiny_batch([0, 3])
    errs["rec_loss"] = fd_error(lambda: dec.teacher_forced(batch, sig(enc(batch))).rec_loss, seq_params)

    e = Tensor(rng.standard_normal((3, 6)))
    gauss = GaussianPosterior(6, 4, rng)
    errs["reg_gaussian"] = fd_error(lambda: gauss.regularizer(gauss(e)), gauss.parameters())
    flow = FlowPosterior(6, 4, rng)
    eps = rng.standard_normal((3, 4))

    def flow_reg():
        q = flow(e)
        return flow.regularizer(q, flow.sample(q, rng, eps=eps))

    errs["reg_flow"] = fd_error(flow_reg, flow.parameters())
    vmf = VMFPosterior(6, 4, rng)
    errs["reg_vmf"] = fd_error(lambda: vmf.regularizer(vmf(e)), vmf.parameters())
    zx, zy = leaf(rng, 4, 4), Tensor(rng.standard_normal((4, 4)))
    errs["reg_mmd"] = fd_error(lambda: mmd_rq(zx, zy, 8.0), [zx])

    h, hc = leaf(rng, 3, 5), Tensor(rng.standard_normal((3, 5)))
    errs["match_rq"] = fd_error(lambda: match_loss(h, hc, "rq", 1.0), [h])
    errs["match_eucl"] = fd_error(lambda: match_loss(h, hc, "eucl"), [h])
    return errs


def rng_fixed(shape):
    return np.random.default_rng(77).standard_normal(shape)


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    errs = gradient_checks(np.random.default_rng(0))
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = errs[worst] <= 1e-4 and elapsed < 60
    record_criterion(1, ok, f"{len(errs)} finite-difference checks, worst {worst} rel err {errs[worst]:.1e} (<= 1e-4), {elapsed:.1f}s (< 60s)")
    assert ok, errs


# -- 2, 3 ----------------------------------------------------------------------


def test_criterion_02_loss_identity():
    vocab, train_data, _ = lm_data()
    cfg = lm_config("coupled", 3.0, 0).replace(steps=500, lambda_r=0.7)
    residuals = []
    train(cfg, train_data, None, vocab_size=len(vocab), on_step=lambda s, losses: residuals.append(losses.identity_residual()))
    worst = max(residuals)
    ok = len(residuals) == 500 and worst <= 1e-12
    record_criterion(2, ok, f"max |total - sum of terms| over {len(residuals)} logged steps = {worst:.1e} (<= 1e-12)")
    assert ok


def test_criterion_03_detach():
    vocab, train_data, _ = lm_data()
    worst = {}
    for kind in ("eucl", "rq"):
        cfg = lm_config("coupled", 10.0, 0).replace(steps=100, match_kind=kind, debug=True)
        history = train(cfg, train_data, None, vocab_size=len(vocab)).history
        worst[kind] = max(h.match_hc_adjoint for h in history)
    ok = all(v == 0.0 for v in worst.values())
    record_criterion(3, ok, f"max |adjoint of h_c from lambda_m * match| over 100 debug steps: eucl {worst['eucl']!r}, rq {worst['rq']!r}")
    assert ok


# -- 4 -------------------------------------------------------------------------


def test_criterion_04_rq_values():
    h = Tensor(np.random.default_rng(0).standard_normal((4, 6)))
    same = match_loss(h, h, "rq", 1.0).item()
    unit = match_loss(Tensor([[1.0, 0.0]]), Tensor([[0.0, 0.0]]), "rq", 1.0).item()
    ok = same == -7.0 and abs(unit + 3.5) <= 1e-12
    record_criterion(4, ok, f"match(h, h) = {same!r} (exactly -7); |d|^2 = 1 -> {unit!r} (-3.5 within 1e-12)")
    assert ok


# -- 5 -------------------------------------------------------------------------


def test_criterion_05_estimators():
    t0 = time.perf_counter()
    checks = {}

    model = LinearGaussian(shift=0.8, widen=0.3)
    data = Observations([1.2])
    n = 10_000
    params = model.encode_params(data)
    z, log_q = GaussianPosterior.sample_np(params, n, np.random.default_rng(3))
    terms = log_q[:, 0] - std_normal_log_density(z[:, 0])
    est = kl_mc(model, data, n, np.random.default_rng(3))[0]
    closed = kl_gaussian(GaussianParams(Tensor(params.mu), Tensor(params.logvar))).item()
    se = terms.std(ddof=1) / math.sqrt(n)
    checks["kl_mc"] = (abs(est - closed) < 3 * se, f"|{est:.4f} - {closed:.4f}| < 3 SE ({3 * se:.4f})")

    rng = np.random.default_rng(5)
    model = LinearGaussian(shift=0.4, widen=0.6)
    data = Observations(rng.standard_normal(50) * 1.5)
    diff = nll_is(model, data, 1000, rng) + model.log_marginal(data)
    boot_se = np.std([rng.choice(diff, diff.size).mean() for _ in range(1000)])
    checks["nll_is"] = (abs(diff.mean()) < 3 * boot_se, f"bias {diff.mean():+.4f} < 3 bootstrap SE ({3 * boot_se:.4f})")

    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(100):
        w = Tensor(rng.standard_normal((1, 2)))
        layer = PlanarLayer(planar_u_hat(Tensor(rng.standard_normal((1, 2))), w), w, Tensor(rng.standard_normal((1, 1))))
        z0 = rng.standard_normal(2)
        f = lambda v: planar_apply(Tensor(v[None]), [layer])[0].data[0]
        jac = np.stack([(f(z0 + d) - f(z0 - d)) / 2e-6 for d in np.eye(2) * 1e-6], axis=1)
        logdet = planar_apply(Tensor(z0[None]), [layer])[1].data[0]
        worst = max(worst, abs(logdet - math.log(abs(np.linalg.det(jac)))))
    checks["planar_logdet"] = (worst <= 1e-5, f"max |log-det error| over 100 points {worst:.1e}")

    rng = np.random.default_rng(11)
    mu = rng.standard_normal((1, 8))
    mu /= np.linalg.norm(mu)
    samples = sample_vmf_np(mu, np.array([[50.0]]), 100_000, rng)[:, 0]
    ratio = np.linalg.norm(samples.mean(axis=0)) / bessel_ratio(50.0, 8)
    checks["vmf_resultant"] = (abs(ratio - 1) < 0.01, f"mean resultant / Bessel ratio = {ratio:.4f}")

    pts = rng.standard_normal((200_000, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    mu3 = np.repeat([[0.0, 0.6, 0.8]], len(pts), 0)
    mass = float(np.mean(np.exp(vmf_log_density(pts, mu3, np.full((len(pts), 1), 2.0)))) * 4 * math.pi)
    checks["vmf_mass"] = (abs(mass - 1) < 0.02, f"MC mass {mass:.4f}")

    elapsed = time.perf_counter() - t0
    ok = all(v[0] for v in checks.values()) and elapsed < 300
    detail = "; ".join(f"{k}: {v[1]}" for k, v in checks.items())
    record_criterion(5, ok, f"{detail}; {elapsed:.0f}s (< 300s)")
    assert ok, checks


# -- 6 -------------------------------------------------------------------------


def test_criterion_06_mutual_information():
    rng = np.random.default_rng(13)
    flat = GaussianParams(np.full((300, 4), 0.3), np.full((300, 4), -0.5))
    mi_flat = mi_estimate(GaussianPosterior, flat, 100, 256, rng, max_texts=50)

    clusters = two_cluster_params(rng)
    oracle = mi_by_quadrature(clusters)
    mi_two = mi_estimate(GaussianPosterior, clusters, 100, 256, rng, max_texts=100)

    tight = two_cluster_params(rng, n=257)
    gaps = []
    for seed in SEEDS:
        leave_out = mi_estimate(GaussianPosterior, tight, 100, 256, np.random.default_rng(seed))
        with_self = mi_estimate(GaussianPosterior, tight, 100, 256, np.random.default_rng(seed), include_self=True)
        gaps.append(leave_out - with_self)

    ok_flat = abs(mi_flat) <= 0.05
    ok_two = abs(mi_two - oracle) < 0.1 * oracle and abs(oracle - math.log(2)) < 0.1 * math.log(2)
    ok_bias = all(g > 0 for g in gaps)
    record_criterion(
        6,
        ok_flat and ok_two and ok_bias,
        f"independent |MI| {abs(mi_flat):.3f} (<= 0.05); two clusters {mi_two:.4f} vs quadrature {oracle:.4f} (ln 2 = {math.log(2):.4f}); "
        f"counting the query text lowers the estimate by {', '.join(f'{g:.4f}' for g in gaps)}",
    )
    assert ok_flat and ok_two and ok_bias


# -- 7, 8, 9 -----------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_07_training_dynamics():
    per_seed, notes = [], []
    for seed in SEEDS:
        vae, coupled, dae = lm_run("vae", 1.0, seed), lm_run("coupled", 10.0, seed), lm_run("dae", 1.0, seed)
        checks = (
            coupled["kl"] > vae["kl"],
            coupled["dh_de_norm"] > vae["dh_de_norm"],
            coupled["d_reg_de"] > vae["d_reg_de"],
            dae["d_rec_de"] > vae["d_rec_de"],
        )
        per_seed.append(checks)
        notes.append(
            f"seed {seed}: KL {coupled['kl']:.2f}>{vae['kl']:.2f} dh/de {coupled['dh_de_norm']:.3f}>{vae['dh_de_norm']:.3f} "
            f"dreg {coupled['d_reg_de']:.2f}>{vae['d_reg_de']:.2f} drec(dae) {dae['d_rec_de']:.2f}>{vae['d_rec_de']:.2f} {''.join('+' if c else '-' for c in checks)}"
        )
    wins = [sum(c[i] for c in per_seed) for i in range(4)]
    ok = all(w >= 2 for w in wins)
    record_criterion(7, ok, f"seeds satisfying (a)-(d): {wins} of 3 | " + " | ".join(notes))
    assert ok


@pytest.mark.slow
def test_criterion_08_lambda_m_monotone():
    lambdas = (0.1, 1.0, 5.0)
    good, notes = 0, []
    for seed in SEEDS:
        runs = [lm_run("coupled", lm, seed) for lm in lambdas]
        kl, mi = [r["kl"] for r in runs], [r["mi"] for r in runs]
        mono = all(a <= b for a, b in zip(kl, kl[1:])) and all(a <= b for a, b in zip(mi, mi[1:]))
        good += mono
        notes.append(f"seed {seed}: KL {'/'.join(f'{v:.2f}' for v in kl)} MI {'/'.join(f'{v:.2f}' for v in mi)} {'+' if mono else '-'}")
    ok = good >= 2
    record_criterion(8, ok, f"KL and MI non-decreasing over lambda_m {lambdas} in {good} of 3 seeds | " + " | ".join(notes))
    assert ok


@pytest.mark.slow
def test_criterion_09_dialogue_diversity():
    lambdas = (0.1, 0.5, 1.0, 2.0)
    good, notes = 0, []
    for seed in SEEDS:
        base = dialogue_run("vae", 1.0, seed)
        runs = [dialogue_run("coupled", lm, seed) for lm in lambdas]
        d2 = [r["dist2"] for r in runs]
        worst_ppl = max(r["ppl"] for r in runs) / base["ppl"] - 1
        mono = all(a <= b for a, b in zip(d2, d2[1:]))
        good += mono and worst_ppl < 0.10
        single = "/".join(f"{r['dist2_single']:.1f}" for r in runs)
        notes.append(
            f"seed {seed}: Dist-2 {'/'.join(f'{v:.2f}' for v in d2)} (CVAE {base['dist2']:.2f}; one per post "
            f"{single} vs {base['dist2_single']:.1f}), "
            f"worst PPL change {worst_ppl:+.1%} {'+' if mono and worst_ppl < 0.10 else '-'}"
        )
    ok = good >= 2
    record_criterion(9, ok, f"Dist-2 non-decreasing over lambda_m {lambdas} with PPL within 10% in {good} of 3 seeds | " + " | ".join(notes))
    assert ok


# -- 10 ------------------------------------------------------------------------

PLUMBING_CONFIG = """
emb_dim = 8
hidden_dim = 12
latent_dim = 4
steps = 60
batch_size = 16
valid_every = 20
valid_samples = 5
anneal_start = 0
anneal_end = 40
decay_start = 0
eval_samples = 8
mi_samples = 10
mi_contrast = 32
bleu_samples = 2
sample_count = 50
gen_len = 14
"""


def test_criterion_10_plumbing(tmp_path):
    rng = np.random.default_rng(0)
    model = CoupledModel(lm_config("coupled", 1.0, 0).replace(family="flow"), 50, rng)
    ckpt_io.save(tmp_path / "m.ckpt", Checkpoint(model.cfg, model.state_dict(), [f"t{i}" for i in range(50)], 5))
    back = ckpt_io.load(tmp_path / "m.ckpt").state
    exact = all(np.array_equal(back[k], v.astype(np.float32).astype(np.float64)) for k, v in model.state_dict().items())

    assert main(["prepare-data", "--synthetic", "lm", "--out", str(tmp_path / "data"), "--vocab-cap", "50", "--max-len", "13"]) == 0
    cfg = tmp_path / "data" / "small.txt"
    cfg.write_text((tmp_path / "data" / "config.txt").read_text() + PLUMBING_CONFIG)
    same = True
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["train", "--config", str(cfg), "--out", str(d / "train")]) == 0
        assert main(["eval", "--checkpoint", str(d / "train" / "final.ckpt"), "--out", str(d / "eval")]) == 0
        assert main(["sample", "--checkpoint", str(d / "train" / "final.ckpt"), "--out", str(d / "sample")]) == 0
    files = ["train/final.ckpt", "train/best.ckpt", "train/train_log.csv", "eval/report.json", "sample/samples.txt"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    ck = ckpt_io.load(tmp_path / "a" / "train" / "final.ckpt")
    trained = CoupledModel(ck.config, len(ck.vocab), np.random.default_rng(0))
    trained.load_state_dict(ck.state)
    _, _, test = lm_data()
    one = np.mean([np.mean(nll_is(trained, test, 1, np.random.default_rng(s))) for s in range(10)])
    hundred = np.mean([np.mean(nll_is(trained, test, 100, np.random.default_rng(s))) for s in range(10)])

    ok = exact and same and hundred <= one
    record_criterion(
        10,
        ok,
        f"f32 round trip bit-exact: {exact}; train/eval/sample reruns byte-identical: {same}; "
        f"mean nll_is N=100 {hundred:.4f} <= N=1 {one:.4f} over 10 seeds",
    )
    assert ok
