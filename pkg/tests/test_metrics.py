import json
import math

import numpy as np
import pytest

from coupledvae.autodiff import Tensor
from coupledvae.metrics import (
    EstimatorError,
    EvalReport,
    corpus_bleu,
    distinct_n,
    importance_nll,
    kl_mc,
    mi_estimate,
    nll_is,
    perplexity,
)
from coupledvae.posterior import GaussianParams, GaussianPosterior, kl_gaussian, std_normal_log_density
from oracles import LinearGaussian, Observations, mi_by_quadrature, two_cluster_params


class TestImportanceSampling:
    def test_constant_weights_give_exact_value(self, rng):
        model = LinearGaussian()
        data = Observations(rng.standard_normal(6) * 2)
        np.testing.assert_allclose(nll_is(model, data, 5, rng), -model.log_marginal(data), atol=1e-10)

    def test_single_sample_is_negative_elbo(self):
        model = LinearGaussian(shift=0.3, widen=0.5)
        data = Observations([0.2, -1.0, 2.5])
        got = nll_is(model, data, 1, np.random.default_rng(7))
        z, log_q = GaussianPosterior.sample_np(model.encode_params(data), 1, np.random.default_rng(7))
        elbo = std_normal_log_density(z[0]) + model.log_likelihood(data, z[0]) - log_q[0]
        np.testing.assert_allclose(got, -elbo, rtol=1e-12)

    def test_distorted_proposal_matches_analytic_marginal(self, rng):
        model = LinearGaussian(shift=0.4, widen=0.6)
        data = Observations(rng.standard_normal(50) * 1.5)
        diff = nll_is(model, data, 1000, rng) + model.log_marginal(data)
        boot = [rng.choice(diff, diff.size).mean() for _ in range(1000)]
        assert abs(diff.mean()) < 3 * np.std(boot)

    def test_more_samples_tighten_the_bound(self):
        model = LinearGaussian(shift=0.5, widen=0.8)
        data = Observations(np.linspace(-2, 2, 20))
        gaps = [
            np.mean(nll_is(model, data, 1, np.random.default_rng(s))) - np.mean(nll_is(model, data, 100, np.random.default_rng(s)))
            for s in range(10)
        ]
        assert np.mean(gaps) >= 0.0

    def test_all_zero_weights_rejected(self):
        with pytest.raises(EstimatorError):
            importance_nll(np.zeros((3, 2)), np.full((3, 2), -np.inf), np.zeros((3, 2)))

    def test_log_mean_exp_identity(self, rng):
        w = rng.standard_normal((8, 3))
        np.testing.assert_allclose(importance_nll(w, np.zeros_like(w), np.zeros_like(w)), -np.log(np.exp(w).mean(axis=0)), rtol=1e-13)


class TestKL:
    def test_matches_closed_form(self):
        model = LinearGaussian(shift=0.8, widen=0.3)
        data = Observations([1.2])
        n = 10_000
        est = kl_mc(model, data, n, np.random.default_rng(3))[0]
        params = model.encode_params(data)
        z, log_q = GaussianPosterior.sample_np(params, n, np.random.default_rng(3))
        terms = log_q[:, 0] - std_normal_log_density(z[:, 0])
        assert est == pytest.approx(terms.mean(), rel=1e-12)
        closed = kl_gaussian(GaussianParams(Tensor(params.mu), Tensor(params.logvar))).item()
        assert abs(est - closed) < 3 * terms.std(ddof=1) / math.sqrt(n)


class TestMutualInformation:
    def test_identical_posteriors_give_zero(self, rng):
        params = GaussianParams(np.full((300, 4), 0.3), np.full((300, 4), -0.5))
        assert abs(mi_estimate(GaussianPosterior, params, 100, 256, rng, max_texts=50)) <= 0.05

    def test_two_clusters_recover_log_two(self, rng):
        params = two_cluster_params(rng)
        oracle = mi_by_quadrature(params)
        assert abs(oracle - math.log(2)) < 0.1 * math.log(2)
        est = mi_estimate(GaussianPosterior, params, 100, 256, rng, max_texts=100)
        assert abs(est - oracle) < 0.1 * oracle

    def test_counting_the_query_text_biases_down(self, rng):
        # M = n - 1: without the query text the contrast set is every other text
        params = two_cluster_params(rng, n=257)
        for seed in range(3):
            leave_out = mi_estimate(GaussianPosterior, params, 100, 256, np.random.default_rng(seed))
            with_self = mi_estimate(GaussianPosterior, params, 100, 256, np.random.default_rng(seed), include_self=True)
            assert with_self < leave_out

    def test_too_few_texts(self, rng):
        params = GaussianParams(np.zeros((10, 2)), np.zeros((10, 2)))
        with pytest.raises(EstimatorError):
            mi_estimate(GaussianPosterior, params, 5, 10, rng)


class TestBleu:
    def test_identity(self):
        hyps = [["a", "b", "c"], ["d", "e"]]
        assert corpus_bleu(hyps, hyps) == [1.0, 1.0]

    def test_no_shared_bigram(self):
        b1, b2 = corpus_bleu([["a", "b"]], [["b", "a"]])
        assert b1 == 1.0 and b2 == 0.0

    def test_hand_computed(self):
        b1, b2 = corpus_bleu([["a", "b", "c", "d"]], [["a", "b", "d", "c", "e"]])
        bp = math.exp(1 - 5 / 4)
        assert b1 == pytest.approx(bp, rel=1e-14)
        assert b2 == pytest.approx(bp * math.sqrt(1 / 3), rel=1e-14)

    def test_clipping(self):
        b1, _ = corpus_bleu([["a", "a", "a"]], [["a", "b", "c"]])
        assert b1 == pytest.approx(1 / 3)

    def test_count_mismatch(self):
        with pytest.raises(EstimatorError):
            corpus_bleu([["a"]], [])


class TestDistinct:
    def test_repeated_token(self):
        assert distinct_n([["a", "a", "b"]], 1) == pytest.approx(200 / 3)

    @pytest.mark.parametrize("k", [1, 2, 5])
    def test_identical_samples(self, k):
        assert distinct_n([["x", "y", "z"]] * k, 1) == pytest.approx(100 / k)
        assert distinct_n([["x", "y", "z"]] * k, 2) == pytest.approx(100 / k)

    def test_empty_set(self):
        with pytest.raises(EstimatorError):
            distinct_n([], 2)


class TestReport:
    def test_perplexity(self):
        assert perplexity(np.array([2.0, 4.0]), 3) == pytest.approx(math.exp(2.0))

    def test_json_round_trip(self):
        rep = EvalReport(1.0, 2.0, 3.0, 0.5, 0.4, 0.3, 50.0, 60.0, 100, 256)
        assert EvalReport(**json.loads(rep.to_json())) == rep
        assert "dist2=60.0" in rep.to_text()
