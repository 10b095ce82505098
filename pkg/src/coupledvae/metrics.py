"""Probability and diversity estimators.

Models plug in through four methods (duck-typed):

* ``encode_params(data)`` - posterior parameters as arrays, one row per text,
* ``posterior`` - a family object with ``sample_np`` / ``log_density``,
* ``log_prior(data, z)`` - log p(z) (conditional models use the condition in ``data``),
* ``log_likelihood(data, z)`` - log P(x | z) per row.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import Batch, Vocab
from .posterior import take_rows

MAX_ROWS = 4096


class EstimatorError(ValueError):
    pass


# -- array-level estimators ------------------------------------------------


def importance_nll(log_prior: np.ndarray, log_lik: np.ndarray, log_q: np.ndarray) -> np.ndarray:
    """-log mean_i exp(log p(z_i) + log P(x|z_i) - log q(z_i|x)) over axis 0."""
    log_w = np.asarray(log_prior) + np.asarray(log_lik) - np.asarray(log_q)
    if np.any(np.all(np.isneginf(log_w), axis=0)):
        raise EstimatorError("all importance weights are zero for some text")
    n = log_w.shape[0]
    return -(logsumexp(log_w, axis=0) - math.log(n))


def mc_kl(log_q: np.ndarray, log_prior: np.ndarray) -> np.ndarray:
    """(1/N) sum_i log q(z_i|x) - log p(z_i) over axis 0."""
    return np.mean(np.asarray(log_q) - np.asarray(log_prior), axis=0)


# -- model-level estimators ------------------------------------------------


def _rows(data) -> int:
    return len(data)


def _sample_terms(model, data, n_samples: int, rng: np.random.Generator):
    """(log_prior, log_lik, log_q), each N x B, for z_i ~ q(z|x)."""
    params = model.encode_params(data)
    z, log_q = model.posterior.sample_np(params, n_samples, rng)
    B = _rows(data)
    log_p = np.stack([model.log_prior(data, z[i]) for i in range(n_samples)])
    log_lik = np.empty((n_samples, B))
    per_chunk = max(1, MAX_ROWS // max(B, 1))
    for start in range(0, n_samples, per_chunk):
        stop = min(n_samples, start + per_chunk)
        k = stop - start
        zz = z[start:stop].reshape(k * B, -1)
        log_lik[start:stop] = model.log_likelihood(data.repeat(k), zz).reshape(k, B)
    return log_p, log_lik, log_q


def nll_is(model, data, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Importance-sampled -log P(x) per text, with the posterior as proposal."""
    if n_samples < 1:
        raise EstimatorError("n_samples must be >= 1")
    log_p, log_lik, log_q = _sample_terms(model, data, n_samples, rng)
    return importance_nll(log_p, log_lik, log_q)


def kl_mc(model, data, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    """Monte Carlo KL(q(z|x) || p(z)) per text."""
    if n_samples < 1:
        raise EstimatorError("n_samples must be >= 1")
    params = model.encode_params(data)
    z, log_q = model.posterior.sample_np(params, n_samples, rng)
    log_p = np.stack([model.log_prior(data, z[i]) for i in range(n_samples)])
    return mc_kl(log_q, log_p)


def nll_and_kl(model, data, n_samples: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Both estimates from one shared set of posterior samples."""
    log_p, log_lik, log_q = _sample_terms(model, data, n_samples, rng)
    return importance_nll(log_p, log_lik, log_q), mc_kl(log_q, log_p)


def mi_estimate(
    family,
    params,
    n_samples: int,
    n_contrast: int,
    rng: np.random.Generator,
    include_self: bool = False,
    max_texts: int | None = None,
) -> float:
    """Mean over texts of (1/N) sum_i [log q(z_i|x) - log qhat(z_i)].

    qhat averages q(z_i|x_j) over ``n_contrast`` texts drawn without
    replacement from the other texts; x itself is skipped.  With
    ``include_self`` the contrast set is x plus ``n_contrast - 1`` others
    (the biased in-batch convention).
    """
    if n_contrast < 2:
        raise EstimatorError("need at least 2 contrast texts")
    n_texts = _param_rows(params)
    if n_texts < n_contrast + 1:
        raise EstimatorError(f"MI needs at least {n_contrast + 1} texts, got {n_texts}")
    texts = np.arange(n_texts)
    if max_texts is not None and max_texts < n_texts:
        texts = rng.choice(n_texts, size=max_texts, replace=False)
    values = []
    for i in texts:
        own = take_rows(params, [i])
        z, log_q = family.sample_np(own, n_samples, rng)  # N x 1 x Z, N x 1
        others = np.delete(np.arange(n_texts), i)
        if include_self:
            pick = np.concatenate([[i], rng.choice(others, size=n_contrast - 1, replace=False)])
        else:
            pick = rng.choice(others, size=n_contrast, replace=False)
        contrast = take_rows(params, pick)
        log_qj = family.log_density(contrast, z)  # N x M
        log_agg = logsumexp(log_qj, axis=1) - math.log(n_contrast)
        values.append(float(np.mean(log_q[:, 0] - log_agg)))
    return float(np.mean(values))


def _param_rows(params) -> int:
    first = getattr(params, "mu", None)
    if first is None:
        first = params.mu0
    return first.shape[0]


# -- BLEU and Distinct-n -----------------------------------------------------


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 2) -> list[float]:
    """Corpus BLEU-1..max_n: clipped n-gram precision, uniform weights, brevity penalty, no smoothing."""
    if len(hypotheses) != len(references):
        raise EstimatorError("hypotheses and references differ in count")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            h, r = _ngrams(hyp, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n in range(1, max_n + 1):
        if matches[n - 1] == 0 or totals[n - 1] == 0:
            scores.extend([0.0] * (max_n - n + 1))
            break
        log_sum += math.log(matches[n - 1] / totals[n - 1])
        scores.append(bp * math.exp(log_sum / n))
    return scores


def distinct_n(samples: Sequence[Sequence], n: int) -> float:
    """100 * |distinct n-grams| / |n-grams| over the whole sample set."""
    if n not in (1, 2):
        raise EstimatorError("distinct_n supports n in {1, 2}")
    if len(samples) == 0:
        raise EstimatorError("cannot score an empty sample set")
    seen = set()
    total = 0
    for s in samples:
        grams = [tuple(s[i : i + n]) for i in range(len(s) - n + 1)]
        seen.update(grams)
        total += len(grams)
    return 100.0 * len(seen) / total if total else 0.0


def recon_bleu(model, batch: Batch, vocab: Vocab, k: int, rng: np.random.Generator, max_len: int) -> tuple[float, float]:
    """Greedy reconstructions from ``k`` posterior samples per text, corpus BLEU-1/2 vs the inputs."""
    if k < 1:
        raise EstimatorError("k must be >= 1")
    params = model.encode_params(batch)
    z, _ = model.posterior.sample_np(params, k, rng)
    refs = [vocab.decode(row) for row in batch.ids]
    hyps, all_refs = [], []
    for i in range(k):
        out = model.decode_codes(z[i], max_len)
        hyps.extend(vocab.decode(row) for row in out)
        all_refs.extend(refs)
    b1, b2 = corpus_bleu(hyps, all_refs, 2)
    return b1, b2


# -- report ----------------------------------------------------------------


@dataclass
class EvalReport:
    nll: float
    kl: float
    ppl: float
    mi: float
    bleu1: float
    bleu2: float
    dist1: float
    dist2: float
    n_is: int
    m_agg: int
    n_texts: int = 0
    n_tokens: int = 0
    n_mi: int = 0
    bleu_k: int = 0
    n_gen: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def perplexity(nll_rows: np.ndarray, n_tokens: int) -> float:
    """exp(total NLL / total tokens), EOS tokens included in the count."""
    return float(math.exp(float(np.sum(nll_rows)) / n_tokens))
