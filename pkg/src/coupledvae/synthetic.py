"""Small generated corpora with known latent structure, for smoke runs and
directional experiments.

``topic_sentences``: every sentence has a hidden topic that sets the
distribution of its content words; function words are shared by all topics,
so a left-to-right decoder only pins the topic down after a few tokens.

``dialogue_pairs``: every post has a topic and five responses, one per
topic-specific response template whose slot word is drawn from two fixed
alternatives, so the post-to-response mapping is one-to-many.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FUNCTION_WORDS = [f"f{i}" for i in range(10)]
CONTENT_WORDS = [f"w{i:02d}" for i in range(36)]


@dataclass(frozen=True)
class TopicModel:
    n_topics: int = 8
    words_per_topic: int = 8
    p_function: float = 0.35
    min_len: int = 4
    max_len: int = 12

    def topic_words(self, t: int) -> list[str]:
        start = (t * len(CONTENT_WORDS)) // self.n_topics
        return [CONTENT_WORDS[(start + j) % len(CONTENT_WORDS)] for j in range(self.words_per_topic)]

    def sentence(self, rng: np.random.Generator, topic: int | None = None) -> tuple[int, list[str]]:
        t = int(rng.integers(self.n_topics)) if topic is None else topic
        words = self.topic_words(t)
        weights = 1.0 / np.arange(1, len(words) + 1)
        weights /= weights.sum()
        n = int(rng.integers(self.min_len, self.max_len + 1))
        out = []
        for _ in range(n):
            if rng.random() < self.p_function:
                out.append(FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS)))])
            else:
                out.append(words[int(rng.choice(len(words), p=weights))])
        return t, out


def topic_sentences(n: int, seed: int, model: TopicModel = TopicModel()) -> list[str]:
    rng = np.random.default_rng(seed)
    return [" ".join(model.sentence(rng)[1]) for _ in range(n)]


def lm_splits(seed: int = 0, n_train: int = 500, n_valid: int = 100, n_test: int = 100) -> dict[str, list[str]]:
    return {
        "train": topic_sentences(n_train, seed),
        "valid": topic_sentences(n_valid, seed + 1_000_003),
        "test": topic_sentences(n_test, seed + 2_000_003),
    }


@dataclass(frozen=True)
class ResponseTemplate:
    words: tuple[str, ...]
    slot: int
    variants: tuple[str, ...]

    def fill(self, rng: np.random.Generator) -> list[str]:
        out = list(self.words)
        out[self.slot] = self.variants[int(rng.integers(len(self.variants)))]
        return out


@dataclass(frozen=True)
class DialogueModel:
    n_topics: int = 10
    n_templates: int = 5
    n_variants: int = 2
    template_len: tuple[int, int] = (4, 8)
    post_model: TopicModel = TopicModel(n_topics=10, words_per_topic=6, max_len=10)

    def templates(self, seed: int) -> list[list[ResponseTemplate]]:
        """Per topic, ``n_templates`` fixed responses, each with one slot that takes one of ``n_variants`` words."""
        rng = np.random.default_rng([seed, 99])
        vocab = FUNCTION_WORDS + CONTENT_WORDS
        out = []
        for _ in range(self.n_topics):
            rows = []
            for _ in range(self.n_templates):
                n = int(rng.integers(self.template_len[0], self.template_len[1] + 1))
                words = tuple(vocab[int(i)] for i in rng.integers(len(vocab), size=n))
                variants = tuple(vocab[int(i)] for i in rng.choice(len(vocab), self.n_variants, replace=False))
                rows.append(ResponseTemplate(words, int(rng.integers(n)), variants))
            out.append(rows)
        return out


def dialogue_pairs(n_posts: int, seed: int, template_seed: int = 0, model: DialogueModel = DialogueModel()) -> list[tuple[str, str]]:
    """Every post gets one response per template of its topic."""
    rng = np.random.default_rng(seed)
    templates = model.templates(template_seed)
    pairs = []
    for _ in range(n_posts):
        t, post = model.post_model.sentence(rng)
        for tpl in templates[t]:
            pairs.append((" ".join(post), " ".join(tpl.fill(rng))))
    return pairs


def dialogue_splits(seed: int = 0, n_train: int = 200, n_valid: int = 20, n_test: int = 100) -> dict[str, list[str]]:
    """TSV lines ``post<TAB>response``; all splits share the response templates."""

    def lines(n, s):
        return [f"{p}\t{r}" for p, r in dialogue_pairs(n, s, template_seed=seed)]

    return {
        "train": lines(n_train, seed),
        "valid": lines(n_valid, seed + 1_000_003),
        "test": lines(n_test, seed + 2_000_003),
    }
