"""Vocabulary, padded batches, and post/response pair loading."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


class CorpusError(ValueError):
    pass


class Vocab:
    """Token/id mapping with the four specials pinned to ids 0-3."""

    def __init__(self, tokens: Sequence[str]):
        self.itos: list[str] = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def size(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        """Map ids back to tokens; stops at EOS and drops PAD/BOS when ``strip``."""
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for tok in self.itos:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        if tokens[:4] != list(SPECIALS):
            raise CorpusError(f"{path}: vocabulary must start with {SPECIALS}")
        return cls(tokens[4:])


def tokenize(line: str, lowercase: bool = False) -> list[str]:
    if lowercase:
        line = line.lower()
    return line.split()


def build_vocab(lines: Iterable[str], cap: int, lowercase: bool = False) -> Vocab:
    """Keep the ``cap - 4`` most frequent tokens; ties go to the lexicographically smaller."""
    if cap < len(SPECIALS):
        raise CorpusError(f"vocabulary cap {cap} cannot hold the {len(SPECIALS)} specials")
    counts: Counter[str] = Counter()
    n_lines = 0
    for line in lines:
        n_lines += 1
        counts.update(tokenize(line, lowercase))
    if n_lines == 0:
        raise CorpusError("cannot build a vocabulary from an empty stream")
    for tok in SPECIALS:
        counts.pop(tok, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab([tok for tok, _ in ranked[: cap - len(SPECIALS)]])


@dataclass
class Batch:
    """B x T ids (PAD-filled), matching 0/1 mask, and per-row lengths incl. EOS."""

    ids: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.ids.shape[1]

    def take(self, rows) -> "Batch":
        rows = np.asarray(rows)
        lengths = self.lengths[rows]
        width = int(lengths.max()) if lengths.size else 1
        return Batch(self.ids[rows, :width], self.mask[rows, :width], lengths)

    def repeat(self, n: int) -> "Batch":
        """Tile every row ``n`` times (sample-major: rows of copy k are contiguous)."""
        return Batch(np.tile(self.ids, (n, 1)), np.tile(self.mask, (n, 1)), np.tile(self.lengths, n))


@dataclass
class PairBatch:
    post: Batch
    response: Batch

    def __post_init__(self):
        if len(self.post) != len(self.response):
            raise CorpusError(f"post/response row counts differ: {len(self.post)} vs {len(self.response)}")

    def __len__(self) -> int:
        return len(self.response)

    def take(self, rows) -> "PairBatch":
        return PairBatch(self.post.take(rows), self.response.take(rows))

    def repeat(self, n: int) -> "PairBatch":
        return PairBatch(self.post.repeat(n), self.response.repeat(n))


def encode_batch(lines: Sequence[str] | Sequence[list[str]], vocab: Vocab, max_len: int, lowercase: bool = False) -> Batch:
    """Encode each line as ``tokens + [EOS]``, truncated to ``max_len`` with EOS kept last."""
    if max_len < 2:
        raise CorpusError("max_len must be at least 2")
    rows = []
    for line in lines:
        toks = tokenize(line, lowercase) if isinstance(line, str) else list(line)
        ids = vocab.encode(toks)[: max_len - 1] + [EOS]
        rows.append(ids)
    width = max((len(r) for r in rows), default=1)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    lengths = np.zeros(len(rows), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = r
        lengths[i] = len(r)
    mask = (np.arange(width)[None, :] < lengths[:, None]).astype(np.float64)
    return Batch(ids, mask, lengths)


def decode_batch(ids: np.ndarray, vocab: Vocab) -> list[str]:
    return [" ".join(vocab.decode(row)) for row in ids]


def read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def parse_pairs(lines: Iterable[str]) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        if "\t" not in line:
            raise CorpusError(f"line {lineno}: expected 'post<TAB>response'")
        post, response = line.split("\t", 1)
        pairs.append((post, response))
    return pairs


def load_pairs(
    lines: Iterable[str],
    vocab: Vocab,
    max_len: int,
    batch_size: int,
    seed: int | None = None,
) -> Iterator[PairBatch]:
    """Yield aligned pair batches; rows are shuffled with ``seed`` when given."""
    pairs = parse_pairs(lines)
    order = np.arange(len(pairs))
    if seed is not None:
        np.random.default_rng(seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        chunk = [pairs[i] for i in order[start : start + batch_size]]
        yield PairBatch(
            encode_batch([p for p, _ in chunk], vocab, max_len),
            encode_batch([r for _, r in chunk], vocab, max_len),
        )


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of shuffled row-index minibatches (reshuffled every epoch)."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield order[start : start + batch_size]
