import string

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupledvae.corpus import (
    BOS,
    EOS,
    PAD,
    UNK,
    CorpusError,
    Vocab,
    build_vocab,
    encode_batch,
    iterate_batches,
    load_pairs,
    parse_pairs,
)


class TestBuildVocab:
    def test_frequency_order(self):
        v = build_vocab(["a b a"], cap=6)
        assert v.itos == ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]
        assert (v.stoi["<pad>"], v.stoi["<bos>"], v.stoi["<eos>"], v.stoi["<unk>"]) == (PAD, BOS, EOS, UNK)

    def test_cap_drops_rare_token(self):
        v = build_vocab(["a b a"], cap=5)
        assert "b" not in v
        assert v.encode(["b"]) == [UNK]

    def test_letter_corpus_keeps_top_ten(self):
        rng = np.random.default_rng(0)
        counts = rng.permutation(np.arange(1, 27))
        line = " ".join(ch for ch, c in zip(string.ascii_lowercase, counts) for _ in range(c))
        v = build_vocab([line], cap=14)
        oracle = {ch for ch, c in zip(string.ascii_lowercase, counts) if c > 16}
        assert set(v.itos[4:]) == oracle and len(v) == 14

    def test_ties_broken_lexicographically(self):
        assert build_vocab(["c b a"], cap=10).itos[4:] == ["a", "b", "c"]

    def test_empty_stream(self):
        with pytest.raises(CorpusError):
            build_vocab([], cap=10)

    def test_save_load_round_trip(self, tmp_path):
        v = build_vocab(["x y z x"], cap=10)
        v.save(tmp_path / "vocab.txt")
        assert Vocab.load(tmp_path / "vocab.txt").itos == v.itos


class TestEncodeBatch:
    vocab = Vocab(["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"])

    def test_two_tokens(self):
        b = encode_batch(["a b"], self.vocab, max_len=8)
        np.testing.assert_array_equal(b.ids, [[4, 5, 2]])
        assert b.lengths.tolist() == [3]

    def test_empty_line_is_eos_only(self):
        b = encode_batch([""], self.vocab, max_len=8)
        np.testing.assert_array_equal(b.ids, [[EOS]])
        assert b.lengths.tolist() == [1]

    def test_mask_rows_sum_to_lengths(self):
        b = encode_batch(["a", "a b a b", "b b"], self.vocab, max_len=8)
        np.testing.assert_array_equal(b.mask.sum(axis=1), b.lengths)
        assert all(b.ids[i, b.lengths[i] - 1] == EOS for i in range(3))
        assert np.all(b.ids[b.mask == 0] == PAD)

    def test_truncation_keeps_final_eos(self):
        b = encode_batch(["a b a b a b"], self.vocab, max_len=4)
        np.testing.assert_array_equal(b.ids, [[4, 5, 4, EOS]])

    def test_rejects_tiny_max_len(self):
        with pytest.raises(CorpusError):
            encode_batch(["a"], self.vocab, max_len=1)

    @given(st.lists(st.lists(st.sampled_from(["a", "b", "zz", "q"]), max_size=8), min_size=1, max_size=5))
    def test_decode_inverts_encode(self, rows):
        b = encode_batch([" ".join(r) for r in rows], self.vocab, max_len=20)
        for row, ids in zip(rows, b.ids):
            assert self.vocab.decode(ids) == [t if t in ("a", "b") else "<unk>" for t in row]


class TestPairs:
    def test_single_pair(self):
        v = build_vocab(["hi hello"], cap=10)
        (batch,) = list(load_pairs(["hi\thello"], v, max_len=8, batch_size=4))
        np.testing.assert_array_equal(batch.post.ids, [[v.id("hi"), EOS]])
        np.testing.assert_array_equal(batch.response.ids, [[v.id("hello"), EOS]])

    def test_batch_sizes(self):
        lines = [f"p{i}\tr{i}" for i in range(10)]
        v = build_vocab([s.replace("\t", " ") for s in lines], cap=30)
        assert [len(b) for b in load_pairs(lines, v, 8, 4)] == [4, 4, 2]

    def test_same_seed_same_order(self):
        lines = [f"p{i}\tr{i}" for i in range(10)]
        v = build_vocab([s.replace("\t", " ") for s in lines], cap=30)
        first = [b.post.ids.tolist() for b in load_pairs(lines, v, 8, 3, seed=5)]
        again = [b.post.ids.tolist() for b in load_pairs(lines, v, 8, 3, seed=5)]
        assert first == again

    def test_missing_tab_reports_line(self):
        with pytest.raises(CorpusError, match="line 2"):
            parse_pairs(["a\tb", "no tab here"])


class TestBatches:
    def test_take_and_repeat(self):
        v = build_vocab(["a b c"], cap=10)
        b = encode_batch(["a b c", "a"], v, max_len=8)
        assert b.take([1]).ids.shape == (1, 2)
        r = b.repeat(3)
        assert len(r) == 6
        np.testing.assert_array_equal(r.ids[2:4], b.ids)

    def test_iterate_batches_covers_epoch(self):
        it = iterate_batches(10, 5, np.random.default_rng(0))
        seen = np.concatenate([next(it), next(it)])
        assert sorted(seen.tolist()) == list(range(10))
