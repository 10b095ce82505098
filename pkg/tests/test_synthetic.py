from collections import Counter

from coupledvae.corpus import build_vocab
from coupledvae.synthetic import DialogueModel, dialogue_splits, lm_splits, topic_sentences


class TestTopicCorpus:
    def test_deterministic(self):
        assert topic_sentences(20, 3) == topic_sentences(20, 3)
        assert topic_sentences(20, 3) != topic_sentences(20, 4)

    def test_shape_of_default_splits(self):
        sp = lm_splits(0)
        assert [len(sp[k]) for k in ("train", "valid", "test")] == [500, 100, 100]
        assert all(4 <= len(s.split()) <= 12 for s in sp["train"])
        assert len(build_vocab(sp["train"], cap=1000)) <= 50


class TestDialogueCorpus:
    def test_five_paraphrases_per_post(self):
        lines = dialogue_splits(0)["train"]
        posts = Counter(line.split("\t")[0] for line in lines)
        assert len(lines) == 1000
        assert all(n % 5 == 0 for n in posts.values())  # a repeated post repeats its five responses

    def test_responses_follow_templates(self):
        model = DialogueModel()
        templates = [t for topic in model.templates(0) for t in topic]
        for line in dialogue_splits(0)["test"][:50]:
            words = line.split("\t")[1].split()
            assert any(
                len(words) == len(t.words)
                and words[t.slot] in t.variants
                and all(w == v for i, (w, v) in enumerate(zip(words, t.words)) if i != t.slot)
                for t in templates
            )

    def test_splits_share_templates(self):
        a, b = dialogue_splits(0), dialogue_splits(0)
        assert a == b
