"""Vocabulary building, news tokenization, and behavior parsing."""

import json
import re
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greenrec.corpus import (CLS_ID, MASK_ID, PAD_ID, SEP_ID, UNK_ID,
                             CorpusError, FieldLimits, Vocabulary,
                             build_vocabulary, load_behaviors, load_news,
                             tokenize_corpus, tokenize_news)


def write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    return path


def news_row(news_id, category="sports", title="", abstract=""):
    return {"id": news_id, "category": category, "title": title, "abstract": abstract}


class TestVocabulary:
    def test_case_folding_merges_tokens(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl", [
            news_row("n1", category="", title="Hello world"),
            news_row("n2", category="", title="hello"),
        ])
        vocab = build_vocabulary(path, min_count=1)
        assert len(vocab) == 5 + 2  # specials + {hello, world}
        assert vocab.id_for("hello") == 5  # higher frequency first
        assert vocab.id_for("world") == 6

    def test_min_count_threshold(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl", [
            news_row("n1", category="", title="a b"),
            news_row("n2", category="", title="a"),
        ])
        vocab = build_vocabulary(path, min_count=2)
        assert "a" in vocab.token_to_id
        assert "b" not in vocab.token_to_id

    def test_matches_independent_frequency_count(self, tmp_path):
        # DERIVED oracle: brute-force token frequency count over the file
        rng = np.random.default_rng(7)
        words = [f"w{i}" for i in range(40)]
        rows = []
        for i in range(60):
            title = " ".join(rng.choice(words, size=rng.integers(1, 8)))
            abstract = " ".join(rng.choice(words, size=rng.integers(0, 10)))
            rows.append(news_row(f"n{i}", category=f"c{i % 3}", title=title, abstract=abstract))
        path = write_jsonl(tmp_path / "news.jsonl", rows)

        oracle = Counter()
        for row in rows:
            for text in (row["title"], row["abstract"]):
                oracle.update(re.findall(r"\w+|[^\w\s]", text.lower()))
            oracle[row["category"].lower()] += 1
        for min_count in (1, 2, 3):
            expected = sum(1 for c in oracle.values() if c >= min_count) + 5
            assert len(build_vocabulary(path, min_count=min_count)) == expected

    def test_specials_occupy_first_five_ids(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl", [news_row("n1", title="x")])
        vocab = build_vocabulary(path, 1)
        assert (PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID) == (0, 1, 2, 3, 4)
        assert vocab.id_to_token[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
        assert len(vocab) >= 5

    def test_token_id_maps_are_exact_inverses(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl",
                           [news_row("n1", title="alpha beta gamma alpha")])
        vocab = build_vocabulary(path, 1)
        for i, tok in enumerate(vocab.id_to_token):
            assert vocab.token_to_id[tok] == i

    def test_deterministic_ordering_breaks_ties_lexicographically(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl", [news_row("n1", category="", title="pear apple")])
        vocab = build_vocabulary(path, 1)
        assert vocab.id_to_token[5:] == ["apple", "pear"]

    def test_empty_corpus_is_an_error(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl", [news_row("n1", category="", title="")])
        with pytest.raises(CorpusError, match="empty"):
            build_vocabulary(path, 1)

    def test_unreadable_file_is_an_error(self, tmp_path):
        with pytest.raises(OSError):
            build_vocabulary(tmp_path / "missing.jsonl", 1)

    def test_disk_round_trip_is_bit_exact(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl",
                           [news_row("n1", title="zeta alpha beta-gamma, delta!")])
        vocab = build_vocabulary(path, 1)
        vpath = tmp_path / "vocab.txt"
        vocab.save(vpath)
        loaded = Vocabulary.load(vpath)
        assert loaded.id_to_token == vocab.id_to_token
        loaded.save(tmp_path / "vocab2.txt")
        assert (tmp_path / "vocab2.txt").read_bytes() == vpath.read_bytes()

    @given(st.lists(st.text(alphabet="abcxyz ", min_size=1, max_size=12), min_size=1, max_size=8))
    @settings(max_examples=30, deadline=None)
    def test_round_trip_property(self, titles):
        import tempfile
        from pathlib import Path
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            rows = [news_row(f"n{i}", category="", title=t) for i, t in enumerate(titles)]
            path = write_jsonl(tmp / "news.jsonl", rows)
            try:
                vocab = build_vocabulary(path, 1)
            except CorpusError:
                return  # all-whitespace corpus
            vocab.save(tmp / "v.txt")
            assert Vocabulary.load(tmp / "v.txt").id_to_token == vocab.id_to_token


class TestTokenizeNews:
    @pytest.fixture
    def vocab(self, tmp_path):
        path = write_jsonl(tmp_path / "news.jsonl", [
            news_row("n1", category="sports", title="alpha beta gamma delta",
                     abstract="epsilon zeta"),
        ])
        return build_vocabulary(path, 1)

    def test_oov_maps_to_unk(self, vocab):
        art = tokenize_news(news_row("n", title="unknownword"), vocab, FieldLimits())
        assert art.title_tokens == (UNK_ID,)

    def test_truncation_keeps_prefix(self, vocab):
        raw = news_row("n", title=" ".join(["alpha"] * 40))
        art = tokenize_news(raw, vocab, FieldLimits(title=20))
        assert len(art.title_tokens) == 20
        assert set(art.title_tokens) == {vocab.id_for("alpha")}

    def test_empty_abstract_allowed(self, vocab):
        art = tokenize_news(news_row("n", title="alpha", abstract=""), vocab, FieldLimits())
        assert art.abstract_tokens == ()

    def test_category_is_single_atomic_token(self, vocab):
        art = tokenize_news(news_row("n", category="sports", title="alpha"),
                            vocab, FieldLimits())
        assert art.category_tokens == (vocab.id_for("sports"),)

    def test_missing_field_names_the_field(self, vocab):
        raw = {"id": "n", "category": "c", "title": "t"}
        with pytest.raises(CorpusError, match="abstract"):
            tokenize_news(raw, vocab, FieldLimits())

    def test_no_field_token_is_structural_special(self, vocab):
        art = tokenize_news(news_row("n", title="alpha . beta!", abstract="zeta"),
                            vocab, FieldLimits())
        for seq in art.fields():
            assert not any(t in (CLS_ID, SEP_ID, MASK_ID) for t in seq)

    def test_determinism(self, vocab):
        raw = news_row("n", title="Alpha, beta; GAMMA", abstract="zeta zeta")
        a = tokenize_news(raw, vocab, FieldLimits())
        b = tokenize_news(raw, vocab, FieldLimits())
        assert a == b


class TestLoadBehaviors:
    @pytest.fixture
    def corpus(self, tmp_path):
        rows = [news_row(f"n{i}", title=f"token{i}") for i in range(1, 6)]
        path = write_jsonl(tmp_path / "news.jsonl", rows)
        vocab = build_vocabulary(path, 1)
        return tokenize_corpus(rows, vocab, FieldLimits())

    def write_behaviors(self, tmp_path, lines):
        path = tmp_path / "behaviors.tsv"
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        return path

    def test_basic_row_parses(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, ["1\tu1\ttime\tn1 n2\tn3-1 n4-0"])
        load = load_behaviors(path, corpus)
        rec = load.records[0]
        assert rec.history == ("n1", "n2")
        assert rec.candidates == (("n3", 1), ("n4", 0))

    def test_empty_history_kept(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, ["1\tu1\ttime\t\tn3-1"])
        load = load_behaviors(path, corpus)
        assert load.records[0].history == ()
        assert len(load.records) == 1

    def test_unknown_id_drops_record_and_counts(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, [
            "1\tu1\ttime\tn1\tn2-1",
            "2\tu2\ttime\tn1\tn999-1",
            "3\tu3\ttime\tn2\tn3-0 n4-1",
        ])
        load = load_behaviors(path, corpus)
        assert len(load.records) == 2
        assert load.dropped == 1

    def test_prune_policy_removes_unknown_ids(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, ["1\tu1\ttime\tn1 n999\tn2-1 n888-0"])
        load = load_behaviors(path, corpus, unknown_policy="prune")
        assert load.records[0].history == ("n1",)
        assert load.records[0].candidates == (("n2", 1),)

    def test_error_policy_raises(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, ["1\tu1\ttime\tn999\tn2-1"])
        with pytest.raises(CorpusError, match="n999"):
            load_behaviors(path, corpus, unknown_policy="error")

    def test_history_truncated_to_most_recent(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, ["1\tu1\ttime\tn1 n2 n3 n4 n5\tn1-1"])
        load = load_behaviors(path, corpus, max_history=2)
        assert load.records[0].history == ("n4", "n5")

    def test_records_carry_source_row_index(self, tmp_path, corpus):
        path = self.write_behaviors(tmp_path, [
            "1\tu1\ttime\tn1\tn2-1", "2\tu2\ttime\tn1\tn3-0 n2-1"])
        load = load_behaviors(path, corpus)
        assert [r.row_index for r in load.records] == [0, 1]

    def test_ids_with_hyphens_parse(self, tmp_path, tmp_path_factory):
        rows = [news_row("a-b", title="x"), news_row("n1", title="y")]
        vpath = write_jsonl(tmp_path / "news.jsonl", rows)
        corpus = tokenize_corpus(rows, build_vocabulary(vpath, 1), FieldLimits())
        path = self.write_behaviors(tmp_path, ["1\tu1\ttime\tn1\ta-b-1"])
        load = load_behaviors(path, corpus)
        assert load.records[0].candidates == (("a-b", 1),)


class TestLoadNewsTsv:
    def test_mind_layout_columns(self, tmp_path):
        path = tmp_path / "news.tsv"
        path.write_text("n1\tsports\tsoccer\tBig Match\tA long story\turl\te1\te2\n",
                        encoding="utf-8")
        rows = load_news(path)
        assert rows == [{"id": "n1", "category": "sports",
                         "title": "Big Match", "abstract": "A long story"}]

    def test_short_row_rejected(self, tmp_path):
        path = tmp_path / "news.tsv"
        path.write_text("n1\tsports\tsoccer\n", encoding="utf-8")
        with pytest.raises(CorpusError, match="columns"):
            load_news(path)

    def test_duplicate_ids_rejected_in_corpus(self, tmp_path):
        rows = [news_row("n1", title="a"), news_row("n1", title="b")]
        path = write_jsonl(tmp_path / "news.jsonl", rows)
        vocab = build_vocabulary(path, 1)
        with pytest.raises(CorpusError, match="n1"):
            tokenize_corpus(rows, vocab, FieldLimits())
