import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from codesearch import corpus
from codesearch.corpus import (
    EOS,
    N_SPECIALS,
    PairExample,
    RawPair,
    SyntheticSpec,
    Vocabulary,
    build_batch_pool,
    build_vocab,
    deduplicate,
    encode_pairs,
    generate_negatives,
    generate_synthetic_corpus,
    load_pairs,
    split_pairs,
    split_task,
)


def mk_pair(nl, pl, label=1, lang="x"):
    return PairExample(tuple(nl), tuple(pl), label, lang)


class TestTokenizer:
    def test_nl_lowercased_pl_preserved(self):
        assert corpus.tokenize_nl("Add TWO numbers") == ["add", "two", "numbers"]
        assert corpus.tokenize_pl("SELECT MIN( population )") == [
            "SELECT", "MIN", "(", "population", ")",
        ]

    def test_specials_cannot_be_produced(self):
        toks = corpus.tokenize_pl("[CLS] [PAD]")
        assert "[CLS]" not in toks
        assert toks == ["[", "CLS", "]", "[", "PAD", "]"]


class TestLoadPairs:
    def test_jsonl_field_mapping(self, tmp_path):
        f = tmp_path / "pairs.jsonl"
        f.write_text(
            json.dumps({"nl": "add two numbers", "code": "def add(a,b): return a+b",
                        "lang": "python", "extra": 1}) + "\n"
        )
        pairs = load_pairs(f, "jsonl")
        assert len(pairs) == 1
        assert pairs[0] == RawPair("add two numbers", "def add(a,b): return a+b", "python", 1)

    def test_jsonl_missing_field_names_index(self, tmp_path):
        f = tmp_path / "bad.jsonl"
        f.write_text(
            json.dumps({"nl": "a", "code": "b", "lang": "x"}) + "\n"
            + json.dumps({"nl": "a", "lang": "x"}) + "\n"
        )
        with pytest.raises(ValueError, match="record 1.*'code'"):
            load_pairs(f, "jsonl")

    def test_jsonl_empty_errors(self, tmp_path):
        f = tmp_path / "empty.jsonl"
        f.write_text("")
        with pytest.raises(ValueError, match="no records"):
            load_pairs(f, "jsonl")

    def test_sql_json_selects_question_and_query(self, tmp_path):
        f = tmp_path / "sql.json"
        f.write_text(json.dumps([
            {"question": "how many cities", "query": "SELECT COUNT(*) FROM city",
             "db_id": "geo", "sql": {}},
        ]))
        pairs = load_pairs(f, "sql-json")
        assert pairs[0].nl == "how many cities"
        assert pairs[0].code == "SELECT COUNT(*) FROM city"
        assert pairs[0].label == 1

    def test_sql_json_missing_query(self, tmp_path):
        f = tmp_path / "sql.json"
        f.write_text(json.dumps([{"question": "q"}]))
        with pytest.raises(ValueError, match="record 0.*'query'"):
            load_pairs(f, "sql-json")


class TestVocabulary:
    def test_small_corpus_with_specials(self):
        pairs = [RawPair("a a b", "", "x")]
        # empty code tokenizes to nothing; use code with same tokens
        pairs = [RawPair("a a b", "a", "x")]
        vocab = build_vocab(pairs, max_size=9)
        assert vocab.size == 9
        assert set(vocab.id_to_token[N_SPECIALS:]) == {"a", "b"}

    def test_tie_broken_lexicographically(self):
        pairs = [RawPair("zeta apple", "zeta apple", "x")]
        vocab = build_vocab(pairs, max_size=N_SPECIALS + 1)
        assert vocab.id_to_token[N_SPECIALS:] == ["apple"]

    def test_frequency_cut_matches_counter_oracle(self):
        rng = np.random.default_rng(5)
        words = [f"tok{i}" for i in range(10_000)]
        reps = rng.integers(1, 6, size=len(words))
        text = " ".join(w for w, r in zip(words, reps) for _ in range(int(r)))
        pairs = [RawPair(text, "x", "l")]
        vocab = build_vocab(pairs, max_size=1024)
        assert vocab.size == 1024
        counts = Counter(corpus.tokenize_nl(text))
        counts.update(corpus.tokenize_pl("x"))
        expected = sorted(counts, key=lambda t: (-counts[t], t))[: 1024 - N_SPECIALS]
        assert vocab.id_to_token[N_SPECIALS:] == expected

    def test_min_freq_drops_rare(self):
        pairs = [RawPair("common common rare", "common", "x")]
        vocab = build_vocab(pairs, max_size=100, min_freq=2)
        assert "rare" not in vocab.token_to_id

    def test_max_size_below_specials_errors(self):
        with pytest.raises(ValueError):
            build_vocab([RawPair("a", "b", "x")], max_size=3)

    def test_unk_fallback(self):
        vocab = Vocabulary(["known"])
        assert vocab.encode_nl("known unknown") == (N_SPECIALS, corpus.UNK)

    def test_save_load_roundtrip(self, tmp_path):
        vocab = build_vocab([RawPair("a b c", "d e", "x")], max_size=20)
        vocab.save(tmp_path / "v.json")
        again = Vocabulary.load(tmp_path / "v.json")
        assert again.id_to_token == vocab.id_to_token


class TestDeduplicate:
    def test_keeps_first_occurrence(self):
        p, q = mk_pair([7], [8]), mk_pair([7], [9])
        assert deduplicate([p, p, q]) == [p, q]

    def test_empty(self):
        assert deduplicate([]) == []

    def test_planted_duplicates_set_oracle(self):
        rng = np.random.default_rng(3)
        base = [mk_pair([int(rng.integers(7, 50)) for _ in range(3)],
                        [int(rng.integers(7, 50)) for _ in range(4)], lang="l")
                for _ in range(900)]
        base = deduplicate(base)[:900]
        planted = base + [base[i] for i in rng.choice(len(base), 100)]
        order = rng.permutation(len(planted))
        shuffled = [planted[i] for i in order]
        result = deduplicate(shuffled)
        assert len(result) == len({p.key() for p in shuffled})

    @given(st.lists(st.tuples(st.integers(7, 12), st.integers(7, 12)), max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_idempotent(self, keys):
        pairs = [mk_pair([a], [b]) for a, b in keys]
        once = deduplicate(pairs)
        assert deduplicate(once) == once


class TestGenerateNegatives:
    def test_two_positives_balance(self):
        pairs = [mk_pair([7], [8]), mk_pair([9], [10])]
        out = generate_negatives(pairs, seed=0)
        assert len(out) == 4
        assert sum(p.label for p in out) == 2

    def test_negatives_never_equal_positives(self):
        rng = np.random.default_rng(1)
        pairs = [mk_pair([int(rng.integers(7, 15))], [int(rng.integers(7, 15))])
                 for _ in range(50)]
        pairs = deduplicate(pairs)
        out = generate_negatives(pairs, seed=4)
        positives = {p.key() for p in pairs}
        for p in out:
            if p.label == 0:
                assert p.key() not in positives

    def test_deterministic_replay(self):
        rng = np.random.default_rng(2)
        pairs = [mk_pair([int(x) for x in rng.integers(7, 99, 3)],
                         [int(x) for x in rng.integers(7, 99, 4)]) for _ in range(500)]
        pairs = deduplicate(pairs)
        a = generate_negatives(pairs, seed=123)
        b = generate_negatives(pairs, seed=123)
        assert a == b

    def test_exactly_half_positive_property(self):
        pairs = [mk_pair([7 + i], [100 + i]) for i in range(21)]
        out = generate_negatives(pairs, seed=9)
        assert sum(p.label for p in out) * 2 == len(out)

    def test_rejects_label_zero_input(self):
        with pytest.raises(ValueError, match="positive"):
            generate_negatives([mk_pair([7], [8], label=0), mk_pair([9], [10])], 0)

    def test_rejects_fewer_than_two_distinct(self):
        p = mk_pair([7], [8])
        with pytest.raises(ValueError, match="2 distinct"):
            generate_negatives([p, p], 0)


class TestBatchPool:
    def make_corpora(self, n_py=130, n_java=70):
        return {
            "python": [mk_pair([7 + i], [8], lang="python") for i in range(n_py)],
            "java": [mk_pair([7 + i], [9], lang="java") for i in range(n_java)],
        }

    def test_floor_division_counts(self):
        pool = build_batch_pool(self.make_corpora(), batch_size=64, seed=0)
        assert len(pool) == 2 + 1

    def test_batches_single_language(self):
        pool = build_batch_pool(self.make_corpora(), batch_size=32, seed=0)
        for batch in pool:
            assert {p.language for p in batch.pairs} == {batch.language}

    def test_language_mix_tracks_corpus_ratio(self):
        # frequency count over seeded draws from the pool
        corpora = self.make_corpora(n_py=640, n_java=320)
        pool = build_batch_pool(corpora, batch_size=32, seed=1)
        rng = np.random.default_rng(2)
        draws = Counter(pool[int(i)].language for i in rng.integers(0, len(pool), 1000))
        ratio = draws["python"] / draws["java"]
        assert 1.5 < ratio < 2.7

    def test_too_small_language_errors(self):
        with pytest.raises(ValueError, match="'java'"):
            build_batch_pool(self.make_corpora(n_java=10), batch_size=64, seed=0)


class TestSplitTask:
    def test_even_halves(self):
        batch = [mk_pair([7 + i], [8]) for i in range(64)]
        task = split_task(batch, seed=0)
        assert len(task.support) == 32 and len(task.query) == 32

    def test_odd_batch_support_gets_extra(self):
        task = split_task([mk_pair([7], [8]), mk_pair([9], [10]), mk_pair([11], [12])], 5)
        assert len(task.support) == 2 and len(task.query) == 1

    def test_disjoint_over_many_batches(self):
        rng = np.random.default_rng(8)
        for trial in range(1000):
            n = int(rng.integers(2, 9))
            batch = [mk_pair([7 + trial], [100 + i]) for i in range(n)]
            task = split_task(batch, int(rng.integers(1 << 30)))
            support = {id(p) for p in task.support}
            query = {id(p) for p in task.query}
            assert not support & query
            assert len(support) + len(query) == n

    def test_too_small_errors(self):
        with pytest.raises(ValueError):
            split_task([mk_pair([7], [8])], 0)


class TestSyntheticCorpus:
    def test_default_spec_shape(self):
        spec = SyntheticSpec.default()
        assert len(spec.source_languages()) == 2
        assert spec.target_language() == "delta"
        assert spec.capacity == 25 * 40

    def test_aligned_semantics_across_dialects(self):
        spec = SyntheticSpec.default()
        out = generate_synthetic_corpus(spec, spec.capacity, seed=0)
        assert set(out) == {"alpha", "beta", "delta"}
        nls = {lang: sorted(p.nl for p in pairs) for lang, pairs in out.items()}
        assert nls["alpha"] == nls["beta"] == nls["delta"]

    def test_same_seed_identical(self):
        spec = SyntheticSpec.default()
        a = generate_synthetic_corpus(spec, 100, seed=7)
        b = generate_synthetic_corpus(spec, 100, seed=7)
        assert a == b

    def test_no_duplicate_pairs(self):
        spec = SyntheticSpec.default()
        out = generate_synthetic_corpus(spec, 1000, seed=3)
        for pairs in out.values():
            keys = {(p.nl, p.code) for p in pairs}
            assert len(keys) == len(pairs)
            # one correct PL per NL within a language
            assert len({p.nl for p in pairs}) == len(pairs)

    def test_capacity_exceeded_errors(self):
        spec = SyntheticSpec.default()
        with pytest.raises(ValueError, match="capacity"):
            generate_synthetic_corpus(spec, spec.capacity + 1, seed=0)

    def test_flat_roundtrip(self):
        spec = SyntheticSpec.default()
        again = SyntheticSpec.from_flat(spec.to_flat())
        assert again.nl_templates == spec.nl_templates
        assert again.nouns == spec.nouns
        assert again.dialects == spec.dialects

    def test_write_and_load_jsonl(self, tmp_path):
        spec = SyntheticSpec.default()
        out = generate_synthetic_corpus(spec, 50, seed=1)
        corpus.write_pairs_jsonl(tmp_path / "alpha.jsonl", out["alpha"])
        loaded = load_pairs(tmp_path / "alpha.jsonl")
        assert loaded == out["alpha"]


class TestSplitPairs:
    def test_partition_is_exhaustive_and_disjoint(self):
        pairs = [mk_pair([7 + i], [200 + i]) for i in range(100)]
        split = split_pairs(pairs, (0.7, 0.15, 0.15), seed=0)
        assert len(split.train) == 70 and len(split.valid) == 15 and len(split.test) == 15
        keys = [p.key() for p in split.train + split.valid + split.test]
        assert len(set(keys)) == 100


class TestEncodePairs:
    def test_roundtrip_through_vocab(self):
        raw = [RawPair("find the largest", "al_max ( prices )", "alpha")]
        vocab = build_vocab(raw, max_size=64)
        enc = encode_pairs(raw, vocab)
        assert enc[0].label == 1
        assert all(t >= N_SPECIALS for t in enc[0].nl_tokens + enc[0].pl_tokens)
        assert enc[0].language == "alpha"
