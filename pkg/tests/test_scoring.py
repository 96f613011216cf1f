import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlmbias.conformance import UniformScorer
from mlmbias.corpus import Language, apply_masking, build_corpus
from mlmbias.errors import (
    EmptyBatch,
    NonPositiveProbability,
    PositionNotMasked,
    ScoringError,
    TokenNotInVocabulary,
)
from mlmbias.scoring import (
    ModelState,
    association,
    encode_batch,
    fixed_length,
    read_records,
    score_corpus,
    target_probability,
    write_records,
)


class TestFixedLength:
    @pytest.mark.parametrize("max_len,expected", [
        (12, 16), (16, 16), (17, 32), (1, 1), (2, 2), (3, 4), (1024, 1024),
    ])
    def test_boundaries(self, max_len, expected):
        assert fixed_length([[0] * max_len, [0] * max(1, max_len - 1)]) == expected

    def test_empty_batch(self):
        with pytest.raises(EmptyBatch):
            fixed_length([])

    @given(st.lists(st.integers(min_value=0, max_value=600), min_size=1, max_size=20))
    def test_power_of_two_at_least_max(self, lengths):
        n = fixed_length([[0] * k for k in lengths])
        assert n >= max(lengths)
        assert n & (n - 1) == 0 and n >= 1
        if n > 1:
            assert n // 2 < max(lengths)


class TestEncodeBatch:
    def test_padding_and_attention(self):
        scorer = UniformScorer(["a", "b", "c"])
        batch = encode_batch(["a b", "a b c"], scorer)
        assert batch.ids.shape == (2, 4)
        assert batch.attention_mask.tolist() == [[1, 1, 0, 0], [1, 1, 1, 0]]
        assert (batch.ids[0, 2:] == scorer.pad_token_id).all()

    def test_empty_sentence_list(self):
        with pytest.raises(EmptyBatch):
            encode_batch([], UniformScorer(["a"]))

    def test_becpro_mask_sums_match_independent_token_count(self):
        # Oracle: recount tokens with a separate regex tokenizer.
        import re
        word_re = re.compile(r"\[MASK\]|\w+|[^\w\s]")
        instances = build_corpus(Language.EN)[:300]
        vocab = sorted({w for i in instances
                        for w in word_re.findall(i.sentence.lower())})
        scorer = UniformScorer(vocab)
        sentences = [i.variant_both_masked for i in instances]
        batch = encode_batch(sentences, scorer)
        for row, sentence in enumerate(sentences):
            expected = len(word_re.findall(sentence))
            assert int(batch.attention_mask[row].sum()) == expected

    def test_mask_positions_found(self):
        scorer = UniformScorer(["she", "is", "a", "nurse", "."])
        batch = encode_batch(["[MASK] is a nurse ."], scorer)
        assert batch.mask_positions[0] == [0]

    def test_tokenizer_failure_wrapped(self):
        from mlmbias.errors import TokenizationFailure

        class Exploding(UniformScorer):
            def tokenize(self, text):
                raise RuntimeError("boom")

        with pytest.raises(TokenizationFailure):
            encode_batch(["anything"], Exploding(["a"]))


class TestTargetProbability:
    def test_uniform_scorer_gives_one_over_v(self):
        scorer = UniformScorer(["she", "is", "a", "nurse", "."])
        p, clamped = target_probability(scorer, "[MASK] is a nurse.", "she")
        assert p == pytest.approx(1.0 / scorer.vocab_size)
        assert not clamped

    def test_token_not_in_vocabulary(self):
        scorer = UniformScorer(["she", "is"])
        with pytest.raises(TokenNotInVocabulary):
            target_probability(scorer, "[MASK] is", "zzzunknown")

    def test_position_must_be_masked(self):
        scorer = UniformScorer(["she", "is"])
        with pytest.raises(PositionNotMasked):
            target_probability(scorer, "she is", "she")
        with pytest.raises(PositionNotMasked):
            target_probability(scorer, "[MASK] is", "she", position=1)


class TestAssociation:
    def test_identity_zero(self):
        assert association(0.5, 0.5) == 0.0

    def test_ln_e_is_one(self):
        assert association(0.5, 0.5 / math.e) == pytest.approx(1.0, abs=1e-12)

    def test_ln_ratio_value(self):
        assert association(0.01, 0.1) == pytest.approx(-2.302585092994046, abs=1e-12)

    def test_nonpositive_rejected(self):
        with pytest.raises(NonPositiveProbability):
            association(0.0, 0.5)
        with pytest.raises(NonPositiveProbability):
            association(0.5, -0.1)

    @given(st.floats(min_value=1e-9, max_value=1.0),
           st.floats(min_value=1e-9, max_value=1.0))
    def test_antisymmetry(self, a, b):
        assert association(a, b) == -association(b, a)

    @given(st.floats(min_value=1e-6, max_value=1.0),
           st.floats(min_value=1e-6, max_value=1.0),
           st.floats(min_value=1e-3, max_value=1.0))
    @settings(max_examples=200)
    def test_scale_invariance(self, a, b, c):
        assert association(c * a, c * b) == pytest.approx(association(a, b), abs=1e-12)


@pytest.fixture(scope="module")
def mini_instances():
    instances = build_corpus(Language.EN)
    picked = [i for i in instances if i.template_id == 1][:40]
    return picked


class TestScoreCorpus:
    def test_uniform_scorer_scores_zero(self, mini_instances):
        # Attribute masking cannot change a uniform distribution.
        vocab = sorted({w for i in mini_instances
                        for w in i.sentence.lower().replace(".", " .").split()})
        scorer = UniformScorer(vocab)
        records = score_corpus(scorer, mini_instances, ModelState.PRE)
        assert len(records) == len(mini_instances)
        assert all(r.score == 0.0 for r in records)

    def test_unmasked_instances_rejected(self, mini_instances):
        from dataclasses import replace
        bare = [replace(mini_instances[0], variant_target_masked=None)]
        with pytest.raises(ScoringError):
            score_corpus(UniformScorer(["a"]), bare, ModelState.PRE)

    def test_error_annotated_with_instance_id(self):
        instances = build_corpus(Language.EN)[:3]
        scorer = UniformScorer(["not-the-right-vocab"])
        with pytest.raises(ScoringError) as exc:
            score_corpus(scorer, instances, ModelState.PRE, batch_size=1)
        assert instances[0].instance_id in str(exc.value)

    def test_full_corpus_cardinality(self):
        instances = build_corpus(Language.EN)
        vocab = sorted({w for i in instances
                        for w in i.sentence.lower().replace(".", " .").split()})
        scorer = UniformScorer(vocab)
        records = score_corpus(scorer, instances, ModelState.PRE, batch_size=256)
        assert len(records) == 5400
        assert len({r.instance_id for r in records}) == 5400


class TestRecordIO:
    def test_tsv_roundtrip(self, tmp_path, mini_instances):
        vocab = sorted({w for i in mini_instances
                        for w in i.sentence.lower().replace(".", " .").split()})
        scorer = UniformScorer(vocab)
        records = score_corpus(scorer, mini_instances, ModelState.PRE)
        path = tmp_path / "records.tsv"
        write_records(path, records)
        assert read_records(path) == records

    def test_jsonl_roundtrip(self, tmp_path, mini_instances):
        vocab = sorted({w for i in mini_instances
                        for w in i.sentence.lower().replace(".", " .").split()})
        scorer = UniformScorer(vocab)
        records = score_corpus(scorer, mini_instances, ModelState.POST)
        path = tmp_path / "records.jsonl"
        write_records(path, records)
        assert read_records(path) == records
