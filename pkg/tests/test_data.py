"""Corpus ingestion, tokenization, history reformulation, input assembly and
gold-span selection."""

import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convqa import data as D
from convqa.errors import ContractError, CorpusParseError, IntegrityError
from convqa.evalmetric import f1_word_overlap

STORY = "Anna walked to the market. She bought three red apples and a loaf of bread. Then she rode home."


@pytest.fixture
def raw_doc():
    s = STORY
    q = [
        ("Where did Anna go?", "to the market", "to the market"),
        ("What did she buy?", "apples and bread", "three red apples and a loaf of bread"),
        ("How many apples?", "Three", "three red apples"),
        ("Did she walk home?", "no", "she rode home"),
        ("What is her dog called?", "unknown", None),
    ]
    questions, answers = [], []
    for t, (question, answer, span) in enumerate(q, start=1):
        questions.append({"input_text": question, "turn_id": t})
        if span is None:
            answers.append({"input_text": answer, "span_start": -1, "span_end": -1,
                            "span_text": "unknown", "turn_id": t})
        else:
            start = s.index(span)
            answers.append({"input_text": answer, "span_start": start, "span_end": start + len(span),
                            "span_text": span, "turn_id": t})
    return {
        "id": "doc1", "source": "wikipedia", "story": s, "questions": questions, "answers": answers,
        "additional_answers": {"0": [{"input_text": "the market", "turn_id": 1}]},
    }


@pytest.fixture
def doc(raw_doc):
    return D.parse_corpus({"data": [raw_doc]})[0]


@pytest.fixture
def tokenizer(doc):
    return D.Tokenizer.build([doc.story] + [t.question for t in doc.turns] + [t.answer for t in doc.turns])


class TestCorpus:
    def test_empty(self):
        assert D.parse_corpus({"data": []}) == []

    def test_fields_round_trip(self, raw_doc, tmp_path):
        path = tmp_path / "coqa.json"
        path.write_text(json.dumps({"version": "1.0", "data": [raw_doc]}))
        (doc,) = D.load_corpus(path)
        assert doc.id == "doc1" and doc.source == "wikipedia" and doc.story == STORY
        assert [t.turn_id for t in doc.turns] == [1, 2, 3, 4, 5]
        assert doc.turns[0].references == ["to the market", "the market"]
        assert doc.turns[4].span_start == -1
        for t, a in zip(doc.turns, raw_doc["answers"]):
            assert t.answer == a["input_text"]
            if t.span_start >= 0:
                assert doc.story[t.span_start:t.span_end] == t.span_text

    def test_span_mismatch_names_document(self, raw_doc):
        raw_doc["answers"][1]["span_text"] = "pears"
        with pytest.raises(IntegrityError, match="doc1"):
            D.parse_corpus({"data": [raw_doc]})

    def test_span_outside_story(self, raw_doc):
        raw_doc["answers"][0]["span_end"] = 10_000
        with pytest.raises(IntegrityError):
            D.parse_corpus({"data": [raw_doc]})

    def test_nonconsecutive_turns(self, raw_doc):
        raw_doc["questions"][2]["turn_id"] = 7
        with pytest.raises(IntegrityError):
            D.parse_corpus({"data": [raw_doc]})

    def test_malformed_json_location(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"data": [\n  {"id": 1,,}\n]}')
        with pytest.raises(CorpusParseError, match="line 2"):
            D.load_corpus(path)

    def test_missing_field(self, raw_doc):
        del raw_doc["story"]
        with pytest.raises(CorpusParseError, match="doc1"):
            D.parse_corpus({"data": [raw_doc]})


class TestTokenizer:
    def test_empty(self):
        assert D.tokenize("") == []

    def test_contraction(self):
        toks = D.tokenize("Don't stop.")
        assert [t.text for t in toks] == ["don", "'", "t", "stop", "."]
        assert [(t.start, t.end) for t in toks] == [(0, 3), (3, 4), (4, 5), (6, 10), (10, 11)]

    @given(st.text(alphabet=st.sampled_from(list("ab C,.'!  \t\n")), max_size=40))
    @settings(max_examples=100)
    def test_offsets_tile_non_whitespace(self, text):
        toks = D.tokenize(text)
        covered = np.zeros(len(text), dtype=bool)
        for t in toks:
            assert text[t.start:t.end].lower() == t.text
            assert not covered[t.start:t.end].any()
            covered[t.start:t.end] = True
        assert all(covered[i] == (not text[i].isspace()) for i in range(len(text)))

    def test_special_ids_distinct(self, tokenizer):
        ids = tokenizer.special_ids
        assert len(set(ids.values())) == len(D.SPECIAL_TOKENS)

    def test_unknown_maps_to_unk(self, tokenizer):
        assert tokenizer.encode("zebra") == [tokenizer.token_to_id(D.UNK)]

    def test_encode_decode_round_trip(self, tokenizer):
        text = "she bought three red apples ."
        assert tokenizer.decode(tokenizer.encode(text)) == text

    def test_save_load_hash(self, tokenizer, tmp_path):
        tokenizer.save(tmp_path / "vocab.txt")
        again = D.Tokenizer.load(tmp_path / "vocab.txt")
        assert again.vocab == tokenizer.vocab
        assert again.hash == tokenizer.hash

    def test_max_size(self, doc):
        tok = D.Tokenizer.build([doc.story], max_size=10)
        assert len(tok) == 10


class TestReformulate:
    def test_first_turn(self, doc, tokenizer):
        ids = D.reformulate(doc, 1, tokenizer)
        assert ids == [tokenizer.token_to_id(D.Q)] + tokenizer.encode(doc.turns[0].question)

    def test_markers_in_order(self, doc, tokenizer):
        ids = D.reformulate(doc, 3, tokenizer)
        special = {tokenizer.token_to_id(D.Q): "Q", tokenizer.token_to_id(D.A): "A"}
        assert [special[i] for i in ids if i in special] == ["Q", "A", "Q", "A", "Q"]

    def test_history_uses_free_form_answer(self, doc, tokenizer):
        ids = D.reformulate(doc, 3, tokenizer)
        assert tokenizer.decode(ids).count("apples and bread") == 1
        span_ids = D.reformulate(doc, 3, tokenizer, history_field="span_text")
        assert "loaf" in tokenizer.decode(span_ids)

    def test_tight_budget_keeps_current_question(self, doc, tokenizer):
        current = tokenizer.encode(doc.turns[3].question)
        ids = D.reformulate(doc, 4, tokenizer, max_question_tokens=len(current) + 1)
        assert ids == [tokenizer.token_to_id(D.Q)] + current

    def test_budget_monotone(self, doc, tokenizer):
        prev = D.reformulate(doc, 5, tokenizer, max_question_tokens=1)
        for budget in range(2, 60):
            ids = D.reformulate(doc, 5, tokenizer, max_question_tokens=budget)
            assert ids[len(ids) - len(prev):] == prev  # smaller budget keeps a suffix
            prev = ids

    def test_bad_turn(self, doc, tokenizer):
        with pytest.raises(ContractError):
            D.reformulate(doc, 6, tokenizer)


class TestBuildExample:
    def test_layout(self, doc, tokenizer):
        ex = D.build_example(doc, 2, tokenizer)
        assert ex.token_ids[0] == tokenizer.token_to_id(D.CLS)
        assert ex.token_ids.count(tokenizer.token_to_id(D.CLS)) == 1
        assert ex.token_ids[ex.context_start - 1] == tokenizer.token_to_id(D.SEP)
        assert ex.token_ids[-1] == tokenizer.token_to_id(D.SEP)
        assert ex.context_end == ex.length - 1

    def test_alignment_within_story(self, doc, tokenizer):
        for k in range(1, 6):
            ex = D.build_example(doc, k, tokenizer)
            for pos in range(ex.context_start, ex.context_end):
                s, e = ex.offsets[pos]
                assert 0 <= s < e <= len(doc.story)
                assert doc.story[s:e].lower() == tokenizer.vocab[ex.token_ids[pos]] or \
                    ex.token_ids[pos] == tokenizer.token_to_id(D.UNK)

    def test_rationale_labels_match_brute_force(self, doc, tokenizer):
        for k, turn in enumerate(doc.turns, start=1):
            ex = D.build_example(doc, k, tokenizer)
            expected = np.zeros(ex.length)
            if turn.span_start >= 0 and D.answer_type_of(turn) != D.UNKNOWN:
                for pos in range(ex.context_start, ex.context_end):
                    s, e = ex.offsets[pos]
                    if s < turn.span_end and e > turn.span_start:
                        expected[pos] = 1
            np.testing.assert_array_equal(ex.gold.rationale, expected)

    def test_unknown(self, doc, tokenizer):
        ex = D.build_example(doc, 5, tokenizer)
        assert ex.gold.answer_type == D.UNKNOWN
        assert not ex.gold.rationale.any()
        assert ex.gold.start == ex.gold.end == ex.length + D.CLASS_SLOT[D.UNKNOWN]

    def test_yes_no_class(self, doc, tokenizer):
        ex = D.build_example(doc, 4, tokenizer)
        assert ex.gold.answer_type == D.NO
        assert ex.gold.start == ex.length + D.CLASS_SLOT[D.NO]
        assert ex.gold.rationale.sum() == 3  # "she rode home"

    def test_span_gold(self, doc, tokenizer):
        ex = D.build_example(doc, 1, tokenizer)
        assert ex.gold.answer_type == D.SPAN
        assert ex.span_text(ex.gold.start, ex.gold.end) == "to the market"

    def test_zero_overlap_falls_back_to_rationale(self, doc, tokenizer):
        ex = D.build_example(doc, 3, tokenizer)  # "Three" vs "three red apples" overlaps on "three"
        assert ex.span_text(ex.gold.start, ex.gold.end) == "three"

    def test_truncated_rationale_is_unusable(self, doc, tokenizer):
        # 8 question tokens + 3 markers leave 7 context tokens: "anna walked to the market . she"
        ex = D.build_example(doc, 2, tokenizer, max_seq_len=18, max_question_tokens=8)
        assert ex.length == 18
        assert not ex.usable
        assert D.build_example(doc, 1, tokenizer, max_seq_len=18, max_question_tokens=8).usable

    def test_question_too_long(self, doc, tokenizer):
        with pytest.raises(ContractError):
            D.build_example(doc, 5, tokenizer, max_seq_len=8)

    def test_record_round_trip(self, doc, tokenizer):
        ex = D.build_example(doc, 2, tokenizer)
        again = D.ReformulatedExample.from_record(json.loads(json.dumps(ex.to_record())))
        assert again.to_record() == ex.to_record()


class TestGoldSpan:
    def offsets(self, text):
        return [(t.start, t.end) for t in D.tokenize(text)]

    def test_full_rationale(self):
        text = "three red apples"
        assert D.select_gold_span(text, self.offsets(text), "three red apples") == (0, 2)

    def test_zero_overlap_fallback(self):
        text = "Physical, climatic, and biological factors"
        offs = self.offsets(text)
        assert D.select_gold_span(text, offs, "Three") == (0, len(offs) - 1)

    def test_inner_match(self):
        text = "w0 w1 w2 w3 w4 w5"
        assert D.select_gold_span(text, self.offsets(text), "w2 w3 w4") == (2, 4)

    def test_empty_rationale(self):
        with pytest.raises(ContractError):
            D.select_gold_span("x", [], "x")

    @given(st.lists(st.sampled_from(["cat", "dog", "sat", "red", "mat"]), min_size=1, max_size=8),
           st.lists(st.sampled_from(["cat", "dog", "sat", "blue", "mat"]), min_size=1, max_size=4))
    @settings(max_examples=80)
    def test_optimal_against_every_subspan(self, words, answer):
        text = " ".join(words)
        answer = " ".join(answer)
        offs = self.offsets(text)
        i, j = D.select_gold_span(text, offs, answer)
        best = f1_word_overlap(text[offs[i][0]:offs[j][1]], answer)
        for a in range(len(offs)):
            for b in range(a, len(offs)):
                assert best >= f1_word_overlap(text[offs[a][0]:offs[b][1]], answer)


class TestBatch:
    def test_stats_and_order(self, raw_doc, tokenizer):
        other = copy.deepcopy(raw_doc)
        other["id"] = "doc0"
        docs = D.parse_corpus({"data": [raw_doc, other]})
        examples, stats = D.build_examples(docs, tokenizer)
        assert [e.example_id for e in examples][:2] == ["doc0|1", "doc0|2"]
        s = stats.to_dict()
        assert s["examples"] == 10
        assert s["answer_types"] == {"span": 6, "yes": 0, "no": 2, "unknown": 2}
        # per doc, "apples and bread" and "no" are not verbatim in the story
        assert s["non_extractive_answers"] == 4
        assert s["yes_no_share_of_non_extractive"] == 0.5

    def test_file_round_trip_and_hash_check(self, doc, tokenizer, tmp_path):
        examples, _ = D.build_examples([doc], tokenizer)
        path = tmp_path / "ex.jsonl"
        D.write_examples(path, examples, tokenizer.hash)
        back = D.read_examples(path, tokenizer.hash)
        assert [e.to_record() for e in back] == [e.to_record() for e in examples]
        with pytest.raises(ContractError):
            D.read_examples(path, "0" * 16)
