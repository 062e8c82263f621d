import io
import itertools

import pytest
import yaml

from clausechain.errors import FileAccessError, ParseError, ValidationError
from clausechain.schema import (
    ClauseItem,
    Dataset,
    GoldAnnotation,
    OptionSpec,
    QuestionSpec,
    UnknownQuestionError,
    annotation_violations,
    dump_question_bank,
    get_question,
    load_dataset,
    parse_dataset,
    parse_question_bank,
    validate,
    write_dataset,
)


def record(cid="c1", qid="Q1", concept="change-of-control", text="Some clause.", gold=("a",)):
    return {"clause_id": cid, "question_id": qid, "concept": concept, "clause_text": text, "gold": list(gold)}


class TestQuestionBank:
    def test_bundled_bank_shape(self, bank):
        assert [q.id for q in bank] == ["Q1", "Q2", "Q3", "Q4"]
        assert [len(q.options) for q in bank] == [7, 6, 9, 6]

    def test_q1_rules(self, q1):
        assert q1.exclusive_options == {"g"}
        assert q1.abstention_option == "g"
        assert q1.option("g").text.startswith("The provided text lacks sufficient information")

    def test_q4_catch_all(self, q4):
        assert q4.catch_all_option == "f"
        assert q4.exclusive_options == frozenset()

    def test_round_trip(self, bank):
        text = dump_question_bank(bank)
        assert parse_question_bank(text) == bank

    def test_dump_to_stream(self, bank):
        buf = io.StringIO()
        assert dump_question_bank(bank, buf) is None
        assert yaml.safe_load(buf.getvalue())

    def test_unknown_question(self, bank):
        with pytest.raises(UnknownQuestionError) as err:
            get_question(bank, "Q9")
        assert isinstance(err.value, KeyError)

    def test_letters_must_be_contiguous(self):
        with pytest.raises(ValidationError):
            QuestionSpec("X", "x", "?", (OptionSpec("a", "A"), OptionSpec("c", "C")))

    def test_dangling_exclusive(self):
        with pytest.raises(ValidationError):
            QuestionSpec("X", "x", "?", (OptionSpec("a", "A"),), exclusive_options=frozenset("z"))

    def test_bad_yaml(self):
        with pytest.raises(ParseError):
            parse_question_bank("questions: [unterminated")


class TestDataset:
    def test_two_records(self, write_jsonl, bank):
        path = write_jsonl([record("c1"), record("c2", gold=("b", "c"))])
        ds = load_dataset(path, bank)
        assert len(ds.items) == 2
        assert ds.gold_for("Q1") == {"c1": {"a"}, "c2": {"b", "c"}}

    def test_round_trip(self, dataset, tmp_path, bank):
        path = tmp_path / "copy.jsonl"
        write_dataset(dataset, path)
        assert load_dataset(path, bank) == dataset

    def test_bundled_fixture(self, dataset):
        for qid in ("Q1", "Q2", "Q3", "Q4"):
            assert 8 <= len(dataset.annotations_for(qid)) <= 12

    def test_error_names_line(self, write_jsonl, bank):
        path = write_jsonl([record("c1"), record("c2", gold=("a", "z"))])
        with pytest.raises(ValidationError, match=r"data\.jsonl:2"):
            load_dataset(path, bank)

    def test_exclusive_with_others_rejected(self, write_jsonl, bank):
        path = write_jsonl([record("c1", gold=("g", "a"))])
        with pytest.raises(ValidationError, match="exclusive"):
            load_dataset(path, bank)

    def test_bad_json(self, tmp_path):
        with pytest.raises(ParseError, match=":1"):
            parse_dataset(["{not json"], "x.jsonl")

    def test_missing_file(self, tmp_path, bank):
        with pytest.raises(FileAccessError):
            load_dataset(tmp_path / "absent.jsonl", bank)


class TestValidate:
    def test_consistent_fixture(self, dataset, bank):
        assert validate(dataset, bank).ok

    def test_violation_kinds(self, bank):
        ds = Dataset(
            items=(ClauseItem("c1", "change-of-control", "text"), ClauseItem("c2", "weather", "  ")),
            annotations=(
                GoldAnnotation("c1", "Q1", ("a", "a")),
                GoldAnnotation("c1", "Q1", ("b",)),
                GoldAnnotation("c3", "Q1", ("b",)),
                GoldAnnotation("c1", "Q7", ("a",)),
            ),
        )
        messages = [v.message for v in validate(ds, bank)]
        assert any("empty" in m for m in messages)
        assert any("matches no question" in m for m in messages)
        assert any("duplicate letters" in m for m in messages)
        assert any("duplicate (clause_id" in m for m in messages)
        assert any("unknown clause" in m for m in messages)
        assert any("unknown question" in m for m in messages)

    def test_matches_brute_force(self, q1):
        """validate() is empty exactly when every annotation satisfies the invariants."""
        letters = list(q1.letters) + ["z"]
        golds = [()]
        for n in (1, 2):
            golds += list(itertools.product(letters, repeat=n))

        def brute_ok(gold):
            if not gold or len(set(gold)) != len(gold):
                return False
            if any(g not in q1.letters for g in gold):
                return False
            return not ("g" in gold and len(gold) > 1)

        items = (ClauseItem("c", q1.concept, "text"),)
        for gold in golds:
            ds = Dataset(items=items, annotations=(GoldAnnotation("c", "Q1", tuple(gold)),))
            assert validate(ds, [q1]).ok == brute_ok(gold), gold
            assert (not annotation_violations(ds.annotations[0], q1)) == brute_ok(gold)

    def test_records_keep_source(self, write_jsonl, bank):
        rec = record()
        rec["source"] = "contract-17"
        ds = load_dataset(write_jsonl([rec]), bank)
        assert ds.item("c1").source == "contract-17"
