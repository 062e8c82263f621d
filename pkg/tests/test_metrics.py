import random
from fractions import Fraction

import pytest

from clausechain.chain import ChainRun, RunArtifact
from clausechain.errors import MetricsError
from clausechain.metrics import (
    build_report,
    exact_match_accuracy,
    macro_average,
    micro_precision_recall,
    option_confusion,
    precision_recall,
    score,
)
from clausechain.parser import PredictionSet

from oracle import ref_confusion, ref_exact_match, ref_macro, ref_precision_recall, same_ratio


def as_maps(pred, gold):
    ids = [f"c{i:03d}" for i in range(len(gold))]
    return dict(zip(ids, pred)), dict(zip(ids, gold))


def random_case(rnd, max_options=9, max_items=50):
    letters = "abcdefghi"[: rnd.randint(1, max_options)]
    n = rnd.randint(1, max_items)

    def subset():
        return {x for x in letters if rnd.random() < 0.35}

    return letters, [subset() for _ in range(n)], [subset() for _ in range(n)]


class TestExamples:
    def test_exact_match_two_of_three(self):
        pred, gold = as_maps([{"a"}, {"b"}, {"c", "d"}], [{"a"}, {"c"}, {"d", "c"}])
        assert exact_match_accuracy(pred, gold) == Fraction(2, 3)

    def test_confusion_one_each(self):
        pred, gold = as_maps([{"d"}, set(), {"d"}, set()], [{"d"}, {"d"}, set(), set()])
        c = option_confusion(pred, gold, "d")
        assert (c.tp, c.fp, c.fn, c.tn) == (1, 1, 1, 1)
        assert precision_recall(c) == (Fraction(1, 2), Fraction(1, 2))
        assert c.support == 2

    def test_macro_skips_undefined(self):
        m = macro_average([1.0, 0.5, None])
        assert m.value == Fraction(3, 4) and m.excluded == 1

    def test_macro_all_undefined(self):
        with pytest.raises(MetricsError):
            macro_average([None, None])

    def test_undefined_precision(self):
        pred, gold = as_maps([set()], [{"a"}])
        assert precision_recall(option_confusion(pred, gold, "a")) == (None, Fraction(0))

    def test_missing_gold(self):
        with pytest.raises(MetricsError, match="no gold"):
            exact_match_accuracy({"x": {"a"}}, {"y": {"a"}})

    def test_option_outside_domain(self):
        with pytest.raises(MetricsError):
            option_confusion({"x": set()}, {"x": set()}, "z", domain="abc")

    def test_per_option_row(self, q4):
        pred, gold = as_maps([{"d"}, {"a"}, {"d"}, {"a"}], [{"d"}, {"d"}, {"a"}, {"a"}])
        row = score(pred, gold, q4).option("d")
        assert (row.precision, row.recall, row.support) == (Fraction(1, 2), Fraction(1, 2), 2)


class TestAgainstOracle:
    def test_random_trials(self):
        rnd = random.Random(2024)
        for _ in range(300):
            letters, pred_list, gold_list = random_case(rnd)
            pred, gold = as_maps(pred_list, gold_list)
            hits, n = ref_exact_match(pred_list, gold_list)
            assert same_ratio((hits, n), exact_match_accuracy(pred, gold))
            precisions, recalls = [], []
            for letter in letters:
                tp, fp, fn, tn = ref_confusion(pred_list, gold_list, letter)
                c = option_confusion(pred, gold, letter)
                assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)
                rp, rr = ref_precision_recall(tp, fp, fn)
                p, r = precision_recall(c)
                assert same_ratio(rp, p) and same_ratio(rr, r)
                precisions.append(p)
                recalls.append(r)
            for values in (precisions, recalls):
                ref = ref_macro([None if v is None else (v.numerator, v.denominator) for v in values])
                if ref is None:
                    with pytest.raises(MetricsError):
                        macro_average(values)
                else:
                    m = macro_average(values)
                    assert same_ratio(ref[0], m.value) and ref[1] == m.excluded

    def test_micro_pools_counts(self):
        rnd = random.Random(5)
        letters, pred_list, gold_list = random_case(rnd, max_items=30)
        pred, gold = as_maps(pred_list, gold_list)
        counts = [ref_confusion(pred_list, gold_list, x) for x in letters]
        tp, fp, fn = (sum(c[i] for c in counts) for i in range(3))
        p, r = micro_precision_recall(option_confusion(pred, gold, x) for x in letters)
        rp, rr = ref_precision_recall(tp, fp, fn)
        assert same_ratio(rp, p) and same_ratio(rr, r)


def run(cid, raw, selected, **flags):
    return ChainRun(cid, "Q1", "P1", None, None, "prompt", raw, PredictionSet(frozenset(selected), **flags))


class TestBuildReport:
    def artifact(self, runs, **kw):
        config = {"template_id": "P1", "question_id": "Q1", "model_id": "gpt-4o", "constraint_mode": "observe"}
        return RunArtifact(config=config, runs=runs, **kw)

    def test_counts_and_scores(self, dataset, q1):
        from clausechain.chain import Failure

        art = self.artifact(
            [
                run("coc-01", '[{"bucket":"a"}]', "a"),
                run("coc-02", "Unable to determine", "g", abstained=True),
                run("coc-03", "prose", "", unparseable=True, reason="x"),
            ],
            failures=[Failure("coc-04", "NetworkError: down")],
            skipped=["asg-01"],
        )
        report = build_report(art, dataset, q1)
        assert report.exact_match == Fraction(1, 3)
        assert report.counts == {"scored": 3, "abstained": 1, "unparseable": 1, "constraint_violations": 0,
                                 "failed": 1, "skipped": 1}
        assert report.prompt == "P1" and report.model == "gpt-4o"

    def test_reparse_enforce(self, dataset, q1):
        art = self.artifact([run("coc-08", '[{"bucket":"g"},{"bucket":"a"}]', "ga", constraint_violation="v")])
        assert build_report(art, dataset, q1, constraint_mode="observe").exact_match == 0
        enforced = build_report(art, dataset, q1, constraint_mode="enforce")
        assert enforced.exact_match == 1 and enforced.constraint_mode == "enforce"
        assert enforced.counts["constraint_violations"] == 1

    def test_unknown_clause(self, dataset, q1):
        with pytest.raises(MetricsError, match="nope"):
            build_report(self.artifact([run("nope", "[]", "")]), dataset, q1)

    def test_question_mismatch(self, dataset, q2):
        with pytest.raises(MetricsError, match="Q1"):
            build_report(self.artifact([run("coc-01", "[]", "")]), dataset, q2)

    def test_empty(self, dataset, q1):
        with pytest.raises(MetricsError):
            build_report(self.artifact([]), dataset, q1)

    def test_to_dict(self, dataset, q1):
        d = build_report(self.artifact([run("coc-01", "", "a")]), dataset, q1, micro=True).to_dict()
        assert d["exact_match"] == 1.0 and d["exact_match_ratio"] == "1/1"
        assert [row["option"] for row in d["per_option"]] == list("abcdefg")
        assert d["micro_precision"] == 1.0
