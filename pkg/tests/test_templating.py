import json

import pytest

from clausechain.errors import MissingBindingError, TemplateError, TemplateNotFoundError, UnknownSlotError
from clausechain.schema import OptionSpec
from clausechain.templating import (
    SLOT_RE,
    PromptTemplate,
    SlotBindings,
    TemplateStore,
    default_store,
    load_template,
    parse_template,
    render,
    render_options,
)

from conftest import FIXTURES

SENTINELS = SlotBindings(
    clause_name="<<CLAUSE_NAME>>",
    clause="<<CLAUSE>>",
    question="<<QUESTION>>",
    options_text="<<OPTIONS>>",
    response="<<RESPONSE>>",
)


class TestRenderOptions:
    def test_two(self):
        assert render_options([OptionSpec("a", "X"), OptionSpec("b", "Y")]) == "a) X\nb) Y"

    def test_single(self):
        assert render_options([OptionSpec("a", "Z")]) == "a) Z"

    def test_q4(self, q4):
        lines = render_options(q4.options).split("\n")
        assert len(lines) == 6
        assert lines[0] == "a) Acts of God or natural disasters."


class TestAssets:
    def test_all_ids_bundled(self):
        assert default_store().template_ids() == ["P1", "P1-EXPLAIN", "P2", "P3", "P4", "P4-PER-PARTY", "P5"]

    @pytest.mark.parametrize("template", list(default_store()), ids=lambda t: f"{t.id}-{t.question_id}-{t.stage}")
    def test_sentinel_render_leaves_no_slot(self, template):
        out = render(template, SENTINELS)
        assert not SLOT_RE.search(out)
        assert "{{" not in out and "}}" not in out

    def test_checksums_pinned(self):
        """Editing an asset must come with a version bump and a new snapshot."""
        pinned = json.loads((FIXTURES / "template_checksums.json").read_text())
        current = {f"{t.id}/{t.question_id}/{t.stage}": {"version": t.version, "sha256": t.checksum} for t in default_store()}
        assert current == pinned

    def test_p5_only_for_q4(self):
        assert "shortages of fuel, raw materials, power or energy" in load_template("P5", "Q4").body
        with pytest.raises(TemplateNotFoundError):
            load_template("P5", "Q1")

    def test_per_party_variant(self):
        body = load_template("P4-PER-PARTY", "Q1").body
        assert "Provide for each party, its requirements, obligations, and duties" in body

    def test_explain_variant_asks_for_explanation(self):
        assert '"explanation"' in load_template("P1-EXPLAIN", "Q3").body

    def test_two_stage_chain(self):
        first, second = default_store().chain("P3", "Q2")
        assert "CLAUSE" in first.slots and "RESPONSE" in second.slots
        assert "CLAUSE" not in second.slots

    def test_single_stage_chain(self):
        assert len(default_store().chain("P1", "Q4")) == 1
        assert len(default_store().chain("P2", "Q4")) == 1

    def test_p4_shares_p3_stage2(self):
        for q in ("Q1", "Q2", "Q3", "Q4"):
            assert load_template("P4", q, 2).body == load_template("P3", q, 2).body


class TestRender:
    def test_p1_q1_sentence(self, q1, dataset):
        from clausechain.chain import bindings_for

        out = render(load_template("P1", "Q1"), bindings_for(dataset.item("coc-01"), q1))
        assert 'If the clause does not specify, respond with: "Unable to determine".' in out
        assert dataset.item("coc-01").clause_text in out

    def test_p4_ends_with_options(self, q1):
        bindings = SlotBindings("change of control", "text", q1.question_text, render_options(q1.options))
        out = render(load_template("P4", "Q1"), bindings)
        head, _, tail = out.partition("Your response will be subsequently mapped to the following options")
        assert head and tail.endswith(render_options(q1.options))

    def test_stage2_response_between_delimiters(self):
        out = render(load_template("P3", "Q1", 2), SlotBindings("x", None, "q?", "a) A", "SUMMARY-X"))
        assert "#### BEGIN RESPONSE####\nSUMMARY-X\n#### END RESPONSE ####" in out

    def test_missing_binding_names_slot(self):
        with pytest.raises(MissingBindingError) as err:
            render(load_template("P1", "Q1"), SlotBindings(clause_name="x"))
        assert err.value.slot in {"CLAUSE", "QUESTION", "OPTIONS"}

    def test_length_law(self):
        tpl = load_template("P2", "Q3")
        out = render(tpl, SENTINELS)
        markers = SLOT_RE.findall(tpl.body)
        expected = len(tpl.body) - sum(len(m) + 4 for m in markers) + sum(len(SENTINELS.lookup(m)) for m in markers)
        assert len(out) == expected

    def test_binding_not_reexpanded(self):
        tpl = PromptTemplate("P1", "*", 1, "A {{CLAUSE}} B {{QUESTION}}", 1)
        out = render(tpl, SlotBindings(clause="has {{QUESTION}} inside", question="Q"))
        assert out == "A has {{QUESTION}} inside B Q"

    def test_injective_in_clause(self, q2):
        tpl = load_template("P1", "Q2")
        base = dict(clause_name="assignment", question=q2.question_text, options_text=render_options(q2.options))
        one = render(tpl, SlotBindings(clause="Clause ONE text.", **base))
        two = render(tpl, SlotBindings(clause="Clause TWO text, longer.", **base))
        assert one != two
        prefix, _, suffix = tpl.body.partition("{{CLAUSE}}")
        # everything outside the clause region is the same in both outputs
        p = len(render(PromptTemplate("P1", "*", 1, prefix, 1), SlotBindings(**base)))
        s = len(render(PromptTemplate("P1", "*", 1, suffix, 1), SlotBindings(**base)))
        assert one[:p] == two[:p] and one[-s:] == two[-s:]
        assert one[p:-s] == "Clause ONE text." and two[p:-s] == "Clause TWO text, longer."


class TestTemplateValidation:
    def test_unknown_slot(self):
        with pytest.raises(UnknownSlotError):
            PromptTemplate("P1", "*", 1, "{{CLAUS}}", 1)

    def test_response_in_stage1(self):
        with pytest.raises(TemplateError):
            PromptTemplate("P3", "Q1", 1, "{{RESPONSE}}", 1)

    def test_clause_in_stage2(self):
        with pytest.raises(TemplateError):
            PromptTemplate("P3", "Q1", 2, "{{CLAUSE}} {{RESPONSE}}", 1)

    def test_single_stage_id_at_stage2(self):
        with pytest.raises(TemplateError):
            PromptTemplate("P2", "Q1", 2, "{{RESPONSE}}", 1)

    def test_parse_header(self):
        tpl = parse_template("#% id=P2 question=Q1 stage=1 version=3\nBody {{CLAUSE}}\n")
        assert (tpl.id, tpl.question_id, tpl.stage, tpl.version, tpl.body) == ("P2", "Q1", 1, 3, "Body {{CLAUSE}}")

    def test_missing_header(self):
        with pytest.raises(TemplateError):
            parse_template("no header\nbody")

    def test_store_from_directory(self, tmp_path):
        (tmp_path / "P3_Q1_stage1.txt").write_text("#% id=P3 question=Q1 stage=1 version=1\n{{CLAUSE}}\n")
        store = TemplateStore(tmp_path)
        with pytest.raises(TemplateNotFoundError, match="stage 2"):
            store.chain("P3", "Q1")

    def test_duplicate_asset(self, tmp_path):
        for name in ("a.txt", "b.txt"):
            (tmp_path / name).write_text("#% id=P1 question=* stage=1 version=1\nx\n")
        with pytest.raises(TemplateError, match="duplicate"):
            TemplateStore(tmp_path)
