import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spinelab.oracles import oracle_chain_value
from spinelab.tasks import (MARKER, STOP, TOKEN_ID, canonicalize, decode, dump_instances, encode,
                            extract_answer_tokens, generate_instances, grade,
                            load_instance_records, make_splits, render_response)


def test_spec_chain_difficulty_three():
    syms = ["<bos>", "A", "0", "4", "B", "+", "0", "7", "C", "*", "0", "2", "D", "+", "0", "5",
            "%", "1", "1", "?"]
    assert oracle_chain_value(syms) == 5


def test_spec_chain_difficulty_one():
    syms = ["<bos>", "A", "0", "3", "B", "+", "0", "4", "%", "1", "0", "?"]
    assert oracle_chain_value(syms) == 7


def test_generated_gold_matches_oracle():
    for inst in generate_instances("modchain", (1, 6), 300, seed=5, split="eval"):
        assert int(inst.gold_answer) == oracle_chain_value(decode(inst.prompt_tokens))
        assert inst.gold_answer == canonicalize(inst.gold_answer)


def test_modulus_ten_instances():
    for inst in generate_instances("modchain", (1, 1), 50, seed=2, modulus=10):
        assert int(inst.gold_answer) == (
            inst.operands[0] + inst.operands[1] if inst.ops[0] == "+" else
            inst.operands[0] - inst.operands[1] if inst.ops[0] == "-" else
            inst.operands[0] * inst.operands[1]) % 10


def test_seeded_determinism():
    a = generate_instances("modchain", (4, 6), 20, seed=11, split="adapt")
    b = generate_instances("modchain", (4, 6), 20, seed=11, split="adapt")
    assert a == b


def test_unknown_kind():
    with pytest.raises(ValueError, match="unknown task_kind"):
        generate_instances("sudoku", (1, 2), 3, seed=0)


def test_splits_shifted_and_disjoint():
    pre, adapt, ev = make_splits(0, n_pretrain=200, n_adapt=64, n_eval=200)
    assert {x.difficulty for x in pre} <= {1, 2, 3}
    assert {x.difficulty for x in adapt} | {x.difficulty for x in ev} <= {4, 5, 6}
    assert not {x.prompt_tokens for x in adapt} & {x.prompt_tokens for x in ev}
    assert all(x.split == "adapt" for x in adapt) and all(x.split == "eval" for x in ev)


def test_unlabeled_prompt_has_no_gold():
    inst = generate_instances("modchain", (4, 4), 1, seed=0)[0]
    p = inst.unlabeled()
    assert not hasattr(p, "gold_answer") and p.prompt_tokens == inst.prompt_tokens


def test_render_response_ends_with_answer():
    for inst in generate_instances("modchain", (1, 6), 40, seed=3):
        resp = render_response(inst)
        ext = extract_answer_tokens(resp, terminated=True)
        assert ext.valid and ext.canonical == inst.gold_answer
        assert resp[-1] == STOP
        direct = render_response(inst, direct=True)
        assert direct[0] == MARKER and extract_answer_tokens(direct).canonical == inst.gold_answer


def test_extraction_examples():
    ex = extract_answer_tokens(encode(["A", "0", "1", ";", "=>", "0", "0", "7", "<stop>"]))
    assert ex.valid and ex.canonical == "7" and len(ex.raw_span) == 3
    assert not extract_answer_tokens(encode(["A", "0", "1", "<stop>"])).valid
    assert not extract_answer_tokens(encode(["=>", "<stop>"])).valid
    assert not extract_answer_tokens(encode(["=>", "0", "7"]), terminated=False).valid


def test_extraction_first_marker_wins():
    ex = extract_answer_tokens(encode(["=>", "0", "3", ";", "=>", "0", "4", "<stop>"]))
    assert ex.canonical == "3"


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 31), max_size=30), st.booleans())
def test_extraction_is_total(tokens, terminated):
    ex = extract_answer_tokens(tokens, terminated)
    assert ex.valid == (ex.canonical is not None)
    if ex.valid:
        assert terminated and MARKER in tokens and ex.canonical.isdigit()


def test_grade_examples():
    assert grade("7", "7") == 1
    assert grade("07", "7") == 1
    assert grade(extract_answer_tokens(encode(["=>", "<stop>"])), "7") == 0
    assert grade(None, "7") == 0
    assert grade("5", "7") == 0


def test_instance_dump_roundtrip(tmp_path):
    insts = generate_instances("modchain", (4, 6), 10, seed=1, split="eval")
    dump_instances(insts, tmp_path / "eval.jsonl")
    recs = load_instance_records(tmp_path / "eval.jsonl")
    assert [r["id"] for r in recs] == [x.id for x in insts]
    assert all(r["v"] == 1 for r in recs)
    assert [tuple(r["prompt"]) for r in recs] == [x.prompt_tokens for x in insts]
    assert [r["gold"] for r in recs] == [x.gold_answer for x in insts]
    assert set(recs[0]) == {"v", "id", "split", "difficulty", "prompt", "gold"}


def test_vocab_fits_model():
    assert max(TOKEN_ID.values()) < 32
