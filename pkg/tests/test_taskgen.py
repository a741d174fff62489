import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import divmod_digits, oracle_digit
from digitlab.taskgen import (CANONICAL, D_CAP, PERMUTATIONS, SEQ_LEN, SYMBOLS, FieldPermutation, SplitInfo,
                              TaskExample, assign_split, enumerate_examples, extract_digit, highest_position,
                              make_example, make_split, parse_tokens, read_dataset, render_tokens,
                              split_examples, write_dataset)


@pytest.fixture(scope="module")
def universe():
    return enumerate_examples()


@pytest.mark.parametrize("n,b,d,want", [(255, 16, 0, 15), (255, 16, 2, 0), (0, 2, 0, 0), (999, 30, 1, 3)])
def test_extract_digit_examples(n, b, d, want):
    assert extract_digit(n, b, d) == want


def test_extract_digit_rejects_base_below_two():
    for b in (-1, 0, 1):
        with pytest.raises(ValueError):
            extract_digit(5, b, 0)


@settings(max_examples=10_000, deadline=None)
@given(st.integers(0, 999), st.integers(2, 30), st.integers(0, 12))
def test_extract_digit_matches_divmod(n, b, d):
    assert extract_digit(n, b, d) == oracle_digit(n, b, d)


def test_extract_digit_exact_for_huge_inputs():
    n = 7 ** 200 + 3
    assert extract_digit(n, 7, 0) == 3
    assert extract_digit(n, 7, 200) == 1


def test_highest_position_agrees_with_oracle():
    for n in range(1000):
        for b in range(2, 31):
            assert highest_position(n, b) == len(divmod_digits(n, b)) - 1


def test_enumeration_worked_cases(universe):
    by = {}
    for ex in universe:
        by.setdefault((ex.n, ex.b), []).append(ex)
    assert [(e.d, e.answer, e.in_range) for e in by[(255, 16)]] == [(0, 15, True), (1, 15, True), (2, 0, False)]
    assert [(e.d, e.in_range) for e in by[(0, 7)]] == [(0, True), (1, False)]
    assert [e.d for e in by[(999, 2)]] == list(range(10))
    assert all(e.in_range for e in by[(999, 2)])


def test_enumeration_count_and_labels(universe):
    expected = 0
    for n in range(1000):
        for b in range(2, 31):
            p = len(divmod_digits(n, b)) - 1
            expected += (p + 1) + (p + 1 <= D_CAP)
    assert len(universe) == expected == 119_628
    assert len({e.key for e in universe}) == len(universe)
    for e in universe:
        assert e.d <= D_CAP
        assert e.answer == oracle_digit(e.n, e.b, e.d)
        if e.in_range:
            assert e.answer < e.b
        else:
            assert e.answer == 0


def test_render_examples():
    ex = make_example(255, 16, 0)
    toks = lambda s: [SYMBOLS.index(c) for c in s.split()]
    assert list(render_tokens(ex).ids) == toks("N 2 5 5 B 1 6 D 0 O 1 5 E")
    assert list(render_tokens(make_example(7, 2, 0)).ids) == toks("N 0 0 7 B 0 2 D 0 O 0 1 E")
    dbn = FieldPermutation(("D", "B", "N"))
    seq = render_tokens(ex, dbn)
    assert list(seq.ids) == toks("D 0 B 1 6 N 2 5 5 O 1 5 E")
    assert seq.position("N_ones") == 8 and seq.position("O[0]") == 9
    assert str(ex) == "N 255 B 16 D 0 O 15 E"


def test_prompt_length():
    seq = render_tokens(make_example(5, 3, 1), include_answer=False)
    assert len(seq) == 10 and seq.labels[-1] == "O[0]"


def test_six_permutations_canonical_first():
    assert len(set(PERMUTATIONS)) == 6 and PERMUTATIONS[0] == CANONICAL
    with pytest.raises(ValueError):
        FieldPermutation(("N", "N", "D"))


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 999), st.integers(2, 30), st.data())
def test_round_trip_all_permutations(n, b, data):
    d = data.draw(st.integers(0, min(D_CAP, highest_position(n, b) + 1)))
    ex = make_example(n, b, d)
    for perm in PERMUTATIONS:
        seq = render_tokens(ex, perm)
        assert len(seq) == SEQ_LEN
        assert sorted(seq.labels) == sorted(render_tokens(ex).labels)
        assert parse_tokens(seq.ids) == (n, b, d, ex.answer)
        assert parse_tokens(render_tokens(ex, perm, include_answer=False).ids) == (n, b, d, None)


@pytest.mark.parametrize("seed", [0, 42, 1337])
def test_split_cardinalities(seed, universe):
    info = make_split(seed)
    assert info == make_split(seed)
    assert len(info.val_n) == len(info.test_n) == 100
    assert len(info.val_b) == len(info.test_b) == 5
    assert not info.val_n & info.test_n and not info.val_b & info.test_b
    assert info.val_b | info.test_b <= set(range(2, 31))
    parts = split_examples(info, universe)
    assert sum(map(len, parts.values())) == len(universe)
    keys = [set(e.key for e in parts[s]) for s in ("train", "validation", "test")]
    assert not (keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2])
    for e in parts["validation"]:
        assert e.n in info.val_n and e.b in info.val_b
    for e in parts["test"]:
        assert e.n in info.test_n and e.b in info.test_b


def test_seed_1337_split_sizes(universe):
    parts = split_examples(make_split(1337), universe)
    assert (len(parts["train"]), len(parts["validation"]), len(parts["test"])) == (115_217, 2_398, 2_013)


def test_assign_split_rules():
    info = make_split(0)
    vn, vb, tb = min(info.val_n), min(info.val_b), min(info.test_b)
    other_b = min(set(range(2, 31)) - info.val_b - info.test_b)
    assert assign_split(make_example(vn, vb, 0), info) == "validation"
    assert assign_split(make_example(vn, other_b, 0), info) == "train"
    assert assign_split(make_example(vn, tb, 0), info) == "train"
    tn = min(info.test_n)
    assert assign_split(make_example(tn, tb, 0), info) == "test"


def test_split_info_json_round_trip(tmp_path):
    info = make_split(42)
    info.save(tmp_path / "s.json")
    obj = json.loads((tmp_path / "s.json").read_text())
    assert obj["seed"] == 42 and len(obj["val_n"]) == 100
    assert SplitInfo.load(tmp_path / "s.json") == info


def test_dataset_round_trip(tmp_path):
    exs = [make_example(255, 16, d) for d in range(3)] + [make_example(0, 2, 0)]
    write_dataset(exs, tmp_path / "d.txt")
    assert (tmp_path / "d.txt").read_text().splitlines()[0] == "N 255 B 16 D 0 O 15 E"
    assert read_dataset(tmp_path / "d.txt") == exs


def test_example_is_value_type():
    assert make_example(10, 3, 1) == TaskExample(10, 3, 1, 0, True)
