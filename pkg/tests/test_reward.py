import random

import pytest
from hypothesis import given, strategies as st

from groundzoom.geometry import BBox
from groundzoom.reward import (
    GoldAnswer,
    QuestionType,
    RewardConfig,
    RewardMode,
    accuracy_reward,
    exact_match_reward,
    format_reward_answer,
    format_reward_grounding,
    iou_reward,
    normalize_answer,
    total_reward,
)
from groundzoom.rouge import mean_rouge, rouge_l, rouge_l_tokens, rouge_n, rouge_n_tokens, tokenize
from groundzoom.trace import parse_trace

from oracles import brute_rouge_l, brute_rouge_n

T, B, A = "<think>r</think>", "<bbox>[1,2,3,4]</bbox>", "<answer>{}</answer>"


def ans(text, boxes=0):
    return parse_trace((T + B) * boxes + T + A.format(text))


# -- rouge ---------------------------------------------------------------------

def test_tokenize():
    assert tokenize("The Cat, sat!") == ["the", "cat", "sat"]
    assert tokenize("snake_case x-ray") == ["snake", "case", "x", "ray"]
    assert tokenize("Straße") == ["strasse"]
    assert tokenize("  ...  ") == []


def test_rouge_hand_values():
    assert rouge_n("the cat sat", "the cat", 1) == pytest.approx(0.8, abs=1e-12)
    assert rouge_n("the cat sat", "the cat", 2) == pytest.approx(2 / 3, abs=1e-12)
    assert rouge_l("the cat sat", "the cat") == pytest.approx(0.8, abs=1e-12)
    assert mean_rouge("the cat sat", "the cat") == pytest.approx(0.7556, abs=1e-4)
    assert rouge_l("cat the", "the cat") == pytest.approx(0.5, abs=1e-12)
    assert rouge_n("a b", "c d", 1) == 0.0
    assert rouge_n("one", "one", 2) == 0.0  # no bigrams on either side


def test_rouge_clips_repeated_grams():
    # "the the the" vs "the": overlap clipped at 1
    assert rouge_n("the the the", "the", 1) == pytest.approx(2 * (1 / 3) * 1 / (1 / 3 + 1))


def test_rouge_matches_brute_force():
    rng = random.Random(5)
    vocab = list("abcd")
    for _ in range(1000):
        p = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        g = [rng.choice(vocab) for _ in range(rng.randint(0, 8))]
        for n in (1, 2):
            assert rouge_n_tokens(p, g, n) == brute_rouge_n(p, g, n)
        assert rouge_l_tokens(p, g) == brute_rouge_l(p, g)


_tokens = st.lists(st.sampled_from("abc"), max_size=8)


@given(_tokens, _tokens)
def test_rouge_properties(p, g):
    for n in (1, 2):
        v = rouge_n_tokens(p, g, n)
        assert 0.0 <= v <= 1.0
        assert v == rouge_n_tokens(g, p, n)
    v = rouge_l_tokens(p, g)
    assert 0.0 <= v <= 1.0
    assert v == rouge_l_tokens(g, p)
    # LCS F1 of 1 forces equal sequences; n-gram F1 only forces equal multisets
    if p and g:
        assert (v == 1.0) == (p == g)
    if p == g and len(p) >= 2:
        assert rouge_n_tokens(p, g, 1) == rouge_n_tokens(p, g, 2) == 1.0


# -- normalization and accuracy ------------------------------------------------

@pytest.mark.parametrize("raw,norm", [
    ("B", "b"),
    (" b. ", "b"),
    ("  New   York!?", "new york"),
    ("A\tB\nC", "a b c"),
    ("yes...", "yes"),
    ("3.5", "3.5"),
    ("(A)", "(a)"),
    ("", ""),
])
def test_normalize_table(raw, norm):
    assert normalize_answer(raw) == norm


def test_exact_match():
    gold = GoldAnswer("B", choices=("A", "B", "C"))
    assert exact_match_reward("B", gold) == 1.0
    assert exact_match_reward(" b. ", gold) == 1.0
    assert exact_match_reward("C", gold) == 0.0


def test_gold_validation():
    with pytest.raises(ValueError):
        GoldAnswer("D", choices=("A", "B"))
    with pytest.raises(ValueError):
        GoldAnswer("A", choices=())
    g = GoldAnswer.from_dict({"text": "A", "choices": ["A", "B"], "gt_box": [0, 0, 2, 2]})
    assert g.gt_box == BBox(0, 0, 2, 2)


def test_accuracy_by_question_type():
    ff = QuestionType.FREE_FORM
    assert accuracy_reward("the cat sat", GoldAnswer("the cat"), ff) == pytest.approx(0.7556, abs=1e-4)
    assert accuracy_reward("a red bus", GoldAnswer("a red bus"), ff) == 1.0
    assert accuracy_reward("B", GoldAnswer("B", ("A", "B")), "multiple_choice") == 1.0


def test_single_token_free_form_has_no_bigram_credit():
    assert accuracy_reward("red", GoldAnswer("red"), "free_form") == pytest.approx(2 / 3)
    assert accuracy_reward("Red.", GoldAnswer("red"), "free_form") == pytest.approx(2 / 3)


@given(st.text(max_size=30), st.text(" \t\n", max_size=4), st.text(" \t\n", max_size=4))
def test_accuracy_ignores_outer_whitespace(pred, lead, trail):
    gold = GoldAnswer("the cat sat on the mat")
    for q in QuestionType:
        assert accuracy_reward(lead + pred + trail, gold, q) == accuracy_reward(pred, gold, q)


# -- format rewards ---------------------------------------------------------------

def test_format_grounding():
    assert format_reward_grounding(parse_trace(T + B)) == 1.0
    assert format_reward_grounding(parse_trace(B)) == 0.0
    assert format_reward_grounding(parse_trace((T + B) * 6)) == 0.0
    assert format_reward_grounding(parse_trace((T + B) * 5)) == 1.0
    assert format_reward_grounding(parse_trace((T + B) * 6), round_cap=6) == 1.0
    # zero grounding rounds: nothing to violate
    assert format_reward_grounding(ans("x")) == 1.0


def test_format_answer():
    assert format_reward_answer(parse_trace("<think>…</think><answer>blue</answer>")) == 1.0
    assert format_reward_answer(parse_trace(T + B)) == 0.0
    assert format_reward_answer(parse_trace(T + A.format("blue") + " trailing")) == 0.0


# -- iou and totals -------------------------------------------------------------

def _trace_with_boxes(*boxes):
    body = "".join(T + "<bbox>[{},{},{},{}]</bbox>".format(*b) for b in boxes)
    return parse_trace(body + T + A.format("x"))


def test_iou_reward():
    gt = BBox(1, 1, 3, 3)
    assert iou_reward(_trace_with_boxes((1, 1, 3, 3)), gt) == 1.0
    assert iou_reward(_trace_with_boxes((1, 1, 3, 3), (10, 10, 12, 12)), gt) == 0.5
    assert iou_reward(_trace_with_boxes((0, 0, 2, 2)), gt) == pytest.approx(1 / 7, abs=1e-15)
    assert iou_reward(ans("x"), gt) == 0.0


def test_total_reward_examples():
    gold = GoldAnswer("B", ("A", "B"))
    cfg = RewardConfig.for_mode(RewardMode.GROUND_R1)
    r = total_reward(ans("B", boxes=1), gold, cfg)
    assert (r.format_ground, r.format_answer, r.accuracy, r.iou_bonus) == (1.0, 1.0, 1.0, 0.0)
    assert r.total == 3.0
    assert total_reward(parse_trace("<answer>B</answer>"), gold, cfg).total == 0.0
    # grounded but never answered: no accuracy
    r = total_reward(parse_trace(T + B), gold, cfg)
    assert (r.format_ground, r.format_answer, r.accuracy) == (1.0, 0.0, 0.0)


def test_vanilla_mode_drops_grounding_term():
    cfg = RewardConfig.for_mode("vanilla-r1")
    r = total_reward(ans("B", boxes=2), GoldAnswer("B", ("A", "B")), cfg)
    assert r.format_ground == 0.0
    assert r.total == 2.0
    with pytest.raises(ValueError):
        RewardConfig(w_fg=1.0, mode="vanilla-r1")


def test_bbox_mode_adds_iou():
    cfg = RewardConfig.for_mode("ground-r1-bbox")
    r = total_reward(_trace_with_boxes((0, 0, 2, 2)), GoldAnswer("x", gt_box=BBox(1, 1, 3, 3)), cfg)
    assert r.iou_bonus == pytest.approx(1 / 7)
    assert r.total == pytest.approx(3 + 1 / 7)


def test_gate_mode():
    gold = GoldAnswer("B", ("A", "B"))
    cfg = RewardConfig.for_mode("ground-r1", combine="gate")
    assert total_reward(ans("B", boxes=1), gold, cfg).total == 1.0
    assert total_reward(parse_trace((T + B) * 6 + T + A.format("B")), gold, cfg).total == 0.0


def test_weight_linearity():
    gold = GoldAnswer("the cat")
    trace = ans("the cat sat", boxes=1)
    base = RewardConfig.for_mode("ground-r1", question_type="free_form")
    r1 = total_reward(trace, gold, base)
    for c in (0.0, 0.5, 2.0, 7.25):
        rc = total_reward(trace, gold, RewardConfig.for_mode("ground-r1", question_type="free_form", w_acc=c))
        assert rc.total - (r1.total - r1.accuracy) == pytest.approx(c * r1.accuracy, abs=1e-15)


@given(st.text(max_size=80))
def test_rewards_in_range_for_any_text(raw):
    gold = GoldAnswer("a b", gt_box=BBox(0, 0, 5, 5))
    for mode in RewardMode:
        for q in QuestionType:
            if q is QuestionType.MULTIPLE_CHOICE:
                g = GoldAnswer("a b", ("a b", "c"), gt_box=gold.gt_box)
            else:
                g = gold
            r = total_reward(parse_trace(raw), g, RewardConfig.for_mode(mode, question_type=q))
            for v in (r.format_ground, r.format_answer, r.accuracy, r.iou_bonus):
                assert 0.0 <= v <= 1.0
            assert 0.0 <= r.total <= 4.0
