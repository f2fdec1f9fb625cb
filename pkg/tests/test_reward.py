from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qpagrpo.reward import (
    EmptyGold,
    RewardConfig,
    combined_reward,
    extract_final_answer,
    levenshtein,
    token_f1,
    tokenize_answer,
)

from oracles import f1_oracle, lev_matrix, reward_oracle

short_text = st.text(alphabet=st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=20)
ascii_text = st.text(alphabet="abc d.!", max_size=12)


class TestTokenize:
    def test_lowercase_and_punctuation(self):
        assert tokenize_answer("The Blue Tree!") == ["the", "blue", "tree"]

    def test_empty(self):
        assert tokenize_answer("") == []

    def test_inverted_marks(self):
        assert tokenize_answer("¡Vámonos!") == ["vámonos"]

    def test_apostrophe_joins(self):
        assert tokenize_answer("It's here") == ["its", "here"]


class TestTokenF1:
    def test_identical(self):
        assert token_f1(["a", "b"], ["a", "b"]) == 1.0

    def test_disjoint(self):
        assert token_f1(["a"], ["b"]) == 0.0

    def test_partial(self):
        # precision 1, recall 2/3
        assert token_f1(["blue", "tree"], ["the", "blue", "tree"]) == pytest.approx(0.8, abs=1e-12)

    def test_empty_cases(self):
        assert token_f1([], []) == 1.0
        assert token_f1([], ["a"]) == 0.0
        assert token_f1(["a"], []) == 0.0

    def test_bag_counts_duplicates(self):
        assert token_f1(["a", "a"], ["a"]) == pytest.approx(2 * 0.5 * 1 / 1.5)

    @given(st.lists(st.sampled_from("abcde"), max_size=6), st.lists(st.sampled_from("abcde"), max_size=6), st.randoms())
    def test_reorder_invariant(self, pred, gold, rnd):
        shuffled = list(pred)
        rnd.shuffle(shuffled)
        assert token_f1(shuffled, gold) == token_f1(pred, gold)


class TestLevenshtein:
    @pytest.mark.parametrize(
        "a,b,d",
        [("abc", "abc", 0), ("", "abc", 3), ("abc", "", 3), ("kitten", "sitting", 3), ("north", "south", 2),
         ("flaw", "lawn", 2), ("ab", "ba", 2)],
    )
    def test_known(self, a, b, d):
        assert levenshtein(a, b) == d
        assert lev_matrix(a, b) == d

    def test_unicode_scalar_values(self):
        assert levenshtein("caf\u00e9", "cafe") == 1
        # precomposed vs. decomposed: one substitution plus one insertion
        assert levenshtein("\u00e9", "e\u0301") == 2

    @given(short_text, short_text)
    def test_matches_oracle(self, a, b):
        assert levenshtein(a, b) == lev_matrix(a, b)

    @given(short_text, short_text)
    def test_symmetric(self, a, b):
        assert levenshtein(a, b) == levenshtein(b, a)

    @given(ascii_text, ascii_text, ascii_text)
    def test_triangle(self, a, b, c):
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestCombinedReward:
    def test_exact_match_is_one(self):
        assert combined_reward("the blue tree", "the blue tree").reward == 1.0

    def test_near_miss(self):
        r = combined_reward("blue tree", "the blue tree")
        assert r.f1 == pytest.approx(0.8)
        assert r.lev_distance == 4
        assert r.lev_sim == pytest.approx(9 / 13)
        assert r.reward == pytest.approx(0.3 * 0.8 + 0.7 * 9 / 13, abs=1e-12)
        assert r.reward == pytest.approx(0.7246, abs=1e-4)

    def test_wrong_but_similar(self):
        r = combined_reward("north", "south")
        assert (r.f1, r.lev_distance, r.lev_sim) == (0.0, 2, pytest.approx(0.6))
        assert r.reward == pytest.approx(0.42, abs=1e-12)

    def test_empty_gold(self):
        with pytest.raises(EmptyGold):
            combined_reward("x", "")

    def test_empty_prediction(self):
        r = combined_reward("", "tree")
        assert r.f1 == 0.0 and r.lev_sim == 0.0 and r.reward == 0.0

    def test_beta_zero_is_f1_only(self):
        cfg = RewardConfig(alpha=1.0, beta=0.0)
        assert combined_reward("blue tree", "the blue tree", cfg).reward == pytest.approx(0.8)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RewardConfig(alpha=0.5, beta=0.6)
        with pytest.raises(ValueError):
            RewardConfig(alpha=-0.1, beta=1.1)
        with pytest.raises(ValueError):
            RewardConfig(scaling=0.0)

    def test_breakdown_dict(self):
        d = combined_reward("a", "a").to_dict()
        assert set(d) == {"f1", "lev_distance", "lev_sim", "reward"}

    @given(st.text(min_size=1, max_size=30))
    def test_self_reward_exactly_one(self, a):
        assert combined_reward(a, a).reward == 1.0

    @given(short_text, short_text.filter(bool))
    def test_bounds_and_decomposition(self, pred, gold):
        r = combined_reward(pred, gold)
        assert 0.0 <= r.reward <= 1.0
        assert abs(r.reward - (0.3 * r.f1 + 0.7 * r.lev_sim)) <= 1e-12

    @settings(max_examples=200)
    @given(short_text, short_text.filter(bool))
    def test_matches_oracle(self, pred, gold):
        assert combined_reward(pred, gold).reward == pytest.approx(reward_oracle(pred, gold), abs=1e-12)
        assert token_f1(tokenize_answer(pred), tokenize_answer(gold)) == pytest.approx(f1_oracle(pred, gold))


class TestExtractFinalAnswer:
    def test_marker(self):
        assert extract_final_answer("Let me think. Answer: the bridge") == "the bridge"

    def test_identity(self):
        assert extract_final_answer("the bridge") == "the bridge"

    def test_last_marker_wins(self):
        assert extract_final_answer("Answer: A\nAnswer: B") == "B"

    def test_final_answer_marker(self):
        assert extract_final_answer("Answer: maybe\nFinal answer: the boat") == "the boat"

    def test_last_line(self):
        assert extract_final_answer("thinking...\n\nthe boat\n  ") == "the boat"

    def test_empty(self):
        assert extract_final_answer("") == ""
        assert extract_final_answer("   \n ") == ""
