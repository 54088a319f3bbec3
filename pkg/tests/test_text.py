import itertools

import numpy as np
import pytest

from courierlab.env import GAME_IDENTITIES, Identity, Movement, Role
from courierlab.text import (
    Description,
    ManualParseError,
    canonical_parse,
    default_banks,
    load_banks,
    noisy_parse,
    oracle_parse,
    parse_with_banks,
    render_manual,
)

from test_env import make_params


@pytest.fixture(scope="module")
def banks():
    return default_banks()


class TestBanks:
    def test_every_attribute_has_three_phrasings(self, banks):
        for ident in GAME_IDENTITIES:
            assert len(banks.identity_phrases[ident]) >= 3
        for mv in Movement:
            assert len(banks.movement_phrases[mv]) >= 3
        for rl in Role:
            assert len(banks.role_phrases[rl]) >= 3

    def test_both_template_orders_present(self, banks):
        assert any(t.startswith("the {identity}") for t in banks.templates)
        assert any(t.startswith("{role}") for t in banks.templates)

    def test_reload_from_explicit_path(self, tmp_path):
        src = default_banks()
        # round-trip through a user-edited copy
        from importlib import resources

        text = resources.files("courierlab").joinpath("data/synonyms.txt").read_text()
        p = tmp_path / "banks.txt"
        p.write_text(text + "\n# trailing comment\n")
        reloaded = load_banks(p)
        assert reloaded.identity_phrases == src.identity_phrases
        assert reloaded.templates == src.templates

    def test_vocabulary_is_closed_and_padded(self, banks):
        vocab = banks.word_vocabulary()
        assert vocab[0] == "<pad>"
        assert len(vocab) == len(set(vocab))
        assert 60 <= len(vocab) <= 200


class TestRenderManual:
    def test_deterministic(self):
        params = make_params()
        assert render_manual(params, 7) == render_manual(params, 7)

    def test_membership_not_string_equality(self, banks):
        params = make_params(
            movements=(Movement.CHASING, Movement.FLEEING, Movement.IMMOBILE)
        )
        manual = render_manual(params, 3)
        for desc in manual.descriptions:
            ident, movement, role = desc.truth
            padded = f" {desc.text} "
            assert any(f" {p} " in padded for p in banks.identity_phrases[ident])
            assert any(f" {p} " in padded for p in banks.movement_phrases[movement])
            assert any(f" {p} " in padded for p in banks.role_phrases[role])

    def test_channel_map_is_permutation_and_truth_consistent(self):
        params = make_params()
        manual = render_manual(params, 11)
        assert sorted(manual.channel_map) == [1, 2, 3]
        for desc, channel in zip(manual.descriptions, manual.channel_map):
            spec = params.entities[channel - 1]
            assert desc.truth == (spec.identity, spec.movement, spec.role)

    def test_synonym_coverage_over_seeds(self, banks):
        params = make_params()  # airplane is entity one
        seen = set()
        for seed in range(1000):
            manual = render_manual(params, seed)
            desc = manual.description_for_channel(1)
            padded = f" {desc.text} "
            for p in banks.identity_phrases[Identity.AIRPLANE]:
                if f" {p} " in padded:
                    seen.add(p)
        assert seen == set(banks.identity_phrases[Identity.AIRPLANE])

    def test_channel_map_uniform_over_seeds(self):
        params = make_params()
        counts = {}
        n = 3000
        for seed in range(n):
            cm = render_manual(params, seed).channel_map
            counts[cm] = counts.get(cm, 0) + 1
        assert len(counts) == 6
        expectation = n / 6
        sigma = (n * (1 / 6) * (5 / 6)) ** 0.5
        for v in counts.values():
            assert abs(v - expectation) < 3 * sigma + 1

    def test_every_rendered_word_in_vocabulary(self, banks):
        vocab = set(banks.word_vocabulary())
        rng = np.random.default_rng(5)
        for seed in range(200):
            idents = tuple(
                GAME_IDENTITIES[i] for i in rng.choice(12, 3, replace=False)
            )
            params = make_params(identities=idents)
            for desc in render_manual(params, seed).descriptions:
                for word in desc.text.split():
                    assert word in vocab, word

    def test_description_length_bound(self, banks):
        bound = banks.max_description_words()
        rng = np.random.default_rng(6)
        for seed in range(300):
            idents = tuple(
                GAME_IDENTITIES[i] for i in rng.choice(12, 3, replace=False)
            )
            params = make_params(identities=idents)
            for desc in render_manual(params, seed).descriptions:
                assert len(desc.text.split()) <= bound


class TestOracleParse:
    def test_paper_example_format(self):
        d = Description(text="x", truth=(Identity.MAGE, Movement.FLEEING, Role.GOAL))
        assert oracle_parse(d) == (Identity.MAGE, Movement.FLEEING, Role.GOAL)
        assert canonical_parse(d) == "mage fleeing goal"

    def test_second_format(self):
        d = Description(text="x", truth=(Identity.DOG, Movement.CHASING, Role.MESSAGE))
        assert canonical_parse(d) == "dog chasing message"

    def test_exact_on_full_cross_product(self, banks):
        # every (identity, movement, role) truth over every template and
        # phrasing choice parses back exactly via bank grounding
        for ident, movement, role in itertools.product(
            GAME_IDENTITIES[:4], Movement, Role
        ):
            for seed in range(6):
                rng = np.random.default_rng(seed)
                text = banks.render((ident, movement, role), rng)
                assert parse_with_banks(text, banks) == (ident, movement, role)

    def test_round_trip_parse_render_parse(self):
        params = make_params()
        manual = render_manual(params, 2)
        for desc in manual.descriptions:
            triple = oracle_parse(desc)
            again = parse_with_banks(desc.text)
            assert triple == again


class TestNoisyParse:
    def d(self):
        return Description(
            text="x", truth=(Identity.QUEEN, Movement.IMMOBILE, Role.ENEMY)
        )

    def test_zero_error_is_truth(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            assert noisy_parse(self.d(), 0.0, rng) == self.d().truth

    def test_full_error_is_always_wrong_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ident, movement, role = noisy_parse(self.d(), 1.0, rng)
            assert ident != Identity.QUEEN
            assert ident in GAME_IDENTITIES
            assert (movement, role) == (Movement.IMMOBILE, Role.ENEMY)

    def test_error_rate_calibration(self):
        # all-three-correct rate under 0.035 per-description error is
        # (1 - 0.035)^3 ~ 0.898
        rng = np.random.default_rng(2)
        n = 10_000
        good = 0
        d = self.d()
        for _ in range(n):
            ok = True
            for _ in range(3):
                ok &= noisy_parse(d, 0.035, rng)[0] == Identity.QUEEN
            good += ok
        rate = good / n
        expected = (1 - 0.035) ** 3
        sigma = (expected * (1 - expected) / n) ** 0.5
        assert abs(rate - expected) < 4 * sigma
        assert 0.86 <= rate <= 0.93

    def test_error_range_validated(self):
        with pytest.raises(ValueError):
            noisy_parse(self.d(), 1.5, np.random.default_rng(0))


class TestParseWithBanks:
    def test_rejects_ungroundable_text(self):
        with pytest.raises(ManualParseError):
            parse_with_banks("a sentence about nothing in particular")

    def test_rejects_double_identity(self):
        with pytest.raises(ManualParseError):
            parse_with_banks("the wizard and the hound closing in on you is a deadly opponent")

    def test_accepts_canonical_words(self):
        triple = parse_with_banks("the mage fleeing is the goal")
        assert triple == (Identity.MAGE, Movement.FLEEING, Role.GOAL)
