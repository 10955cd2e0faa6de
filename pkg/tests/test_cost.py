from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from msf import (
    ConfigError,
    CostModelParams,
    StageCost,
    flops_cost,
    speedup_ratio,
    token_count,
)


class TestParams:
    def test_coefficients(self):
        p = CostModelParams(depth=2, hidden_width=10)
        assert p.linear_coeff == 2400
        assert p.attention_coeff == 40

    def test_validation(self):
        with pytest.raises(ConfigError):
            CostModelParams(depth=0, hidden_width=4)
        with pytest.raises(ConfigError):
            CostModelParams(depth=1, hidden_width=0)
        with pytest.raises(ConfigError):
            StageCost(tokens=0, steps=1, cfg_doubled=False)
        with pytest.raises(ConfigError):
            StageCost(tokens=1, steps=0, cfg_doubled=False)


class TestFlopsCost:
    def test_unit_case(self):
        # one token, one step, no guidance: depth * (a + b)
        p = CostModelParams(depth=3, hidden_width=7)
        got = flops_cost(p, [StageCost(1, 1, False)])
        assert got == 3 * (24 * 49 + 4 * 7)

    def test_cfg_doubles(self):
        p = CostModelParams(depth=2, hidden_width=4)
        base = flops_cost(p, [StageCost(5, 3, False)])
        assert flops_cost(p, [StageCost(5, 3, True)]) == 2 * base

    def test_stages_sum(self):
        p = CostModelParams(depth=2, hidden_width=4)
        s1, s2 = StageCost(3, 2, True), StageCost(9, 5, False)
        assert flops_cost(p, [s1, s2]) == flops_cost(p, [s1]) + flops_cost(p, [s2])

    @given(steps=st.integers(1, 50), depth=st.integers(1, 16))
    def test_linear_in_steps_and_depth(self, steps, depth):
        width = 6
        one = flops_cost(
            CostModelParams(1, width), [StageCost(5, 1, False)]
        )
        got = flops_cost(CostModelParams(depth, width), [StageCost(5, steps, False)])
        assert got == steps * depth * one

    @given(tokens=st.integers(1, 200))
    def test_quadratic_second_difference_in_tokens(self, tokens):
        # f(T) = L (a T + b T^2) has constant second difference 2 L b
        p = CostModelParams(depth=3, hidden_width=5)

        def f(t):
            return flops_cost(p, [StageCost(t, 1, False)])

        assert f(tokens + 2) - 2 * f(tokens + 1) + f(tokens) == 2 * 3 * (4 * 5)


class TestTokenCount:
    def test_paper_scale_arithmetic(self):
        assert token_count(512, 8, 4) == 256
        assert token_count(512, 8, 2) == 1024
        assert token_count(192, 8, 2) == 144

    def test_identity_codec(self):
        assert token_count(16, 1, 2) == 64

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError, match="does not divide"):
            token_count(512, 7, 2)
        with pytest.raises(ConfigError, match="does not divide"):
            token_count(512, 8, 3)
        with pytest.raises(ConfigError):
            token_count(0, 1, 1)


class TestSpeedupRatio:
    def full_width_proxy(self):
        return CostModelParams(depth=28, hidden_width=1152)

    def test_exact_fraction(self):
        p = CostModelParams(depth=1, hidden_width=1)
        # a = 24, b = 4: one token costs 28 per pass
        r = speedup_ratio(p, [StageCost(1, 4, False)], [StageCost(1, 2, False)])
        assert r == Fraction(2, 1)

    def test_two_scale_schedule_beats_single_scale(self):
        # coarse stage runs at the 192-pixel config's token count, the
        # refinement stage at full resolution without guidance
        p = self.full_width_proxy()
        baseline = [StageCost(token_count(512, 8, 2), 100, True)]
        candidate = [
            StageCost(token_count(192, 8, 2), 100, True),
            StageCost(token_count(512, 8, 2), 20, False),
        ]
        r = speedup_ratio(p, baseline, candidate)
        assert 3.8 <= float(r) <= 5.0

    def test_ratio_independent_of_depth_not_width(self):
        baseline = [StageCost(1024, 100, True)]
        candidate = [StageCost(144, 100, True), StageCost(1024, 20, False)]
        deep = speedup_ratio(CostModelParams(28, 1152), baseline, candidate)
        shallow = speedup_ratio(CostModelParams(1, 1152), baseline, candidate)
        thin = speedup_ratio(CostModelParams(28, 64), baseline, candidate)
        assert deep == shallow
        assert deep != thin
