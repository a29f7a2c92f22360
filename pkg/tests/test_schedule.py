import math

import numpy as np
import pytest

from core.helpers.schedule import Schedule


@pytest.fixture(params=["cosine", "linear", "vp-beta"])
def schedule(request) -> Schedule:
    return Schedule(request.param)


class TestAlpha:
    def test_cosine_endpoints(self, cosine):
        assert cosine.alpha(0.0) == 1.0
        assert cosine.alpha(1.0) == 0.0

    def test_cosine_midpoint(self, cosine):
        assert cosine.alpha(0.5) == pytest.approx(0.70710678, abs=1e-8)

    def test_linear_endpoints(self):
        s = Schedule("linear")
        assert s.alpha(0.0) == 1.0
        assert s.alpha(1.0) == 0.0

    def test_vp_beta_terminal_is_small(self):
        s = Schedule("vp-beta")
        assert s.alpha(0.0) == 1.0
        assert s.alpha(1.0) <= 1e-4

    def test_strictly_decreasing(self, schedule):
        t = np.linspace(0.0, 1.0, 201)
        assert np.all(np.diff(schedule.alpha(t)) < 0)

    @pytest.mark.parametrize("t", [-0.1, 1.5, float("nan")])
    def test_out_of_range_raises(self, cosine, t):
        with pytest.raises(Schedule.DomainError):
            cosine.alpha(t)

    def test_scalar_in_scalar_out(self, cosine):
        assert isinstance(cosine.alpha(0.3), float)
        assert cosine.alpha(np.array([0.3, 0.4])).shape == (2,)

    def test_weak_vp_beta_rejected(self):
        with pytest.raises(ValueError, match="a\\(1\\)"):
            Schedule("vp-beta", params={"beta_min": 0.1, "beta_max": 5.0})

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="Unsupported schedule kind"):
            Schedule("sigmoid")


class TestAlphaDot:
    def test_linear_is_constant(self):
        s = Schedule("linear")
        assert s.alpha_dot(0.2) == -1.0
        assert s.alpha_dot(0.9) == -1.0

    def test_cosine_values(self, cosine):
        assert cosine.alpha_dot(0.0) == 0.0
        assert cosine.alpha_dot(0.5) == pytest.approx(-1.11072, abs=1e-5)

    @pytest.mark.parametrize("t", [0.1, 0.35, 0.6, 0.85, 0.99])
    def test_matches_central_difference(self, schedule, t):
        h = 1e-6
        fd = (schedule.alpha(t + h) - schedule.alpha(t - h)) / (2 * h)
        assert schedule.alpha_dot(t) == pytest.approx(fd, rel=1e-6)

    def test_rejects_t_one(self, cosine):
        with pytest.raises(Schedule.DomainError):
            cosine.alpha_dot(1.0)


class TestGammaSq:
    def test_endpoints(self, schedule):
        assert schedule.gamma_sq(0.0) == 0.0
        assert schedule.gamma_sq(1.0) == pytest.approx(1.0, abs=1e-8)

    def test_cosine_midpoint(self, cosine):
        assert cosine.gamma_sq(0.5) == pytest.approx(0.5)

    def test_identity_with_alpha(self, schedule):
        t = np.linspace(0.0, 1.0, 51)
        np.testing.assert_allclose(schedule.gamma_sq(t), 1.0 - schedule.alpha(t) ** 2, atol=1e-15)
        assert np.all((schedule.gamma_sq(t) >= 0) & (schedule.gamma_sq(t) <= 1))

    @pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
    def test_derivative(self, schedule, t):
        h = 1e-6
        fd = (schedule.gamma_sq(t + h) - schedule.gamma_sq(t - h)) / (2 * h)
        assert schedule.d_gamma_sq(t) == pytest.approx(fd, rel=1e-6)


class TestBeta:
    def test_vp_beta_closed_form(self):
        s = Schedule("vp-beta", params={"beta_min": 0.1, "beta_max": 40.0})
        assert s.beta(0.5) == pytest.approx(0.1 + 0.5 * 39.9)

    @pytest.mark.parametrize("t", [0.1, 0.4, 0.7])
    def test_consistent_with_alpha(self, schedule, t):
        assert schedule.beta(t) == pytest.approx(-2.0 * schedule.alpha_dot(t) / schedule.alpha(t), rel=1e-10)

    def test_cosine_rate(self, cosine):
        assert cosine.beta(0.5) == pytest.approx(math.pi * math.tan(math.pi / 4))


class TestToDict:
    def test_round_trips_fields(self):
        s = Schedule("vp-beta", params={"beta_min": 0.2, "beta_max": 30.0}, t_terminal=0.99)
        assert s.to_dict() == {"kind": "vp-beta", "params": {"beta_min": 0.2, "beta_max": 30.0}, "t_terminal": 0.99}
