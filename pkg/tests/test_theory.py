import numpy as np
import pytest

from abgame.errors import ParameterError
from abgame.models import linear_model
from abgame.numeric import make_rng
from abgame.theory import (
    BoxQ,
    bdpl_equilibrium_trend,
    calibrate_band,
    equilibrium_point,
    make_scenario,
    verify_risk_identity,
    verify_uniform_flip,
)


class TestCalibrateBand:
    def test_mass_hit(self):
        s = linear_model([1.0, 0.0])
        w, m = calibrate_band(s, BoxQ(2, -1, 1), 0.3, make_rng(0), n=200_000)
        # along x1 uniform on [-1, 1] the band |x1| <= w has mass w
        assert abs(w - 0.3) < 0.01 and abs(m - 0.3) < 0.005

    def test_zero_mass(self):
        assert calibrate_band(linear_model([1.0]), BoxQ(1), 0.0, make_rng(0), n=100) == (0.0, 0.0)

    def test_invalid_mass(self):
        with pytest.raises(ParameterError):
            calibrate_band(linear_model([1.0]), BoxQ(1), 1.0, make_rng(0), n=100)


class TestRiskIdentity:
    def test_holds_at_half(self):
        rep = verify_risk_identity(make_scenario(0.1))
        assert rep["passed"], rep
        assert rep["claim"] == "risk_identity" and rep["budget"] == 100_000

    def test_negative_control_fails(self):
        rep = verify_risk_identity(make_scenario(0.1, flip_prob=0.9))
        assert not rep["passed"]

    def test_budget_too_small(self):
        with pytest.raises(ParameterError):
            verify_risk_identity(make_scenario(0.1, budget=1000, calib_budget=100_000))

    def test_eps_range(self):
        with pytest.raises(ParameterError):
            make_scenario(0.5)


class TestEquilibrium:
    def test_point_on_diagonal(self):
        p = equilibrium_point(make_scenario(0.2))
        assert abs(p.b - 0.8) <= 0.01 and abs(p.a - 0.8) <= 0.01

    def test_zero_eps_is_corner(self):
        p = equilibrium_point(make_scenario(0.0, budget=10_000, calib_budget=10_000), coin_reps=1000)
        assert p.b == 1.0 and p.a == 1.0


class TestUniformFlip:
    def test_identity_control(self):
        rep = verify_uniform_flip(0.0, n_queries=2000, test_size=20_000)
        assert rep["estimate"]["disagreement"] <= 0.02

    def test_below_half_extracts(self):
        rep = verify_uniform_flip(0.3, n_queries=5000, test_size=20_000)
        assert rep["passed"], rep

    def test_above_half_inverts(self):
        rep = verify_uniform_flip(0.7, n_queries=5000, test_size=20_000)
        assert rep["passed"], rep

    def test_half_rejected(self):
        with pytest.raises(ParameterError):
            verify_uniform_flip(0.5)


class TestTrend:
    def test_validation(self):
        with pytest.raises(ParameterError):
            bdpl_equilibrium_trend([100, 50])
        with pytest.raises(ParameterError):
            bdpl_equilibrium_trend([100], seeds=0)

    def test_small_run_structure(self):
        rep = bdpl_equilibrium_trend([200, 400], seeds=2, test_size=2000, dim=3)
        assert rep.sizes == [200, 400] and len(rep.points) == 2 and len(rep.gaps[0]) == 2
        d = rep.to_dict()
        assert d["claim"] == "bdpl_trend" and d["passed"] == rep.monotone
        for p in rep.points:
            assert 0 <= p.b <= 1 and 0 <= p.a <= 1

    def test_identity_control_reaches_corner(self):
        from abgame.defense import Identity

        rep = bdpl_equilibrium_trend([500, 2000], seeds=2, test_size=5000, dim=2, strategy=Identity())
        assert all(p.b == 1.0 for p in rep.points)
        assert rep.points[-1].a >= 0.97
        assert np.all(np.diff(rep.median_gaps) <= 0)
