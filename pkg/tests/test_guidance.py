import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import semshape.guidance as guidance_mod
from semshape.errors import ConfigurationError
from semshape.guidance import (
    InfluenceWeights,
    guidance_scale,
    influence_weights,
    observation_set,
    sample_camera,
    select_semantics,
    view_direction,
)

TWO_VIEWS = [("front prompt", 0.0, 0.0), ("side prompt", 90.0, 0.0)]


class TestObservationSet:
    def test_directions_unit(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        for e in obs.entries:
            assert abs(np.linalg.norm(e.direction) - 1.0) < 1e-9

    @pytest.mark.parametrize(
        "semantics,s0",
        [([], 70.0), ([("p", 0, 0)] * 9, 70.0), ([(" ", 0, 0)], 70.0), ([("p", 0, 0)], 0.0)],
    )
    def test_invalid(self, semantics, s0):
        with pytest.raises(ConfigurationError):
            observation_set(semantics, s0)


class TestInfluenceWeights:
    def test_aligned_camera_clamps(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(0.0, 0.0), obs)
        assert w.raw[0] == pytest.approx(1e6)
        assert w.order[0] == 0

    def test_orthogonal_gives_unit_weight(self):
        obs = observation_set([("p", 0.0, 0.0)], 70.0)
        w = influence_weights(view_direction(90.0, 0.0), obs)
        assert w.raw[0] == pytest.approx(1.0, abs=1e-12)

    def test_thirty_degree_values(self):
        # 1/(1-cos30) and 1/(1-cos60), evaluated directly from the formula
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(30.0, 0.0), obs)
        assert w.raw[0] == pytest.approx(7.464101615137755, rel=1e-9)
        assert w.raw[1] == pytest.approx(2.0, rel=1e-9)
        assert list(w.sorted_desc) == sorted(w.raw, reverse=True)

    def test_tie_breaks_by_lower_index(self):
        w = InfluenceWeights(
            raw=np.array([2.0, 5.0, 5.0]), order=None, sorted_desc=None
        )
        obs = observation_set([("a", 0, 0), ("b", 90, 0), ("c", 180, 0)], 70.0)
        got = influence_weights(np.array([0.0, 0.0, 1.0]), obs)  # equidistant: all w = 1
        assert list(got.order) == [0, 1, 2]


class TestGuidanceScale:
    def test_equidistant_zero(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        c = np.array([1.0, 1.0, 0.5])
        c /= np.linalg.norm(c)  # exactly equal dots by construction
        w = influence_weights(c, obs)
        assert guidance_scale(w, 70.0) == 0.0

    def test_thirty_degree_value(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(30.0, 0.0), obs)
        assert guidance_scale(w, 70.0) == pytest.approx(40.4145188, abs=1e-3)
        assert guidance_scale(w, 1.0) == pytest.approx(0.5773502691896257, abs=1e-4)

    def test_aligned_approaches_s0(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(0.0, 0.0), obs)
        assert abs(guidance_scale(w, 70.0) - 70.0) <= 1e-3 * 70.0

    def test_single_view_returns_s0(self):
        obs = observation_set([("only", 10.0, 5.0)], 42.0)
        w = influence_weights(view_direction(33.0, 0.0), obs)
        assert guidance_scale(w, 42.0) == 42.0

    def test_scale_free_in_weights(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(25.0, 10.0), obs)
        scaled = InfluenceWeights(w.raw * 37.5, w.order, w.sorted_desc * 37.5)
        assert guidance_scale(scaled, 1.0) == pytest.approx(guidance_scale(w, 1.0), rel=1e-12)
        assert select_semantics(scaled, obs) == select_semantics(w, obs)

    @settings(max_examples=60, deadline=None)
    @given(az=st.floats(-180, 180), el=st.floats(-89, 89))
    def test_bounded_property(self, az, el):
        obs = observation_set(TWO_VIEWS, 70.0)
        s = guidance_scale(influence_weights(view_direction(az, el), obs), 70.0)
        assert 0.0 <= s <= 70.0


class TestSelectSemantics:
    def test_at_view_one(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(90.0, 0.0), obs)
        assert select_semantics(w, obs) == "side prompt"

    def test_tie_takes_lower_index(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        c = np.array([1.0, 1.0, 0.0])
        c /= np.linalg.norm(c)
        w = influence_weights(c, obs)
        assert select_semantics(w, obs) == "front prompt"

    def test_thirty_degrees_picks_nearer(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        w = influence_weights(view_direction(30.0, 0.0), obs)
        assert select_semantics(w, obs) == "front prompt"

    def test_piecewise_constant_switch_at_bisector(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        picks = []
        for az in np.arange(0.0, 90.01, 0.5):
            w = influence_weights(view_direction(az, 0.0), obs)
            picks.append(select_semantics(w, obs))
        switches = sum(1 for a, b in zip(picks, picks[1:]) if a != b)
        assert switches == 1
        assert picks[0] == "front prompt" and picks[-1] == "side prompt"


def test_scale_continuity_along_great_circle():
    obs = observation_set(TWO_VIEWS, 70.0)
    azs = np.arange(-30.0, 120.0001, 0.1)
    s = np.array(
        [guidance_scale(influence_weights(view_direction(a, 0.0), obs), 70.0) for a in azs]
    )
    jumps = np.abs(np.diff(s))
    near_view = np.minimum(np.abs(azs), np.abs(azs - 90.0)) <= 1.0
    allowed = near_view[:-1] | near_view[1:]
    assert jumps[~allowed].max() < 0.5


class TestSampleCamera:
    def test_degenerate_offsets_recover_observation_view(self, monkeypatch):
        obs = observation_set(TWO_VIEWS, 70.0)
        monkeypatch.setattr(
            torch, "randint", lambda *a, **k: torch.zeros(1, dtype=torch.int64)
        )
        monkeypatch.setattr(
            torch, "rand", lambda *a, **k: torch.full((2,), 0.5, dtype=torch.float64)
        )
        cam, w, prompt, scale = sample_camera(obs, torch.Generator(), 2.5, 40.0, 16, 16)
        assert cam.azimuth == 0.0 and cam.elevation == 0.0
        assert prompt == "front prompt"
        assert abs(scale - 70.0) <= 1e-3 * 70.0

    def test_azimuth_offsets_uniform(self):
        obs = observation_set([("solo", 10.0, 0.0)], 70.0)
        gen = torch.Generator().manual_seed(123)
        offsets = []
        for _ in range(10_000):
            cam, *_ = sample_camera(obs, gen, 2.5, 40.0, 8, 8)
            offsets.append(cam.azimuth - 10.0)
        ks = stats.kstest(offsets, stats.uniform(loc=-50.0, scale=100.0).cdf)
        assert ks.statistic <= 0.02

    def test_elevation_clamped(self):
        obs = observation_set([("top", 0.0, 80.0)], 70.0)
        gen = torch.Generator().manual_seed(7)
        for _ in range(200):
            cam, *_ = sample_camera(obs, gen, 2.5, 40.0, 8, 8)
            assert -89.0 <= cam.elevation <= 89.0

    def test_scale_bounds_over_samples(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        gen = torch.Generator().manual_seed(3)
        for _ in range(500):
            *_, scale = sample_camera(obs, gen, 2.5, 40.0, 8, 8)
            assert 0.0 <= scale <= 70.0

    def test_deterministic_stream(self):
        obs = observation_set(TWO_VIEWS, 70.0)
        a = [
            sample_camera(obs, torch.Generator().manual_seed(5), 2.5, 40.0, 8, 8)[0].azimuth
            for _ in range(1)
        ]
        b = [
            sample_camera(obs, torch.Generator().manual_seed(5), 2.5, 40.0, 8, 8)[0].azimuth
            for _ in range(1)
        ]
        assert a == b
