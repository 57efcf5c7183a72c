import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bitgrad import estimators as est
from bitgrad.errors import ConfigError

f32 = lambda x: np.asarray(x, dtype=np.float32)


class TestSignBinarize:
    def test_zero_maps_to_plus_one(self):
        assert est.sign_binarize(f32([0.0]))[0] == 1.0

    def test_negative(self):
        assert est.sign_binarize(f32([-0.3]))[0] == -1.0

    def test_tiny_positive(self):
        assert est.sign_binarize(f32([1e-9]))[0] == 1.0

    @settings(max_examples=50, derandomize=True)
    @given(st.lists(st.floats(-10, 10, width=32), min_size=1, max_size=20))
    def test_output_is_binary_and_idempotent(self, xs):
        x = f32(xs)
        b = est.sign_binarize(x)
        assert set(np.unique(b)) <= {-1.0, 1.0}
        np.testing.assert_array_equal(est.sign_binarize(b), b)


class TestSteGrad:
    def test_passthrough_inside_clip(self):
        assert est.ste_grad(f32([0.5]), f32([1.0]))[0] == 1.0

    def test_zero_outside_clip(self):
        assert est.ste_grad(f32([1.5]), f32([1.0]))[0] == 0.0

    def test_boundary_inclusive(self):
        assert est.ste_grad(f32([-1.0]), f32([2.0]))[0] == 2.0


class TestSoftSurrogates:
    def test_tanh_grad_at_zero(self):
        e = est.TanhSoft(k=2, t=3)
        assert abs(e.surrogate_grad(f32([0.0]))[0] - 6.0) < 1e-6

    def test_root_reduces_to_identity_at_one(self):
        e = est.RootSoft(a_exp=1.0)
        assert abs(e.surrogate(f32([-0.5]))[0] - (-0.5)) < 1e-7
        assert abs(e.surrogate_grad(f32([0.7]))[0] - 1.0) < 1e-7

    def test_poly_point_values(self):
        e = est.PolySoft(r=1, q=1)
        x = 1 / math.sqrt(3)
        assert abs(e.surrogate(f32([x]))[0] - 0.75) < 1e-6
        expect = math.sqrt(3) - 1.5 / math.sqrt(3)
        assert abs(e.surrogate_grad(f32([x]))[0] - expect) < 1e-6

    @pytest.mark.parametrize("maker", [
        lambda: est.TanhSoft(k=1.3, t=2.5, schedule=False),
        lambda: est.TanhSoft(k=1.0, t=10.0, schedule=False),
        lambda: est.PolySoft(r=1.2, q=0.8),
        lambda: est.RootSoft(a_exp=0.8),
    ])
    def test_grad_matches_central_differences(self, maker):
        # 100 random points in [-2, 2], h=1e-3, 1e-3 kink exclusion at 0
        e = maker()
        rng = np.random.default_rng(2024)
        pts = [p for p in rng.uniform(-2, 2, 140) if abs(p) > 1e-3][:100]
        assert len(pts) == 100
        for p in pts:
            x = np.array([p])
            fd = (e.surrogate(x + 1e-3)[0] - e.surrogate(x - 1e-3)[0]) / 2e-3
            an = e.surrogate_grad(x)[0]
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) <= 1e-3, \
                f"{e.name} at x={p}: fd={fd} analytic={an}"

    def test_weight_grad_is_upstream_times_slope(self):
        e = est.PolySoft(r=1, q=1)
        w = f32([0.2, -0.4])
        up = f32([2.0, 3.0])
        np.testing.assert_allclose(e.weight_grad(w, up), up * e.surrogate_grad(w))

    def test_forward_still_hard_sign(self):
        for e in (est.Ste(), est.TanhSoft(), est.PolySoft(), est.RootSoft(),
                  est.SteUnclipped()):
            x = f32([-0.7, 0.0, 0.3])
            np.testing.assert_array_equal(e.binarize(x), [-1.0, 1.0, 1.0])

    def test_tanh_schedule_endpoints(self):
        e = est.TanhSoft()
        e.epoch_update(0, 11)
        assert abs(e.t - 1.0) < 1e-6 and abs(e.k - 1.0) < 1e-6
        e.epoch_update(10, 11)
        assert abs(e.t - 10.0) < 1e-5
        assert abs(e.k - 1.0) < 1e-6  # k = max(1/t, 1)

    def test_parameter_validation(self):
        with pytest.raises(ConfigError):
            est.TanhSoft(k=-1)
        with pytest.raises(ConfigError):
            est.PolySoft(q=0)
        with pytest.raises(ConfigError):
            est.RootSoft(a_exp=1.5)
        with pytest.raises(ConfigError):
            est.RootSoft(a_exp=float("nan"))


class TestScaleFactor:
    def test_mean_absolute_value(self):
        assert est.scale_factor(f32([1, -2, 3, -4]))[0] == pytest.approx(2.5)

    def test_all_pm_one(self):
        w = f32(np.random.default_rng(0).choice([-1.0, 1.0], size=(3, 8)))
        np.testing.assert_allclose(est.scale_factor(w), 1.0)

    def test_against_direct_sum(self):
        rng = np.random.default_rng(1)
        w = f32(rng.standard_normal(64))
        expect = sum(abs(float(v)) for v in w) / 64
        assert est.scale_factor(w)[0] == pytest.approx(expect, abs=1e-6)

    def test_per_channel_layout(self):
        w = f32(np.stack([np.full((2, 2), 0.5), np.full((2, 2), -2.0)]))
        np.testing.assert_allclose(est.scale_factor(w), [0.5, 2.0])

    def test_zero_channel_warns_and_collapses(self, caplog):
        w = f32(np.zeros((1, 4)))
        with caplog.at_level(logging.WARNING):
            alpha = est.scale_factor(w)
        assert alpha[0] == 0.0
        assert any("all-zero" in r.message for r in caplog.records)

    @settings(max_examples=40, derandomize=True)
    @given(st.integers(-6, 6),
           st.lists(st.integers(-16, 16), min_size=1, max_size=12))
    def test_one_homogeneous_exact_for_power_of_two_scales(self, exp, ints):
        # powers of two and small integers stay exact in float32
        c = float(2.0 ** exp)
        w = f32(ints)
        lhs = est.scale_factor(c * w)
        rhs = abs(c) * est.scale_factor(w)
        np.testing.assert_array_equal(lhs, rhs)
