import numpy as np
import pytest

from bitgrad.bbc import BbcEstimator, MlpClassifier
from bitgrad.errors import ConfigError, NumericError
from bitgrad.estimators import sign_binarize

from oracles import numeric_grad_array

f32 = lambda x: np.asarray(x, dtype=np.float32)


def one_layer(a0, a1, b0=0.0, b1=0.0, activation="none"):
    clf = MlpClassifier(num_layers=1, activation=activation)
    clf.w_out.value[:] = [a0, a1]
    clf.b_out.value[:] = [b0, b1]
    return clf


class TestClassify:
    def test_logits_and_decision_positive(self):
        clf = one_layer(-1.0, 1.0)
        z0, z1 = clf.logits(f32([0.5]))
        np.testing.assert_allclose([z0[0], z1[0]], [-0.5, 0.5])
        assert clf.classify(f32([0.5]))[0] == 1.0

    def test_decision_negative(self):
        clf = one_layer(-1.0, 1.0)
        assert clf.classify(f32([-0.3]))[0] == -1.0

    def test_tie_breaks_to_plus_one(self):
        clf = one_layer(-1.0, 1.0)
        assert clf.classify(f32([0.0]))[0] == 1.0

    def test_output_is_binary(self):
        rng = np.random.default_rng(0)
        clf = MlpClassifier(num_layers=2, hidden_width=16, activation="tanh", rng=rng)
        out = clf.classify(f32(rng.standard_normal((4, 5))))
        assert set(np.unique(out)) <= {-1.0, 1.0}

    def test_argmax_invariant_under_monotone_rescaling(self):
        # applying the same strictly increasing map to both logits (the
        # 1-layer tanh configuration does exactly this) never changes argmax
        rng = np.random.default_rng(3)
        w = f32(rng.standard_normal(200))
        plain = one_layer(-0.6, 0.4, 0.05, -0.1)
        squashed = one_layer(-0.6, 0.4, 0.05, -0.1, activation="tanh")
        np.testing.assert_array_equal(plain.classify(w), squashed.classify(w))

    def test_sign_equivalence_of_default_init(self):
        clf = MlpClassifier()  # a1 = +0.25, a0 = -0.25, zero biases
        rng = np.random.default_rng(1)
        w = f32(rng.standard_normal(500))
        w = w[np.abs(w) > 1e-8]
        np.testing.assert_array_equal(clf.classify(w), sign_binarize(w))
        assert clf.classify(f32([0.0]))[0] == sign_binarize(f32([0.0]))[0]

    def test_nonfinite_logits_abort(self):
        clf = one_layer(-0.25, 0.25)
        clf.w_out.value[1] = np.inf
        with pytest.raises(NumericError):
            clf.classify(f32([1.0]))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            MlpClassifier(num_layers=3)
        with pytest.raises(ConfigError):
            MlpClassifier(activation="gelu")
        with pytest.raises(ConfigError):
            MlpClassifier(num_layers=2, hidden_width=0)


class TestBackward:
    def test_chain_through_linear_stages(self):
        clf = one_layer(-0.25, 0.25)
        grad = clf.backward(f32([0.7]), f32([0.3]))
        # dL/dWtilde = 2 * 0.3 = 0.6; dS/dw = a1 - a0 = 0.5
        assert grad[0] == pytest.approx(0.3)

    def test_zero_upstream(self):
        clf = one_layer(-0.25, 0.25)
        assert clf.backward(f32([0.7]), f32([0.0]))[0] == 0.0

    def test_backward_equals_coefficient_times_upstream_everywhere(self):
        clf = one_layer(-0.4, 0.35)
        coeff = clf.effective_coefficient()
        rng = np.random.default_rng(4)
        w = f32(rng.uniform(-3, 3, 64))  # includes |w| > 1: no clipping region
        up = f32(rng.standard_normal(64))
        np.testing.assert_allclose(clf.backward(w, up), up * coeff, rtol=1e-6)

    @pytest.mark.parametrize("layers,activation", [
        (1, "tanh"), (2, "none"), (2, "tanh"), (2, "relu")])
    def test_grad_matches_finite_differences_of_surrogate(self, layers, activation):
        rng = np.random.default_rng(11)
        clf = MlpClassifier(num_layers=layers, hidden_width=12,
                            activation=activation, rng=rng)
        pts = [p for p in rng.uniform(-2, 2, 120) if abs(p) > 1e-2][:100]
        for p in pts:
            # float64 probe points keep the fd oracle above float32 noise
            x = np.array([p])
            fd = (2 * clf.margin(np.array([p + 1e-3]))[0]
                  - 2 * clf.margin(np.array([p - 1e-3]))[0]) / 2e-3
            an = clf.backward(x, np.array([1.0]))[0]
            if activation == "relu" and abs(fd - an) > 1e-3:
                # relu kinks sit at data-dependent preactivation zeros; skip
                pre = x[0] * clf.w_in.value + clf.b_in.value
                if np.any(np.abs(pre) < 2e-3 * np.abs(clf.w_in.value)):
                    continue
            assert abs(fd - an) / max(abs(fd), abs(an), 1e-6) <= 1e-3, \
                f"layers={layers} act={activation} x={p}: fd={fd} an={an}"


class TestThetaGrad:
    def test_single_element_contributions(self):
        clf = one_layer(-0.25, 0.25)
        clf.accumulate_theta_grad(f32([0.5]), f32([1.0]))
        np.testing.assert_allclose(clf.w_out.grad, [-1.0, 1.0])  # dS/da1 = w
        np.testing.assert_allclose(clf.b_out.grad, [-2.0, 2.0])

    def test_zero_upstream_gives_zero(self):
        clf = one_layer(-0.25, 0.25)
        clf.accumulate_theta_grad(f32([0.5, -0.3]), f32([0.0, 0.0]))
        np.testing.assert_array_equal(clf.w_out.grad, [0.0, 0.0])

    def test_two_elements_sum_linearly(self):
        w = f32([0.5, -1.2])
        up = f32([0.3, 0.7])
        joint = one_layer(-0.25, 0.25)
        joint.accumulate_theta_grad(w, up)
        acc_w = np.zeros(2, np.float32)
        for i in range(2):
            single = one_layer(-0.25, 0.25)
            single.accumulate_theta_grad(w[i:i + 1], up[i:i + 1])
            acc_w += single.w_out.grad
        np.testing.assert_allclose(joint.w_out.grad, acc_w, rtol=1e-6)

    @pytest.mark.parametrize("layers,activation", [
        (1, "none"), (1, "tanh"), (2, "none"), (2, "tanh")])
    def test_matches_finite_differences_over_theta(self, layers, activation):
        rng = np.random.default_rng(21)
        clf = MlpClassifier(num_layers=layers, hidden_width=6,
                            activation=activation, rng=rng)
        w = rng.uniform(-1, 1, 5)  # float64: fd oracle runs above f32 noise
        up = rng.standard_normal(5)
        clf.accumulate_theta_grad(f32(w), f32(up))
        for param in clf.params():
            def objective(v, param=param):
                saved = param.value
                param.value = v
                out = float((2 * up * clf.margin(w)).sum())
                param.value = saved
                return out
            num = numeric_grad_array(objective, param.value.astype(np.float64), h=1e-4)
            np.testing.assert_allclose(param.grad, num, rtol=2e-3, atol=1e-4)

    def test_accumulation_is_deterministic(self):
        rng = np.random.default_rng(31)
        w = f32(rng.standard_normal(1000))
        up = f32(rng.standard_normal(1000))
        grads = []
        for _ in range(2):
            clf = MlpClassifier(num_layers=2, hidden_width=8, activation="tanh",
                                rng=np.random.default_rng(5))
            clf.accumulate_theta_grad(w, up)
            grads.append(np.concatenate([p.grad.ravel() for p in clf.params()]))
        np.testing.assert_array_equal(grads[0], grads[1])


class TestEffectiveCoefficient:
    def test_unit_at_default_init(self):
        assert one_layer(-0.25, 0.25).effective_coefficient() == pytest.approx(1.0)

    def test_stabilized_regime_value(self):
        assert one_layer(-0.375, 0.375).effective_coefficient() == pytest.approx(1.5)

    def test_degenerate_classifier(self):
        assert one_layer(0.1, 0.1).effective_coefficient() == pytest.approx(0.0)

    def test_two_layer_probe_average_starts_at_one(self):
        for act in ("none", "tanh"):
            clf = MlpClassifier(num_layers=2, hidden_width=32, activation=act,
                                rng=np.random.default_rng(9))
            assert clf.effective_coefficient() == pytest.approx(1.0, abs=1e-4)


class TestBbcEstimator:
    def test_binarize_and_grad_route(self):
        clf = one_layer(-0.25, 0.25)
        e = BbcEstimator(clf)
        w = f32([0.4, -0.2])
        np.testing.assert_array_equal(e.binarize(w), [1.0, -1.0])
        up = f32([1.0, 1.0])
        np.testing.assert_allclose(e.weight_grad(w, up), up)  # coefficient 1
        assert np.any(clf.w_out.grad != 0)  # theta grads deposited

    def test_train_theta_flag_freezes_classifier(self):
        clf = one_layer(-0.25, 0.25)
        e = BbcEstimator(clf, train_theta=False)
        e.weight_grad(f32([0.4]), f32([1.0]))
        np.testing.assert_array_equal(clf.w_out.grad, [0.0, 0.0])
