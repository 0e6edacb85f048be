import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import laplace_bin_mass, naive_dense_forward
from tofc.density import (
    LN2,
    SCALE_FLOOR,
    EntropyModel,
    FactorizedDensity,
    OffsetTape,
    laplace_bits,
    laplace_log_pmf,
    laplace_pmf,
    quantize_ste,
    round_half_away,
    softplus_inverse,
)
from tofc.errors import InvalidArgumentError
from tofc.numerics import autodiff as ad
from tofc.numerics.autodiff import Tensor
from tofc.numerics.nets import ParamStore


def _model(d_v=16, d_z=None, seed=0):
    store = ParamStore()
    return store, EntropyModel(store, "m", d_v, d_z, rng=np.random.default_rng(seed))


def _layers32(net):
    return [
        (l.weight.data.astype(np.float32).tolist(), l.bias.data.astype(np.float32).tolist(), l.activation)
        for l in net.layers
    ]


class TestHyperNets:
    def test_full_width_dimension(self):
        _, m = _model(1152)
        assert m.d_z == 72
        assert [l.weight.data.shape for l in m.h_a.layers] == [(288, 1152), (72, 288)]
        assert [l.weight.data.shape for l in m.h_s.layers] == [(288, 72), (2304, 288)]

    def test_zero_weight_analysis_is_bias(self):
        _, m = _model(16)
        for layer in m.h_a.layers:
            layer.weight.data[:] = 0.0
        m.h_a.layers[-1].bias.data[:] = [0.25]
        z = m.hyper_analyze(np.random.default_rng(0).normal(size=(5, 16)))
        assert np.all(z == np.float32(0.25))

    def test_analysis_matches_oracle(self):
        _, m = _model(16, seed=4)
        y = np.random.default_rng(1).normal(size=(4, 16)).astype(np.float32)
        expected = naive_dense_forward(_layers32(m.h_a), y.tolist())
        np.testing.assert_allclose(m.hyper_analyze(y), expected, rtol=1e-5, atol=1e-6)

    def test_synthesis_matches_oracle(self):
        _, m = _model(16, seed=5)
        for layer in m.h_s.layers:
            layer.weight.data = np.random.default_rng(2).normal(size=layer.weight.data.shape)
        zbar = np.array([[-1.0], [0.0], [2.0]], dtype=np.float32)
        out = np.array(naive_dense_forward(_layers32(m.h_s), zbar.tolist()))
        mu, b = m.hyper_synthesize(zbar)
        np.testing.assert_allclose(mu, out[:, :16], rtol=1e-5, atol=1e-6)
        expected_b = np.maximum(np.log1p(np.exp(-np.abs(out[:, 16:]))) + np.maximum(out[:, 16:], 0), SCALE_FLOOR)
        np.testing.assert_allclose(b, expected_b, rtol=1e-5, atol=1e-6)

    def test_scale_floor(self):
        _, m = _model(16)
        m.h_s.layers[-1].bias.data[16:] = -1000.0
        for layer in m.h_s.layers:
            layer.weight.data[:] = 0.0
        _, b = m.hyper_synthesize(np.zeros((2, 1), dtype=np.float32))
        assert np.all(np.isfinite(b)) and np.all(b == np.float32(SCALE_FLOOR))

    def test_constant_statistics(self):
        _, m = _model(16)
        for layer in m.h_s.layers:
            layer.weight.data[:] = 0.0
        m.h_s.layers[-1].bias.data[:16] = 0.0
        m.h_s.layers[-1].bias.data[16:] = softplus_inverse(1.0)
        mu, b = m.hyper_synthesize(np.ones((3, 1), dtype=np.float32))
        assert np.all(mu == 0.0)
        np.testing.assert_allclose(b, 1.0, rtol=1e-6)

    def test_shape_mismatch(self):
        _, m = _model(16)
        with pytest.raises(InvalidArgumentError):
            m.hyper_analyze(np.zeros((2, 15)))
        with pytest.raises(InvalidArgumentError):
            m.compress(np.zeros((2, 15)))


class TestQuantizeSte:
    def test_example(self):
        assert math.isclose(float(quantize_ste(np.array(2.3), np.array(0.4))), 2.4, rel_tol=1e-12)

    def test_fixed_point(self):
        v = np.array([0.7, -3.25])
        np.testing.assert_array_equal(quantize_ste(v, v), v)

    def test_ties_round_away(self):
        np.testing.assert_array_equal(round_half_away(np.array([0.5, -0.5, 1.5, -2.5])), [1, -1, 2, -3])

    def test_identity_gradient(self):
        v = Tensor(np.array([0.2, 1.49, -7.8]), requires_grad=True)
        anchor = Tensor(np.array([0.1, 0.0, 0.3]), requires_grad=True)
        out = quantize_ste(v, anchor)
        ad.tsum(out).backward()
        np.testing.assert_array_equal(v.grad, 1.0)
        np.testing.assert_array_equal(anchor.grad, 0.0)

    def test_replayed_surrogate_has_unit_slope(self):
        tape = OffsetTape()
        v = np.array([0.3, 2.6, -1.1])
        quantize_ste(v, 0.0, tape)
        eps = 1e-6
        up = quantize_ste(v + eps, 0.0, tape.replay())
        down = quantize_ste(v - eps, 0.0, tape.replay())
        np.testing.assert_allclose((up - down) / (2 * eps), 1.0, rtol=1e-6)

    @given(st.floats(-1e4, 1e4), st.floats(-100, 100))
    def test_residual_is_integral(self, v, anchor):
        q = float(quantize_ste(np.array(v), np.array(anchor)))
        r = q - anchor
        assert abs(r - round(r)) < 1e-7 * max(1.0, abs(v))
        assert abs(q - v) <= 0.5 + 1e-7 * max(1.0, abs(v))


class TestLaplace:
    def test_zero_bin(self):
        assert math.isclose(laplace_pmf(0, 0.0, 1.0), 1 - math.exp(-0.5), rel_tol=1e-12)
        assert round(float(laplace_pmf(0, 0.0, 1.0)), 6) == 0.393469

    @settings(max_examples=100)
    @given(st.integers(-60, 60), st.floats(0.001, 50), st.floats(-0.5, 0.5))
    def test_matches_closed_form(self, k, b, mu):
        expected = laplace_bin_mass(k, b, mu)
        if expected > 1e-250:
            assert math.isclose(float(laplace_pmf(k, mu, b)), expected, rel_tol=1e-8, abs_tol=1e-300)

    @given(st.integers(0, 1000), st.floats(0.001, 100))
    def test_symmetry(self, k, b):
        assert laplace_pmf(k, 0.0, b) == laplace_pmf(-k, 0.0, b)

    @pytest.mark.parametrize("b", [SCALE_FLOOR, 0.1, 1.0, 7.5, 40.0])
    def test_normalized(self, b):
        k = np.arange(-4000, 4001)
        assert math.fsum(laplace_pmf(k, 0.3, b).tolist()) == pytest.approx(1.0, abs=1e-9)

    def test_far_tail_is_finite(self):
        bits = laplace_bits(np.array([10**6]), np.array([0.5]))
        assert np.isfinite(bits).all() and bits[0] > 1e6

    def test_deterministic_symbol_costs_nothing(self):
        assert laplace_bits(np.zeros(100), np.full(100, SCALE_FLOOR)).sum() < 1e-100

    def test_gradients(self):
        r = Tensor(np.array([-2.0, -0.2, 0.0, 0.3, 4.0]), requires_grad=True)
        b = Tensor(np.array([0.5, 1.0, 2.0, 0.7, 3.0]), requires_grad=True)
        ad.tsum(laplace_log_pmf(r, b)).backward()
        eps = 1e-6
        for t in (r, b):
            for i in range(5):
                t.data[i] += eps
                up = laplace_log_pmf(r.data, b.data).sum()
                t.data[i] -= 2 * eps
                down = laplace_log_pmf(r.data, b.data).sum()
                t.data[i] += eps
                assert math.isclose(t.grad[i], (up - down) / (2 * eps), rel_tol=1e-5, abs_tol=1e-8)


class TestFactorized:
    def test_fresh_median_near_zero(self):
        fd = FactorizedDensity(ParamStore(), "f", 4)
        m, iters = fd.median(return_iterations=True)
        assert np.all(np.abs(m) < 1e-4) and iters <= 100
        assert np.all(np.abs(fd.cdf(m[None])[0] - 0.5) < 1e-6)

    def test_monotone_and_limits(self):
        store = ParamStore()
        fd = FactorizedDensity(store, "f", 3)
        rng = np.random.default_rng(0)
        for name, p in store.items():
            p.data = rng.normal(size=p.data.shape)
        x = np.linspace(-50, 50, 2001)[:, None].repeat(3, axis=1)
        c = fd.cdf(x)
        assert np.all(np.diff(c, axis=0) >= 0)
        assert np.all(fd.cdf(np.full((1, 3), -1e6)) < 1e-6) and np.all(fd.cdf(np.full((1, 3), 1e6)) > 1 - 1e-6)

    @pytest.mark.parametrize("seed", range(5))
    def test_median_after_perturbation(self, seed):
        store = ParamStore()
        fd = FactorizedDensity(store, "f", 6)
        rng = np.random.default_rng(seed)
        for name, p in store.items():
            p.data = p.data + rng.normal(0.0, 0.8, size=p.data.shape)
        m, iters = fd.median(return_iterations=True)
        assert iters <= 100
        assert np.all(np.abs(fd.cdf(m[None])[0] - 0.5) < 1e-6)

    def test_pmf_support(self):
        fd = FactorizedDensity(ParamStore(), "f", 2)
        p = fd.pmf(np.arange(-200, 201))
        assert np.all(p >= 0)
        total = p.sum(axis=0)
        assert np.all(total <= 1 + 1e-12) and np.all(1 - total < 1e-6)

    def test_fit_laplace_sample(self):
        store = ParamStore()
        fd = FactorizedDensity(store, "f", 1)
        sample = round_half_away(np.random.default_rng(0).laplace(0.0, 1.0, size=(4000, 1)))
        fd.fit(sample, store, steps=1000, lr=0.05)
        p0 = float(fd.pmf(np.array([0.0]), medians=np.zeros(1))[0, 0])
        assert abs(p0 - 0.3935) / 0.3935 < 0.05

    def test_exact_and_graph_log_pmf_agree(self):
        fd = FactorizedDensity(ParamStore(), "f", 2)
        z = np.array([[-3.0, 0.0], [1.0, 2.0]])
        graph = fd.log_pmf(Tensor(z)).data
        np.testing.assert_allclose(fd.log_pmf_exact(z, rounded=False), graph, rtol=1e-9)


class TestRate:
    def test_uniform_tables_cost_eight_bits(self):
        k = np.random.default_rng(0).integers(0, 256, size=1000)
        p = np.full(256, 1 / 256)
        assert math.isclose(-np.log2(p[k]).sum() / k.size, 8.0, rel_tol=1e-12)

    def test_estimate_matches_direct_sum(self):
        _, m = _model(16, seed=7)
        y = np.random.default_rng(3).normal(0.0, 2.0, size=(9, 16))
        codes = m.compress(y)
        est = m.estimate_rate(codes)
        bits_y = -math.fsum(
            math.log2(laplace_bin_mass(int(k), float(b))) for k, b in zip(codes.k.ravel(), codes.b.ravel())
        )
        medians = m.medians().astype(np.float64)
        bits_z = 0.0
        for row in codes.zs:
            for c, s in enumerate(row):
                zc = float(s) + medians[c]
                lo = m.factorized.cdf(np.array([[zc - 0.5]]))[0, 0] if m.d_z == 1 else None
                up = m.factorized.cdf(np.array([[zc + 0.5]]))[0, 0] if m.d_z == 1 else None
                bits_z -= math.log2(up - lo)
        assert math.isclose(est.bits_y, bits_y, rel_tol=1e-9)
        assert math.isclose(est.bits_z, bits_z, rel_tol=1e-9)
        assert est.elements == 9 * 16
        assert est.bits_per_element == pytest.approx((bits_y + bits_z) / 144, rel=1e-9)

    def test_codes_are_on_grid(self):
        _, m = _model(16, seed=2)
        codes = m.compress(np.random.default_rng(0).normal(size=(5, 16)))
        np.testing.assert_allclose(codes.ybar - codes.mu, codes.k, atol=1e-5)
        np.testing.assert_allclose(codes.recon, codes.ybar / m.gain(), rtol=1e-6)

    def test_train_and_inference_rates_agree(self):
        _, m = _model(16, seed=1)
        y = np.random.default_rng(4).normal(size=(6, 16))
        _, bits_y, bits_z = m.forward_train(y)
        est = m.estimate_rate(m.compress(y))
        total = float(bits_y.data.sum() + bits_z.data.sum())
        assert total == pytest.approx(est.bits, rel=1e-3)

    def test_hyper_share(self, trained_bank):
        bank, y = trained_bank
        flat = y.reshape(-1, y.shape[-1])
        idx = np.argmax(bank.route(flat.astype(np.float32), dtype=np.float32), axis=-1)
        bits_y = bits_z = 0.0
        for e in np.unique(idx):
            est = bank.models[e].estimate_rate(bank.models[e].compress(flat[idx == e]))
            bits_y += est.bits_y
            bits_z += est.bits_z
        share = bits_z / (bits_y + bits_z)
        print(f"hyperprior share of bits: {100 * share:.2f}%")
        assert share < 0.10


class TestSurrogateGradient:
    def test_rate_loss_finite_differences(self):
        store, m = _model(8, d_z=2, seed=3)
        rng = np.random.default_rng(0)
        for layer in m.h_s.layers:
            layer.bias.data += rng.normal(0.0, 0.2, size=layer.bias.data.shape)
        m.log_gain.data = rng.normal(0.0, 0.1, size=8)
        y = rng.normal(0.0, 1.5, size=(6, 8))
        tape = OffsetTape()

        def loss():
            _, by, bz = m.forward_train(y, tape)
            return ad.add(ad.tsum(by), ad.tsum(bz))

        store.zero_grad()
        loss().backward()
        grads = {k: v.copy() for k, v in store.grads().items()}
        eps = 1e-6
        worst = 0.0
        for name, p in store.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                tape.replay()
                up = float(loss().data)
                flat[i] = orig - eps
                tape.replay()
                down = float(loss().data)
                flat[i] = orig
                num = (up - down) / (2 * eps)
                a = grads[name].reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), 1e-6))
        assert worst < 1e-3

    def test_bits_conversion(self):
        assert math.isclose(float(laplace_bits(np.array([0]), np.array([1.0]))[0]), -math.log(0.3934693402873666) / LN2)
