import numpy as np
import pytest

from stabledyn import autodiff as ad
from stabledyn.bilipschitz import BiLipNet
from stabledyn.hamiltonian import Hamiltonian, landscape_report
from stabledyn.rng import stream_rng, uniform_in_ball


def anchored_energy(seed=0, anchor=None, lip=(0.1, 2.0)):
    net = BiLipNet(4, lip[0], lip[1], (32, 32), seed=seed)
    if anchor is None:
        anchor = np.zeros(4)
    return Hamiltonian(net, anchor=anchor)


class TestValue:
    def test_zero_at_known_equilibrium(self):
        ham = anchored_energy(seed=1, anchor=np.array([0.5, -1.0, 0.0, 2.0]))
        assert ham.value(ham.anchor) == 0.0

    def test_quadratic_bounds_sampled(self):
        ham = anchored_energy(seed=2)
        rng = stream_rng(3, "probe")
        xs = uniform_in_ball(rng, np.zeros(4), 5.0, 1000)
        h = ham.value_batch(xs)
        d2 = np.sum(xs * xs, axis=1)
        assert np.all(h >= 0.5 * 0.1 ** 2 * d2 - 1e-9)
        assert np.all(h <= 0.5 * 2.0 ** 2 * d2 + 1e-9)

    def test_identity_gain_free_mode(self):
        net = BiLipNet(3, 0.4, 1.6, (4,), seed=0)
        for name in list(net.params):
            net.params[name] = np.zeros_like(net.params[name])
        net.refresh_certification()
        ham = Hamiltonian(net)  # free mode, r = 0
        x = np.array([1.0, -2.0, 0.5])
        expect = 0.5 * net.gain ** 2 * float(np.sum(x * x))
        assert ham.value(x) == pytest.approx(expect, rel=1e-15)

    def test_batch_matches_graph(self):
        ham = anchored_energy(seed=4)
        rng = stream_rng(5, "probe")
        xs = rng.uniform(-3, 3, size=(10, 4))
        hb = ham.value_batch(xs)
        for i, x in enumerate(xs):
            assert hb[i] == pytest.approx(ham.value(x), rel=1e-12, abs=1e-12)


class TestGradient:
    def test_zero_at_equilibrium(self):
        ham = anchored_energy(seed=6, anchor=np.array([1.0, 0.0, -1.0, 0.5]))
        grad = ham.gradient(ham.anchor)
        assert np.array_equal(grad, np.zeros(4))

    def test_matches_finite_differences(self):
        ham = anchored_energy(seed=7)
        rng = stream_rng(8, "probe")
        for _ in range(10):
            x = rng.uniform(-2, 2, size=4)
            grad = ham.gradient(x)
            h = 1e-6 * np.maximum(1.0, np.abs(x))
            fd = ad.finite_diff_gradient(lambda a: ham.value(a), x, h)
            scale = max(1.0, float(np.max(np.abs(fd))))
            assert np.max(np.abs(grad - fd)) <= 1e-6 * scale

    def test_gradient_dominance_sampled(self):
        ham = anchored_energy(seed=9)
        rng = stream_rng(10, "probe")
        xs = uniform_in_ball(rng, np.zeros(4), 5.0, 1000)
        gsq = np.sum(ham.gradient_batch(xs) ** 2, axis=1)
        h = ham.value_batch(xs)
        assert np.all(gsq >= 2.0 * ham.pl_constant * h - 1e-9)

    def test_closed_form_is_jacobian_transpose_residual(self):
        ham = anchored_energy(seed=11)
        rng = stream_rng(12, "probe")
        xs = rng.uniform(-2, 2, size=(5, 4))
        grad = ham.gradient_batch(xs)
        for i, x in enumerate(xs):
            gg = ham.gradient(x)
            assert np.max(np.abs(grad[i] - gg)) <= 1e-12 * max(1, np.max(np.abs(gg)))


class TestEquilibrium:
    def test_known_mode_returns_anchor(self):
        anchor = np.array([0.0, 0.0, 0.0, 0.0])
        ham = anchored_energy(seed=13, anchor=anchor)
        assert np.array_equal(ham.equilibrium(), anchor)

    def test_free_mode_recovers_minimum(self):
        net = BiLipNet(4, 0.1, 2.0, (16, 16), seed=14)
        ham = Hamiltonian(net)
        tol = 1e-10
        star = ham.equilibrium(tol=tol)
        assert ham.value(star) <= 0.5 * net.lip_max ** 2 * (tol / net.lip_min) ** 2
        grad_norm = float(np.linalg.norm(ham.gradient(star)))
        assert grad_norm <= net.lip_max ** 2 * tol / net.lip_min


class TestLandscapeReport:
    def test_margins_nonnegative_for_certified_model(self):
        ham = anchored_energy(seed=15)
        report = landscape_report(ham, 1000, radius=5.0, seed=16)
        assert report.ok(1e-9)

    def test_identity_gain_margins_exact(self):
        net = BiLipNet(2, 1.0, 1.0, (4,), seed=0)
        for name in list(net.params):
            net.params[name] = np.zeros_like(net.params[name])
        net.refresh_certification()
        ham = Hamiltonian(net, anchor=np.zeros(2))
        report = landscape_report(ham, 200, radius=2.0, seed=17)
        # H is exactly 0.5 |x|^2 here, so all three margins collapse to ~0
        assert report.ok(1e-9)
        assert abs(report.lower_margin_min) <= 1e-12
        assert abs(report.upper_margin_min) <= 1e-12

    def test_empty_sample_rejected(self):
        ham = anchored_energy(seed=18)
        with pytest.raises(ValueError):
            landscape_report(ham, 0)

    def test_anchor_shape_validated(self):
        net = BiLipNet(4, 0.1, 2.0, (8,), seed=19)
        with pytest.raises(ValueError):
            Hamiltonian(net, anchor=np.zeros(3))
