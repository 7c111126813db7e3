import numpy as np
import pytest

from stabledyn import autodiff as ad
from stabledyn.bilipschitz import BiLipNet, spectral_norm
from stabledyn.rng import stream_rng, uniform_in_ball


def make_net(lip_min=0.1, lip_max=2.0, dim=4, hidden=(32, 32), seed=0, **kw):
    return BiLipNet(dim, lip_min, lip_max, hidden, seed=seed, **kw)


class TestConstruction:
    def test_gain_and_budget(self):
        net = make_net(0.1, 2.0)
        assert net.gain == pytest.approx(1.05, abs=0)
        assert net.residual_budget == pytest.approx(0.95, abs=0)

    def test_isometry_case_disables_residual(self):
        net = make_net(1.0, 1.0, dim=3, hidden=(8,))
        assert net.residual_budget == 0.0
        assert net.gamma == 0.0 or net.bound == 0.0
        x = np.array([0.3, -0.7, 1.1])
        by = net.params["g.by"]
        assert np.allclose(net(x), x + by, rtol=0, atol=1e-15)

    def test_experiment_shape(self):
        net = make_net(0.1, 2.0, dim=4, hidden=(32, 32))
        assert net.params["g.U1"].shape == (32, 4)
        assert net.params["g.W2"].shape == (32, 32)
        assert net.params["g.Y2"].shape == (4, 32)

    def test_invalid_bounds_rejected(self):
        with pytest.raises(ValueError):
            make_net(2.0, 0.1)
        with pytest.raises(ValueError):
            make_net(0.0, 1.0)


class TestSpectralNorm:
    def test_identity(self):
        assert spectral_norm(np.eye(5)) == pytest.approx(1.0, abs=1e-12)

    def test_scaled_identity(self):
        assert spectral_norm(2.0 * np.eye(3)) == pytest.approx(2.0, abs=1e-9)

    def test_zero(self):
        assert spectral_norm(np.zeros((4, 3))) == 0.0

    def test_matches_svd_oracle(self):
        rng = stream_rng(11, "probe")
        for _ in range(50):
            m = rng.standard_normal((rng.integers(1, 8), rng.integers(1, 8)))
            ours = spectral_norm(m)
            ref = float(np.linalg.svd(m, compute_uv=False)[0])
            assert ours == pytest.approx(ref, rel=1e-7)


class TestForward:
    def test_zero_weights_is_affine(self):
        net = make_net(0.1, 2.0, dim=3, hidden=(8,))
        for name in list(net.params):
            if not name.endswith("by"):
                net.params[name] = np.zeros_like(net.params[name])
        net.params["g.by"] = np.array([1.0, 2.0, 3.0])
        net.refresh_certification()
        x = np.array([1.0, -1.0, 0.5])
        assert np.allclose(net(x), net.gain * x + net.params["g.by"],
                           rtol=0, atol=1e-15)

    def test_hand_single_layer_at_zero(self):
        # W absent for the first layer, U=I, Y=I, tanh: g(0) = b_y
        net = make_net(0.1, 2.0, dim=2, hidden=(2,))
        net.params["g.U1"] = np.eye(2)
        net.params["g.b1"] = np.zeros(2)
        net.params["g.Y1"] = np.eye(2)
        net.params["g.by"] = np.array([0.25, -0.5])
        net.gamma = 1.0
        assert np.allclose(net(np.zeros(2)), [0.25, -0.5], rtol=0, atol=0)

    def test_sandwich_on_random_pairs(self):
        net = make_net(0.1, 2.0, seed=3)
        lo, hi = net.lipschitz_probe(1000, radius=5.0, seed=5)
        assert lo >= net.lip_min - 1e-9
        assert hi <= net.lip_max + 1e-9

    def test_batch_matches_graph(self):
        net = make_net(0.1, 2.0, seed=1)
        rng = stream_rng(2, "probe")
        xs = rng.standard_normal((20, 4))
        batch = net.forward_batch(xs)
        for i, x in enumerate(xs):
            assert np.allclose(batch[i], net(x), rtol=1e-12, atol=1e-12)

    def test_softplus_activation_supported(self):
        net = make_net(0.5, 1.5, dim=3, hidden=(6,), activation="softplus", seed=2)
        lo, hi = net.lipschitz_probe(500, radius=3.0, seed=1)
        assert lo >= 0.5 - 1e-9 and hi <= 1.5 + 1e-9
        # shifted softplus keeps the origin fixed up to the bias
        net.params["g.by"] = np.zeros(3)
        net.params["g.b1"] = np.zeros(6)
        assert np.allclose(net(np.zeros(3)), np.zeros(3), atol=1e-15)


class TestCertification:
    def test_zero_weights(self):
        net = make_net(0.1, 2.0, dim=2, hidden=(4,))
        for name in list(net.params):
            net.params[name] = np.zeros_like(net.params[name])
        bound, gamma = net.certify()
        assert bound == 0.0 and gamma == 1.0

    def test_hand_bound_single_layer(self):
        net = make_net(0.1, 2.0, dim=3, hidden=(3,))
        net.params["g.U1"] = np.eye(3)
        net.params["g.b1"] = np.zeros(3)
        net.params["g.Y1"] = 2.0 * np.eye(3)
        bound, gamma = net.certify()
        assert bound == pytest.approx(2.0, rel=1e-9)
        assert gamma == pytest.approx(0.475, rel=1e-9)

    def test_residual_lipschitz_after_rescale(self):
        net = make_net(0.1, 2.0, seed=9)
        rng = stream_rng(3, "probe")
        xa = uniform_in_ball(rng, np.zeros(4), 5.0, 1000)
        xb = uniform_in_ball(rng, np.zeros(4), 5.0, 1000)

        def residual(x):
            zs, _ = net._hidden_batch(x)
            out = np.zeros_like(x)
            for k, z in enumerate(zs, start=1):
                out += z @ net.params[f"g.Y{k}"].T
            return net.gamma * out

        num = np.linalg.norm(residual(xa) - residual(xb), axis=1)
        den = np.linalg.norm(xa - xb, axis=1)
        assert np.max(num / den) <= net.residual_budget + 1e-9

    def test_certify_idempotent(self):
        net = make_net(0.1, 2.0, seed=4)
        b1, g1 = net.certify()
        b2, g2 = net.certify()
        assert b1 == b2 and g1 == g2


class TestInverse:
    def test_affine_case(self):
        net = make_net(0.1, 2.0, dim=2, hidden=(4,))
        for name in list(net.params):
            if not name.endswith("by"):
                net.params[name] = np.zeros_like(net.params[name])
        net.params["g.by"] = np.array([1.0, -1.0])
        net.refresh_certification()
        y = np.array([3.0, 2.0])
        x = net.inverse(y, tol=1e-12)
        assert np.allclose(x, (y - net.params["g.by"]) / net.gain, atol=1e-12)

    def test_round_trip(self):
        net = make_net(0.1, 2.0, seed=6)
        rng = stream_rng(7, "probe")
        tol = 1e-10
        for _ in range(100):
            x0 = rng.uniform(-3.0, 3.0, size=4)
            y = net(x0)
            x = net.inverse(y, tol=tol)
            assert np.linalg.norm(x - x0) <= tol / net.lip_min

    def test_iteration_count_matches_contraction_rate(self):
        net = make_net(0.1, 2.0, seed=8)
        rng = stream_rng(9, "probe")
        tol = 1e-10
        ratio = net.residual_budget / net.gain  # 0.95 / 1.05
        for _ in range(10):
            y = net(rng.uniform(-2.0, 2.0, size=4))
            _, iters = net._invert(y, tol)
            # starting gap is O(1); allow generous constant headroom
            bound = np.log(tol / 100.0) / np.log(ratio)
            assert iters <= bound + 10

    def test_rejects_nonpositive_tol(self):
        net = make_net(0.1, 2.0, dim=2, hidden=(4,))
        with pytest.raises(ValueError):
            net.inverse(np.zeros(2), tol=0.0)


class TestProbeAndJacobian:
    def test_identity_only_ratio_is_gain(self):
        net = make_net(0.2, 1.8, dim=3, hidden=(4,))
        for name in list(net.params):
            net.params[name] = np.zeros_like(net.params[name])
        net.refresh_certification()
        lo, hi = net.lipschitz_probe(200, radius=2.0, seed=3)
        assert lo == pytest.approx(net.gain, abs=1e-12)
        assert hi == pytest.approx(net.gain, abs=1e-12)

    def test_probe_rejects_empty(self):
        net = make_net(0.1, 2.0, dim=2, hidden=(4,))
        with pytest.raises(ValueError):
            net.lipschitz_probe(0)

    def test_jacobian_singular_values_within_bounds(self):
        net = make_net(0.1, 2.0, seed=12)
        rng = stream_rng(13, "probe")
        for _ in range(20):
            x = rng.uniform(-3.0, 3.0, size=4)
            jac_fd = np.zeros((4, 4))
            h = 1e-6
            for j in range(4):
                e = np.zeros(4)
                e[j] = h
                jac_fd[:, j] = (net(x + e) - net(x - e)) / (2 * h)
            sv = np.linalg.svd(jac_fd, compute_uv=False)
            assert sv.min() >= net.lip_min - 1e-6
            assert sv.max() <= net.lip_max + 1e-6

    def test_analytic_jacobian_matches_fd(self):
        net = make_net(0.1, 2.0, seed=14)
        rng = stream_rng(15, "probe")
        xs = rng.uniform(-2.0, 2.0, size=(5, 4))
        jacs = net.jacobian_batch(xs)
        for i, x in enumerate(xs):
            h = 1e-6
            for j in range(4):
                e = np.zeros(4)
                e[j] = h
                col = (net(x + e) - net(x - e)) / (2 * h)
                assert np.max(np.abs(jacs[i][:, j] - col)) <= 1e-7


class TestGradients:
    def test_params_receive_gradients_through_emit(self):
        net = make_net(0.1, 2.0, dim=3, hidden=(5, 5), seed=21)
        g = ad.Graph()
        x = g.input("x", (3,))
        out = g.sum(g.square(net.emit(g, x)))
        bindings = net.bindings()
        bindings["x"] = np.array([0.4, -0.2, 0.9])
        grads = ad.backward(g, out, bindings)

        def loss_for(name):
            def f(arr):
                b = dict(bindings)
                b[name] = arr
                return float(ad.forward(g, b)[out])
            return f

        for name, value in net.params.items():
            h = 1e-6 * np.maximum(1.0, np.abs(value))
            fd = ad.finite_diff_gradient(loss_for(name), value, h)
            scale = max(1.0, float(np.max(np.abs(fd))))
            assert np.max(np.abs(grads[name] - fd)) <= 1e-6 * scale, name
