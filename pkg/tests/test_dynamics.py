import numpy as np
import pytest

from stabledyn import autodiff as ad
from stabledyn.bilipschitz import BiLipNet
from stabledyn.dynamics import (HamiltonianField, JRNet, PortHamiltonianField,
                                descent_audit, passivity_audit)
from stabledyn.hamiltonian import Hamiltonian
from stabledyn.rng import stream_rng


def small_model(seed=0, dim=4, floor=0.01, lip=(0.1, 2.0), anchor="zero"):
    return HamiltonianField.build(
        dim=dim, lip_min=lip[0], lip_max=lip[1], damping_floor=floor,
        bilip_hidden=(8, 8), jr_hidden=(16, 16),
        anchor=np.zeros(dim) if anchor == "zero" else None, seed=seed)


def zeroed(params):
    for name in list(params):
        params[name] = np.zeros_like(params[name])


def pure_gradient_flow(dim=3):
    """g = x (so H = 0.5|x|^2), J = 0, R = I: the field is exactly -x."""
    net = BiLipNet(dim, 1.0, 1.0, (4,), seed=0)
    zeroed(net.params)
    net.refresh_certification()
    energy = Hamiltonian(net, anchor=np.zeros(dim))
    jr = JRNet(dim, hidden=(4,), damping_floor=1.0, seed=0)
    zeroed(jr.params)
    return HamiltonianField(energy, jr)


class TestJRNet:
    def test_zero_net_gives_floor_damping(self):
        jr = JRNet(3, hidden=(8,), damping_floor=0.01, seed=0)
        zeroed(jr.params)
        j, r = jr.matrices(np.array([0.5, -0.5, 1.0]))
        assert np.array_equal(j, np.zeros((3, 3)))
        assert np.array_equal(r, 0.01 * np.eye(3))

    def test_skew_exact_bitwise(self):
        jr = JRNet(4, hidden=(16,), seed=1)
        rng = stream_rng(2, "probe")
        for _ in range(20):
            j, _ = jr.matrices(rng.uniform(-3, 3, size=4))
            assert np.max(np.abs(j + j.T)) == 0.0

    def test_quadratic_form_vanishes_on_skew(self):
        jr = JRNet(4, hidden=(16,), seed=3)
        rng = stream_rng(4, "probe")
        for _ in range(50):
            j, _ = jr.matrices(rng.uniform(-3, 3, size=4))
            v = rng.standard_normal(4)
            assert abs(v @ j @ v) <= 1e-12 * max(1.0, np.sum(np.abs(j)))

    def test_damping_eigenvalues_floored(self):
        jr = JRNet(4, hidden=(16, 16), damping_floor=0.01, seed=5)
        rng = stream_rng(6, "probe")
        xs = rng.uniform(-3, 3, size=(100, 4))
        _, r = jr.matrices_batch(xs)
        for rk in r:
            assert np.allclose(rk, rk.T, rtol=0, atol=1e-15)
            assert np.linalg.eigvalsh(rk).min() >= 0.01 - 1e-12

    def test_batch_matches_graph(self):
        jr = JRNet(4, hidden=(10,), seed=7)
        rng = stream_rng(8, "probe")
        xs = rng.uniform(-2, 2, size=(10, 4))
        jb, rb = jr.matrices_batch(xs)
        for i, x in enumerate(xs):
            j, r = jr.matrices(x)
            assert np.allclose(jb[i], j, rtol=1e-12, atol=1e-12)
            assert np.allclose(rb[i], r, rtol=1e-12, atol=1e-12)

    def test_negative_floor_rejected(self):
        with pytest.raises(ValueError):
            JRNet(3, damping_floor=-1.0)


class TestFieldValues:
    def test_vanishes_at_anchor(self):
        model = small_model(seed=9)
        v = model.field(np.zeros(4))
        assert np.max(np.abs(v)) <= 1e-8
        assert np.array_equal(v, np.zeros(4))

    def test_pure_gradient_flow_is_minus_x(self):
        model = pure_gradient_flow()
        x = np.array([0.7, -1.2, 0.3])
        assert np.allclose(model.field(x), -x, rtol=0, atol=1e-15)

    def test_descent_inequality_sampled(self):
        model = small_model(seed=10)
        assert descent_audit(model, 1000, seed=11) <= 1e-9

    def test_fast_batch_matches_graph(self):
        model = small_model(seed=12)
        rng = stream_rng(13, "probe")
        xs = rng.uniform(-3, 3, size=(25, 4))
        vb = model.field_batch(xs)
        for i, x in enumerate(xs):
            v = model.field(x)
            assert np.max(np.abs(vb[i] - v)) <= 1e-12 * max(1.0, np.max(np.abs(v)))


class TestCertificate:
    def test_reference_values(self):
        model = HamiltonianField.build(dim=4, lip_min=0.1, lip_max=2.0,
                                       damping_floor=0.01, bilip_hidden=(8,),
                                       jr_hidden=(8,), anchor=np.zeros(4))
        cert = model.certificate()
        assert cert.overshoot == pytest.approx(20.0, rel=1e-12)
        assert cert.decay_rate == pytest.approx(1e-4, rel=1e-12)
        assert cert.containment_radius(1.0) == pytest.approx(0.05, rel=1e-12)

    def test_zero_floor_means_no_decay(self):
        model = small_model(floor=0.0)
        assert model.certificate().decay_rate == 0.0

    def test_unit_bounds_mean_unit_overshoot(self):
        model = small_model(lip=(1.0, 1.0))
        assert model.certificate().overshoot == 1.0


class TestPortModel:
    def test_zero_input_reduces_to_base(self):
        model = PortHamiltonianField.build(dim=3, input_dim=2, seed=14,
                                           bilip_hidden=(6,), jr_hidden=(8,),
                                           anchor=np.zeros(3))
        x = np.array([0.4, -0.6, 1.0])
        v, y = model.io(x, np.zeros(2))
        assert np.allclose(v, model.base.field(x), rtol=0, atol=1e-15)
        grad = model.base.energy.gradient(x)
        b = model.port_matrix_batch(x[None])[0]
        assert np.allclose(y, b.T @ grad, rtol=1e-12, atol=1e-12)

    def test_output_zero_at_equilibrium(self):
        model = PortHamiltonianField.build(dim=3, input_dim=2, seed=15,
                                           bilip_hidden=(6,), jr_hidden=(8,),
                                           anchor=np.zeros(3))
        for u in (np.zeros(2), np.array([5.0, -3.0])):
            _, y = model.io(np.zeros(3), u)
            assert np.array_equal(y, np.zeros(2))

    def test_input_dimension_checked(self):
        model = PortHamiltonianField.build(dim=3, input_dim=2, seed=16,
                                           bilip_hidden=(6,), jr_hidden=(8,))
        with pytest.raises(ad.GraphError):
            model.io(np.zeros(3), np.zeros(3))

    def test_dissipation_inequality_sampled(self):
        model = PortHamiltonianField.build(dim=4, input_dim=2, seed=17,
                                           bilip_hidden=(8,), jr_hidden=(12,),
                                           damping_floor=0.01,
                                           anchor=np.zeros(4))
        assert passivity_audit(model, 1000, seed=18) <= 1e-9

    def test_lossless_case_cancels_to_roundoff(self):
        base = pure_gradient_flow(dim=3)
        base.structure.damping_floor = 0.0
        model = PortHamiltonianField(base, input_dim=2, port_hidden=(6,), seed=19)
        slack = passivity_audit(model, 200, seed=20)
        assert abs(slack) <= 1e-12

    def test_empty_sample_rejected(self):
        model = PortHamiltonianField.build(dim=3, input_dim=1, seed=21,
                                           bilip_hidden=(6,), jr_hidden=(8,))
        with pytest.raises(ValueError):
            passivity_audit(model, 0)


class TestTrainingGradients:
    def test_loss_gradients_match_finite_differences(self):
        # toy 2-state model, widths <= 8; rescale held fixed during the check
        model = HamiltonianField.build(dim=2, lip_min=0.1, lip_max=2.0,
                                       damping_floor=0.01, bilip_hidden=(4, 4),
                                       jr_hidden=(8,), anchor=np.zeros(2),
                                       seed=22)
        rng = stream_rng(23, "probe")
        x = rng.uniform(-1.5, 1.5, size=2)
        v = rng.uniform(-1.0, 1.0, size=2)
        loss, grads = model.sample_loss_grads(x, v)
        graph, loss_id = model._loss_graph()

        def loss_for(name):
            def f(arr):
                b = model.bindings()
                b["x"] = x
                b["target"] = v
                b[name] = arr
                return float(ad.forward(graph, b)[loss_id])
            return f

        assert loss == pytest.approx(loss_for("g.U1")(model.params["g.U1"]))
        for name, value in model.params.items():
            h = 1e-6 * np.maximum(1.0, np.abs(value))
            fd = ad.finite_diff_gradient(loss_for(name), value, h)
            scale = max(1.0, float(np.max(np.abs(fd))))
            assert np.max(np.abs(grads[name] - fd)) <= 1e-5 * scale, name


class TestRecords:
    def test_round_trip_preserves_field(self):
        model = small_model(seed=24)
        rec = model.to_records()
        clone = HamiltonianField.from_records(rec)
        rng = stream_rng(25, "probe")
        xs = rng.uniform(-2, 2, size=(5, 4))
        assert np.array_equal(model.field_batch(xs), clone.field_batch(xs))

    def test_port_round_trip(self):
        model = PortHamiltonianField.build(dim=3, input_dim=2, seed=26,
                                           bilip_hidden=(6,), jr_hidden=(8,),
                                           anchor=np.zeros(3))
        clone = PortHamiltonianField.from_records(model.to_records())
        x = np.array([0.2, -0.4, 0.8])
        u = np.array([1.0, -2.0])
        v0, y0 = model.io(x, u)
        v1, y1 = clone.io(x, u)
        assert np.array_equal(v0, v1) and np.array_equal(y0, y1)
