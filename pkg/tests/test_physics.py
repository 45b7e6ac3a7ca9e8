import cmath

import numpy as np
import pytest

from helmonet import geometry as geo
from helmonet import physics as ph
from helmonet import sampling as sp

from conftest import small_model, zeroed


@pytest.fixture
def training_geometry(base_geom, probes):
    cfg = sp.SamplerConfig(n_interior_raw=300, n_outer=200, n_inner_per_geometry=150, seed=9)
    return ph.TrainingGeometry(
        geom=base_geom,
        encoding=geo.probe_encoding(base_geom, probes),
        colloc=sp.build_collocation(base_geom, cfg),
    )


class TestWaveParams:
    def test_k0_consistency(self):
        wp = ph.WaveParams(mu0=4.0, rho0=1.0, omega=3.0)
        assert wp.k0 == pytest.approx(1.5)

    def test_direction_normalized(self):
        wp = ph.WaveParams(direction=(3.0, 4.0))
        assert np.hypot(*wp.direction) == pytest.approx(1.0, abs=1e-15)

    def test_invalid_params(self):
        with pytest.raises(ph.PhysicsError):
            ph.WaveParams(mu0=-1.0)
        with pytest.raises(ph.PhysicsError):
            ph.WaveParams(direction=(0.0, 0.0))

    def test_from_angle(self):
        wp = ph.WaveParams.from_angle(90.0)
        assert wp.direction[0] == pytest.approx(0.0, abs=1e-15)
        assert wp.direction[1] == pytest.approx(1.0, abs=1e-15)


class TestIncidentField:
    def test_unit_modulus(self, wave):
        pts = np.random.default_rng(0).uniform(-2, 2, (500, 2))
        val, _ = ph.incident_field(wave, pts)
        np.testing.assert_allclose(np.abs(val), wave.amp, atol=1e-14)

    def test_known_value(self, wave):
        # d=(1,0), k0=2pi, x=0.5 -> exp(i pi) = -1, independent of y
        for y in (0.0, 0.3, 0.9):
            val, _ = ph.incident_field(wave, (0.5, y))
            assert val == pytest.approx(-1.0, abs=1e-12)

    def test_gradient_matches_fd(self):
        wp = ph.WaveParams.from_angle(33.0)
        h = 1e-6
        rng = np.random.default_rng(1)
        for _ in range(20):
            p = rng.uniform(0, 1, 2)
            _, grad = ph.incident_field(wp, p)
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                fd = (ph.incident_field(wp, p + e)[0] - ph.incident_field(wp, p - e)[0]) / (2 * h)
                assert abs(fd - grad[i]) / abs(grad[i]) < 1e-8


class TestResidualOperators:
    def test_plane_wave_pde_oracle(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 1, (1000, 2))
        for k0 in (np.pi, 2 * np.pi, 4 * np.pi):
            wp = ph.WaveParams(omega=k0)
            val, _ = ph.incident_field(wp, pts)
            res = ph.helmholtz_residual_field(wp, val, -wp.k0**2 * val)
            assert np.abs(res).max() < 1e-8

    def test_zero_model_zero_pde(self, base_geom, wave):
        model = zeroed(small_model())
        res = ph.pde_residual(model, base_geom, wave, np.array([[0.9, 0.2], [0.1, 0.8]]))
        np.testing.assert_array_equal(res, np.zeros(2, dtype=complex))

    def test_constant_model_pde(self, base_geom, wave):
        model = zeroed(small_model())
        model.output_bias[:] = [0.5, -1.5]
        res = ph.pde_residual(model, base_geom, wave, (0.85, 0.4))
        c = complex(0.5, -1.5)
        assert res == pytest.approx(wave.rho0 * wave.omega**2 * c, abs=1e-10)

    def test_pde_inside_inclusion_rejected(self, base_geom, wave):
        model = small_model()
        with pytest.raises(ph.PointInsideInclusionError):
            ph.pde_residual(model, base_geom, wave, (0.52, 0.5))

    def test_rigid_with_cancelling_field(self, wave):
        # a synthetic scattered field W_s = -W_inc has zero total normal flux
        th = np.linspace(0, 2 * np.pi, 50, endpoint=False)
        geom = geo.PolarBoundary()
        pts = geo.boundary_point(geom, th)
        nrm = geo.boundary_normal(geom, th)
        _, grad_inc = ph.incident_field(wave, pts)
        res = ph.rigid_residual_field(wave, pts, nrm, -grad_inc)
        assert np.abs(res).max() < 1e-12

    def test_rigid_zero_model_grazing(self, wave):
        model = zeroed(small_model())
        circle = geo.PolarBoundary(harmonics=())  # normal at theta=pi/2 is exactly (0,1)
        th = np.pi / 2
        p = geo.boundary_point(circle, th)
        n = geo.boundary_normal(circle, th)
        assert abs(n @ np.asarray(wave.direction)) < 1e-14
        res = ph.rigid_bc_residual(model, circle, wave, p, n)
        assert abs(res) < 1e-14

    def test_rigid_zero_model_head_on(self, base_geom, wave):
        model = zeroed(small_model())
        p = np.array([0.784, 0.5])
        n = np.array([1.0, 0.0])
        res = ph.rigid_bc_residual(model, base_geom, wave, p, n)
        expect = 1j * 2 * np.pi * cmath.exp(1j * 2 * np.pi * 0.784)
        assert res == pytest.approx(expect, abs=1e-10)

    def test_rigid_off_boundary_rejected(self, base_geom, wave):
        with pytest.raises(ph.OffBoundaryError):
            ph.rigid_bc_residual(small_model(), base_geom, wave, (0.9, 0.9), (1.0, 0.0))

    def test_absorbing_outgoing_wave(self, wave):
        # exp(i k0 x) on the edge x = 1 with n = (1, 0) is perfectly absorbed
        y = np.linspace(0, 1, 30)
        pts = np.stack([np.ones(30), y], axis=1)
        val, grad = ph.incident_field(wave, pts)
        res = ph.absorbing_residual_field(wave, val, grad, np.tile([1.0, 0.0], (30, 1)))
        assert np.abs(res).max() < 1e-12

    def test_absorbing_grazing_wave(self, wave):
        # same wave along the edge y = 1 with n = (0, 1): residual -i k0 exp(i k0 x)
        x = np.linspace(0, 1, 30)
        pts = np.stack([x, np.ones(30)], axis=1)
        val, grad = ph.incident_field(wave, pts)
        res = ph.absorbing_residual_field(wave, val, grad, np.tile([0.0, 1.0], (30, 1)))
        expect = -1j * wave.k0 * np.exp(1j * wave.k0 * x)
        np.testing.assert_allclose(res, expect, atol=1e-12)

    def test_absorbing_zero_model(self, base_geom, wave):
        model = zeroed(small_model())
        res = ph.absorbing_bc_residual(model, base_geom, wave, (1.0, 0.3), (1.0, 0.0))
        assert res == 0

    def test_absorbing_off_perimeter_rejected(self, base_geom, wave):
        with pytest.raises(ph.OffBoundaryError):
            ph.absorbing_bc_residual(small_model(), base_geom, wave, (0.9, 0.5), (1.0, 0.0))


class TestTotalLoss:
    def test_zero_model_terms(self, training_geometry, wave):
        model = zeroed(small_model())
        rep = ph.total_loss(model, [training_geometry], wave)
        assert rep.pde == 0.0
        assert rep.gamma_out == 0.0
        nrm = training_geometry.colloc.inner[1]
        d = np.asarray(wave.direction)
        expect = wave.k0**2 * wave.amp**2 * np.mean((nrm @ d) ** 2)
        assert rep.gamma == pytest.approx(expect, rel=1e-12)
        assert rep.total == pytest.approx(rep.gamma, rel=1e-12)

    def test_zero_weights(self, training_geometry, wave):
        model = small_model(seed=1)
        rep = ph.total_loss(model, [training_geometry], wave, weights=(0.0, 0.0, 0.0))
        assert rep.total == 0.0

    def test_weight_linearity(self, training_geometry, wave):
        model = small_model(seed=2)
        r1 = ph.total_loss(model, [training_geometry], wave, weights=(1.0, 1.0, 1.0))
        r2 = ph.total_loss(model, [training_geometry], wave, weights=(2.0, 1.0, 1.0))
        assert r2.total - r1.total == pytest.approx(r1.pde, rel=1e-12)

    def test_empty_enabled_term_rejected(self, base_geom, probes, wave):
        cfg = sp.SamplerConfig(n_interior_raw=50, n_outer=20, n_inner_per_geometry=0, seed=1)
        tg = ph.TrainingGeometry(base_geom, geo.probe_encoding(base_geom, probes),
                                 sp.build_collocation(base_geom, cfg))
        with pytest.raises(ph.PhysicsError, match="gamma"):
            ph.total_loss(small_model(), [tg], wave)

    def test_nonnegative_terms(self, training_geometry, wave):
        rep = ph.total_loss(small_model(seed=3), [training_geometry], wave)
        assert rep.pde >= 0 and rep.gamma >= 0 and rep.gamma_out >= 0
        assert rep.total == pytest.approx(rep.pde + rep.gamma + rep.gamma_out, rel=1e-12)

    def test_rotation_frame_invariance_zero_model(self, base_geom, probes, wave):
        """Rotating geometry, points, normals and d together leaves the loss unchanged."""
        model = zeroed(small_model())
        cfg = sp.SamplerConfig(n_interior_raw=200, n_outer=100, n_inner_per_geometry=120, seed=4)
        colloc = sp.build_collocation(base_geom, cfg)
        tg = ph.TrainingGeometry(base_geom, geo.probe_encoding(base_geom, probes), colloc)
        rep0 = ph.total_loss(model, [tg], wave)
        alpha = 0.61
        rot = base_geom.rotated(alpha)
        inner_p = geo.rotate_about(colloc.inner[0], alpha)
        inner_n = geo.rotate_about(colloc.inner[1], alpha, center=(0.0, 0.0))
        colloc_rot = sp.CollocationSet(
            interior=geo.rotate_about(colloc.interior, alpha),
            band=geo.rotate_about(colloc.band, alpha),
            outer=colloc.outer,
            inner=(inner_p, inner_n),
        )
        d_rot = tuple(geo.rotate_about(np.asarray(wave.direction), alpha, center=(0.0, 0.0)))
        wave_rot = ph.WaveParams(direction=d_rot)
        tg_rot = ph.TrainingGeometry(rot, geo.probe_encoding(rot, probes), colloc_rot)
        rep1 = ph.total_loss(model, [tg_rot], wave_rot)
        assert rep1.gamma == pytest.approx(rep0.gamma, rel=1e-12)


class TestFluxDivergence:
    def test_plane_wave(self, wave):
        def plane_eval(p):
            v, g = ph.incident_field(wave, p)
            return v, g, -wave.k0**2 * v

        for p in ([0.2, 0.9], [0.7, 0.1]):
            assert abs(ph.flux_divergence(plane_eval, wave, np.asarray(p))) < 1e-10

    def test_real_field_exactly_zero(self, wave):
        def real_eval(p):
            return 2.3, np.array([1.0, -0.5]), -4.2

        assert ph.flux_divergence(real_eval, wave, np.array([0.5, 0.25])) == 0.0

    def test_generic_complex_field_nonzero(self, wave):
        def generic(p):
            return 1 + 2j, np.array([0.0, 0.0]), 3 - 1j

        # 2 mu Im(conj(W) lap W) = 2 Im((1-2j)(3-1j)) = 2 * (-7) = -14
        assert ph.flux_divergence(generic, wave, np.zeros(2)) == pytest.approx(-14.0)


class TestLossGradient:
    def test_matches_finite_differences(self, base_geom, probes, wave):
        from helmonet import deeponet as dn

        model = small_model(seed=5)
        cfg = sp.SamplerConfig(n_interior_raw=60, n_outer=30, n_inner_per_geometry=25, seed=6)
        tg = ph.TrainingGeometry(base_geom, geo.probe_encoding(base_geom, probes),
                                 sp.build_collocation(base_geom, cfg))
        batch = ph.prepare_batch([tg], wave, model.spatial_mode)
        _, grads = ph.loss_and_grad(model, [batch], wave, want_grad=True)
        flat = np.concatenate([model.branch_params, model.trunk_params, model.output_bias])
        gflat = np.concatenate(grads)
        nb, nt = model.branch_params.size, model.trunk_params.size

        def loss_at(fl):
            m = dn.DeepOnetModel(model.branch_spec, fl[:nb], model.trunk_spec,
                                 fl[nb:nb + nt], fl[nb + nt:], model.latent,
                                 model.spatial_mode)
            rep, _ = ph.loss_and_grad(m, [batch], wave, want_grad=False)
            return rep.total

        h = 1e-6
        rng = np.random.default_rng(7)
        for i in rng.choice(flat.size, 60, replace=False):
            e = np.zeros(flat.size)
            e[i] = h
            fd = (loss_at(flat + e) - loss_at(flat - e)) / (2 * h)
            assert abs(fd - gflat[i]) / max(abs(gflat[i]), 1e-7) < 1e-4

    def test_total_mode_gradient_matches_fd(self, base_geom, probes, wave):
        from helmonet import deeponet as dn

        model = small_model(seed=8, spatial_mode="total")
        cfg = sp.SamplerConfig(n_interior_raw=40, n_outer=20, n_inner_per_geometry=15, seed=9)
        tg = ph.TrainingGeometry(base_geom, geo.probe_encoding(base_geom, probes),
                                 sp.build_collocation(base_geom, cfg))
        batch = ph.prepare_batch([tg], wave, "total")
        _, grads = ph.loss_and_grad(model, [batch], wave, want_grad=True)
        flat = np.concatenate([model.branch_params, model.trunk_params, model.output_bias])
        gflat = np.concatenate(grads)
        nb, nt = model.branch_params.size, model.trunk_params.size

        def loss_at(fl):
            m = dn.DeepOnetModel(model.branch_spec, fl[:nb], model.trunk_spec,
                                 fl[nb:nb + nt], fl[nb + nt:], model.latent, "total")
            rep, _ = ph.loss_and_grad(m, [batch], wave, want_grad=False)
            return rep.total

        h = 1e-6
        rng = np.random.default_rng(10)
        for i in rng.choice(flat.size, 40, replace=False):
            e = np.zeros(flat.size)
            e[i] = h
            fd = (loss_at(flat + e) - loss_at(flat - e)) / (2 * h)
            assert abs(fd - gflat[i]) / max(abs(gflat[i]), 1e-7) < 1e-4
