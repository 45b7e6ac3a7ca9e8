import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helmonet import evaluation as ev
from helmonet import fem
from helmonet import geometry as geo
from helmonet import physics as ph

from conftest import small_model

TINY_FEM = ev.FemConfig(n_theta=48, n_radial=12, grading=2.0)


class TestRelativeError:
    def test_identical_is_zero(self):
        v = np.array([1 + 2j, -0.5j, 3.0])
        assert ev.relative_error(v, v) == 0.0

    def test_double_is_one(self):
        v = np.array([1 + 2j, -0.5j, 3.0])
        assert ev.relative_error(2 * v, v, "complex") == pytest.approx(1.0, abs=1e-15)

    def test_hand_case(self):
        pred = np.array([1 + 0j, 0 + 0j])
        ref = np.array([1 + 0j, 1 + 0j])
        assert ev.relative_error(pred, ref, "complex") == pytest.approx(0.5)

    def test_amplitude_mode_phase_blind(self):
        ref = np.array([1.0 + 0j, 2.0 + 0j])
        pred = ref * np.exp(1j * 0.7)
        assert ev.relative_error(pred, ref, "amplitude") == pytest.approx(0.0, abs=1e-15)
        assert ev.relative_error(pred, ref, "complex") > 0.1

    def test_zero_reference_rejected(self):
        with pytest.raises(ev.EvaluationError):
            ev.relative_error(np.ones(3), np.zeros(3))

    def test_length_mismatch_rejected(self):
        with pytest.raises(ev.EvaluationError):
            ev.relative_error(np.ones(3), np.ones(4))

    @given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 1000))
    @settings(max_examples=50, deadline=None)
    def test_joint_scaling_invariance(self, scale, seed):
        rng = np.random.default_rng(seed)
        ref = rng.normal(0, 1, 10) + 1j * rng.normal(0, 1, 10)
        pred = ref + rng.normal(0, 0.1, 10)
        a = ev.relative_error(pred, ref)
        b = ev.relative_error(scale * pred, scale * ref)
        assert b == pytest.approx(a, rel=1e-12)

    def test_deviation_homogeneity(self):
        rng = np.random.default_rng(3)
        ref = rng.normal(0, 1, 20) + 1j * rng.normal(0, 1, 20)
        dev = rng.normal(0, 1, 20)
        e1 = ev.relative_error(ref + dev, ref)
        e2 = ev.relative_error(ref + 2 * dev, ref)
        assert e2 == pytest.approx(2 * e1, rel=1e-12)


class TestSubdomain:
    def test_rotation_covariant_center(self):
        base = geo.PolarBoundary()
        s0 = ev.concavity_subdomain(base)
        alpha = np.deg2rad(25.0)
        s1 = ev.concavity_subdomain(base.rotated(alpha))
        expect = geo.rotate_about(np.asarray(s0.center), alpha)
        np.testing.assert_allclose(s1.center, expect, atol=1e-3)

    def test_center_on_minimum_radius(self):
        base = geo.PolarBoundary()
        s = ev.concavity_subdomain(base)
        r_center = np.hypot(s.center[0] - 0.5, s.center[1] - 0.5)
        th = np.linspace(0, 2 * np.pi, 100000)
        assert r_center == pytest.approx(geo.radius(base, th).min(), abs=1e-6)

    def test_mask(self):
        s = ev.SubdomainSpec(center=(0.3, 0.3), radius=0.1)
        pts = np.array([[0.3, 0.35], [0.9, 0.9]])
        np.testing.assert_array_equal(s.mask(pts), [True, False])


@pytest.fixture(scope="module")
def sweep_rows():
    model = small_model(seed=60)
    wp = ph.WaveParams()
    base = geo.PolarBoundary()
    return ev.angle_sweep(model, wp, [-30.0, 0.0, 30.0], base, TINY_FEM,
                          training_angles=(-30.0, 0.0, 30.0))


class TestAngleSweep:
    def test_rows_in_input_order(self, sweep_rows):
        assert [r.angle_deg for r in sweep_rows] == [-30.0, 0.0, 30.0]

    def test_errors_finite_nonnegative(self, sweep_rows):
        for r in sweep_rows:
            assert r.status == "ok"
            for v in (r.err_global, r.err_global_amp, r.err_d2, r.err_d2_amp, *r.cross):
                assert np.isfinite(v) and v >= 0

    def test_cross_at_own_angle_equals_global(self, sweep_rows):
        angles = (-30.0, 0.0, 30.0)
        for r in sweep_rows:
            k = angles.index(r.angle_deg)
            assert r.cross[k] == pytest.approx(r.err_global, rel=1e-12)

    def test_csv_round_stability(self, sweep_rows, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        ev.sweep_to_csv(sweep_rows, (-30.0, 0.0, 30.0), a)
        ev.sweep_to_csv(sweep_rows, (-30.0, 0.0, 30.0), b)
        assert a.read_bytes() == b.read_bytes()
        header = a.read_text().splitlines()[0]
        assert header.startswith("angle_deg,err_global,err_global_amp,err_d2,err_d2_amp,cross_")


class TestFieldGrid:
    def test_masked_fraction_matches_area(self, tmp_path, wave):
        geom = geo.PolarBoundary()
        info = ev.export_field_grid("fem", geom, wave, 256, tmp_path / "g",
                                    component="incident", fem_cfg=TINY_FEM)
        frac = info["masked_inside"] / 256**2
        assert frac == pytest.approx(geo.inclusion_area(geom), rel=0.05)

    def test_pgm_dimensions(self, tmp_path, wave):
        geom = geo.PolarBoundary()
        n = 64
        ev.export_field_grid("fem", geom, wave, n, tmp_path / "g", component="incident")
        raw = (tmp_path / "g.pgm").read_bytes()
        header, _, rest = raw.partition(b"\n255\n")
        assert header == f"P5\n{n} {n}".encode()
        assert len(rest) == n * n

    def test_fem_total_grid_deterministic(self, tmp_path, wave):
        geom = geo.PolarBoundary()
        ev.export_field_grid("fem", geom, wave, 48, tmp_path / "one", component="total",
                             fem_cfg=TINY_FEM)
        ev.export_field_grid("fem", geom, wave, 48, tmp_path / "two", component="total",
                             fem_cfg=TINY_FEM)
        assert (tmp_path / "one.csv").read_bytes() == (tmp_path / "two.csv").read_bytes()
        assert (tmp_path / "one.pgm").read_bytes() == (tmp_path / "two.pgm").read_bytes()

    def test_model_source_grid(self, tmp_path, wave):
        geom = geo.PolarBoundary()
        model = small_model(seed=61)
        info = ev.export_field_grid("model", geom, wave, 32, tmp_path / "m", model=model)
        assert (tmp_path / "m.csv").exists() and (tmp_path / "m.pgm").exists()
        sidecar = (tmp_path / "m.pgm.txt").read_text()
        assert "amplitude_min" in sidecar and "amplitude_max" in sidecar

    def test_bad_resolution(self, wave):
        with pytest.raises(ev.EvaluationError):
            ev.export_field_grid("fem", geo.PolarBoundary(), wave, 1, "x")


class TestDiagnostics:
    def test_default_all_pass(self):
        rep = ev.run_diagnostics(seed=0)
        assert rep.all_passed, rep.format()
        assert all(np.isfinite(c.measured) for c in rep.checks)

    def test_report_carries_measured_values(self):
        rep = ev.run_diagnostics(seed=1)
        text = rep.format()
        for c in rep.checks:
            assert c.name in text
        assert "measured" in text

    def test_coarse_mesh_reported_as_failure(self):
        rep = ev.run_diagnostics(seed=0, fem_cfg=TINY_FEM)
        failed = {c.name for c in rep.checks if not c.passed}
        assert "fem_mms_error" in failed

    def test_corrupted_jet_hook_fails(self):
        def corrupted(geom, p, order=2):
            jet = geo.sdf_jet(geom, p, order)
            jet.grad = jet.grad * 1.01
            return jet

        rep = ev.run_diagnostics(seed=0, sdf_jet_fn=corrupted, fem_cfg=TINY_FEM)
        failed = {c.name for c in rep.checks if not c.passed}
        assert "geometry_jet_fd" in failed


class TestCrossFem:
    def test_same_angle_small_error(self):
        wp = ph.WaveParams()
        base = geo.PolarBoundary()
        e = ev.cross_fem_error(base, wp, 10.0, 10.0, TINY_FEM)
        assert e < 1e-10

    def test_different_angles_larger(self):
        wp = ph.WaveParams()
        base = geo.PolarBoundary()
        e = ev.cross_fem_error(base, wp, 0.0, 30.0, TINY_FEM)
        assert e > 0.05
