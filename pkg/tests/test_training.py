import numpy as np
import pytest

from helmonet import geometry as geo
from helmonet import physics as ph
from helmonet import sampling as sp
from helmonet import training as tr

from conftest import small_model

SMALL_SAMPLER = sp.SamplerConfig(n_interior_raw=500, n_outer=200, n_inner_per_geometry=100, seed=21)


def three_geoms():
    base = geo.PolarBoundary()
    return [base.rotated(np.deg2rad(a)) for a in (-30.0, 0.0, 30.0)]


class TestAdamStep:
    def cfg(self, **kw):
        return tr.TrainConfig(iterations=1, **kw)

    def test_zero_gradient_keeps_params(self):
        params = np.array([1.0, -2.0, 3.0])
        state = tr.AdamState.zeros(3)
        p2, s2 = tr.adam_step(params, np.zeros(3), state, self.cfg())
        np.testing.assert_array_equal(p2, [1.0, -2.0, 3.0])
        assert s2.t == 1

    def test_first_step_magnitude(self):
        cfg = self.cfg(learning_rate=1e-3)
        params = np.array([0.0])
        tr.adam_step(params, np.array([1.0]), tr.AdamState.zeros(1), cfg)
        assert params[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)

    def test_first_step_scale_invariance(self):
        # mhat / sqrt(vhat) = sign(g) at t = 1; epsilon perturbs at the 1e-6 level
        cfg = self.cfg()
        for c in (0.01, 1.0, 250.0):
            params = np.array([0.0])
            tr.adam_step(params, np.array([c]), tr.AdamState.zeros(1), cfg)
            assert abs(params[0]) == pytest.approx(1e-3, rel=1e-5)

    def test_nonfinite_gradient_aborts(self):
        with pytest.raises(tr.NonFiniteLossError):
            tr.adam_step(np.zeros(2), np.array([1.0, np.nan]), tr.AdamState.zeros(2), self.cfg())

    def test_shape_mismatch(self):
        with pytest.raises(tr.TrainingError):
            tr.adam_step(np.zeros(2), np.zeros(3), tr.AdamState.zeros(2), self.cfg())


class TestTrain:
    def test_zero_iterations_unchanged(self, wave):
        model = small_model(seed=30)
        cfg = tr.TrainConfig(iterations=0, dtype="float64", log_every=1)
        out, log = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        np.testing.assert_array_equal(out.branch_params, model.branch_params)
        np.testing.assert_array_equal(out.trunk_params, model.trunk_params)
        assert len(log.rows) == 1 and log.rows[0][0] == 0

    def test_smoke_loss_decreases(self, wave):
        model = small_model(seed=31, width=32, layers=4, latent=16)
        cfg = tr.TrainConfig(iterations=200, log_every=10, dtype="float32", seed=31)
        _, log = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        total = dict(zip(log.column("iteration"), log.column("total")))
        assert total[200] < total[10]

    def test_determinism(self, wave):
        model = small_model(seed=32)
        cfg = tr.TrainConfig(iterations=30, log_every=10, dtype="float32", seed=32)
        m1, log1 = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        m2, log2 = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        assert log1.rows == log2.rows or all(
            a[:5] == b[:5] for a, b in zip(log1.rows, log2.rows)
        )
        np.testing.assert_array_equal(m1.branch_params, m2.branch_params)
        np.testing.assert_array_equal(m1.trunk_params, m2.trunk_params)

    def test_logged_loss_equals_total_loss(self, wave, probes):
        model = small_model(seed=33)
        cfg = tr.TrainConfig(iterations=20, log_every=20, dtype="float64", seed=33,
                             chunk_size=None)
        geoms = three_geoms()
        trained, log = tr.train(model, geoms, wave, SMALL_SAMPLER, cfg, probes=probes)
        tgeoms = tr.build_training_geometries(geoms, SMALL_SAMPLER, probes)
        rep = ph.total_loss(trained, tgeoms, wave, cfg.loss_weights)
        last = log.rows[-1]
        assert last[4] == rep.total
        assert (last[1], last[2], last[3]) == (rep.pde, rep.gamma, rep.gamma_out)

    def test_chunked_equivalent_losses(self, wave):
        model = small_model(seed=34)
        geoms = three_geoms()
        cfg_a = tr.TrainConfig(iterations=10, log_every=10, dtype="float64", chunk_size=None)
        cfg_b = tr.TrainConfig(iterations=10, log_every=10, dtype="float64", chunk_size=64)
        _, log_a = tr.train(model, geoms, wave, SMALL_SAMPLER, cfg_a)
        _, log_b = tr.train(model, geoms, wave, SMALL_SAMPLER, cfg_b)
        for ra, rb in zip(log_a.rows, log_b.rows):
            assert ra[4] == pytest.approx(rb[4], rel=1e-10)

    def test_needs_geometry(self, wave):
        with pytest.raises(tr.TrainingError):
            tr.train(small_model(), [], wave, SMALL_SAMPLER, tr.TrainConfig(iterations=1))

    def test_nonfinite_loss_aborts_and_preserves_state(self, wave, tmp_path, monkeypatch):
        model = small_model(seed=35)
        calls = {"n": 0}
        real = tr.loss_and_grad

        def poisoned(*args, **kwargs):
            calls["n"] += 1
            report, grads = real(*args, **kwargs)
            if calls["n"] >= 3 and kwargs.get("want_grad", True):
                report.total = float("nan")
            return report, grads

        monkeypatch.setattr(tr, "loss_and_grad", poisoned)
        ckpt = tmp_path / "last.ckpt"
        with pytest.raises(tr.NonFiniteLossError, match="non-finite"):
            tr.train(model, three_geoms(), wave, SMALL_SAMPLER,
                     tr.TrainConfig(iterations=50, dtype="float32"),
                     checkpoint_path=str(ckpt))
        assert ckpt.exists()  # last finite state was dumped before aborting


class TestBatchOptions:
    def test_resampling_changes_sets_deterministically(self, wave):
        model = small_model(seed=36)
        geoms = three_geoms()
        cfg = tr.TrainConfig(iterations=6, log_every=1, dtype="float64", resample_every=3,
                             chunk_size=None)
        _, log_a = tr.train(model, geoms, wave, SMALL_SAMPLER, cfg)
        _, log_b = tr.train(model, geoms, wave, SMALL_SAMPLER, cfg)
        assert [r[:5] for r in log_a.rows] == [r[:5] for r in log_b.rows]
        fixed_cfg = tr.TrainConfig(iterations=6, log_every=1, dtype="float64",
                                   chunk_size=None)
        _, log_fixed = tr.train(model, geoms, wave, SMALL_SAMPLER, fixed_cfg)
        # identical until the first resample boundary, different after it
        assert log_a.rows[1][4] == log_fixed.rows[1][4]
        assert log_a.rows[4][4] != log_fixed.rows[4][4]

    def test_minibatch_windows_cover_all_rows(self, wave):
        model = small_model(seed=37)
        cfg = tr.TrainConfig(iterations=1, dtype="float64", minibatch_fraction=0.25,
                             chunk_size=None)
        provider = tr.BatchProvider(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        full = []
        seen = []
        for i in range(1, provider.windows_per_epoch + 1):
            (wb,) = provider.batches(i)
            seen.append(wb.pde_pack[0, :, 0])
            full.append(wb.pde_pack.shape[1])
        provider._ensure_full(1)
        n_total = provider._full.pde_pack.shape[1]
        xs = np.concatenate(seen)
        assert len(np.unique(np.round(xs, 12))) >= 0.95 * n_total
        assert sum(full) >= n_total

    def test_minibatch_training_deterministic_and_learns(self, wave):
        model = small_model(seed=38, width=24, layers=2, latent=8)
        cfg = tr.TrainConfig(iterations=120, log_every=40, dtype="float32",
                             minibatch_fraction=0.5, seed=38)
        m1, log1 = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        m2, log2 = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        np.testing.assert_array_equal(m1.trunk_params, m2.trunk_params)
        assert log1.rows[-1][4] < log1.rows[0][4]

    def test_arclength_inner_weighting(self, wave):
        cfg = sp.SamplerConfig(n_inner_per_geometry=4000, inner_weighting="arclength", seed=8)
        geom = geo.PolarBoundary()
        pts, nrm = sp.sample_inner(geom, cfg)
        assert np.abs(geo.sdf(geom, pts)).max() < 1e-10
        # density follows the parametric speed: compare two octants
        th = np.mod(np.arctan2(pts[:, 1] - 0.5, pts[:, 0] - 0.5), 2 * np.pi)
        grid = np.linspace(0, 2 * np.pi, 8, endpoint=False)
        counts = np.histogram(th, bins=np.append(grid, 2 * np.pi))[0]
        speeds = []
        for lo in grid:
            tt = np.linspace(lo, lo + np.pi / 4, 200)
            speeds.append(np.linalg.norm(geo.boundary_tangent(geom, tt), axis=1).mean())
        speeds = np.asarray(speeds)
        expected = speeds / speeds.sum() * len(pts)
        assert np.corrcoef(counts, expected)[0, 1] > 0.9


class TestResume:
    def test_split_run_bitwise(self, wave, tmp_path):
        model = small_model(seed=40)
        geoms = three_geoms()
        full_cfg = tr.TrainConfig(iterations=40, log_every=10, dtype="float32", seed=40)
        m_full, log_full = tr.train(model, geoms, wave, SMALL_SAMPLER, full_cfg)

        half_cfg = tr.TrainConfig(iterations=20, log_every=10, dtype="float32", seed=40)
        ckpt = tmp_path / "half.ckpt"
        tr.train(model, geoms, wave, SMALL_SAMPLER, half_cfg, checkpoint_path=str(ckpt))
        m_res, log_res = tr.resume(str(ckpt), geoms, wave, SMALL_SAMPLER, full_cfg)
        np.testing.assert_array_equal(m_res.branch_params, m_full.branch_params)
        np.testing.assert_array_equal(m_res.trunk_params, m_full.trunk_params)
        np.testing.assert_array_equal(m_res.output_bias, m_full.output_bias)
        tail = [r[:5] for r in log_full.rows if r[0] > 20]
        np.testing.assert_array_equal([r[:5] for r in log_res.rows], tail)

    def test_budget_mismatch_warns(self, wave, tmp_path):
        model = small_model(seed=41)
        geoms = three_geoms()
        cfg = tr.TrainConfig(iterations=5, dtype="float32", seed=41)
        ckpt = tmp_path / "m.ckpt"
        tr.train(model, geoms, wave, SMALL_SAMPLER, cfg, checkpoint_path=str(ckpt))
        other = sp.SamplerConfig(n_interior_raw=300, n_outer=100, n_inner_per_geometry=50, seed=3)
        cfg2 = tr.TrainConfig(iterations=6, dtype="float32", seed=41)
        with pytest.warns(RuntimeWarning, match="sampler"):
            tr.resume(str(ckpt), geoms, wave, other, cfg2)

    def test_corrupt_adam_state_rejected(self, wave, tmp_path):
        from helmonet import deeponet as dn

        model = small_model(seed=42)
        geoms = three_geoms()
        cfg = tr.TrainConfig(iterations=3, dtype="float32", seed=42)
        ckpt = tmp_path / "m.ckpt"
        tr.train(model, geoms, wave, SMALL_SAMPLER, cfg, checkpoint_path=str(ckpt))
        loaded, extra, header = dn.load_checkpoint(str(ckpt))
        extra["adam_m"] = extra["adam_m"][:-5]
        dn.save_checkpoint(loaded, tmp_path / "bad.ckpt", extra_arrays=extra,
                           extra_meta=header.get("extra_meta"))
        with pytest.raises(tr.TrainingError, match="optimizer state"):
            tr.resume(str(tmp_path / "bad.ckpt"), geoms, wave, SMALL_SAMPLER, cfg)

    def test_missing_adam_state_rejected(self, wave, tmp_path):
        from helmonet import deeponet as dn

        model = small_model(seed=43)
        dn.save_checkpoint(model, tmp_path / "plain.ckpt")
        with pytest.raises(tr.TrainingError, match="optimizer state"):
            tr.resume(str(tmp_path / "plain.ckpt"), three_geoms(), wave, SMALL_SAMPLER,
                      tr.TrainConfig(iterations=5))


class TestLogCsv:
    def test_loss_csv_byte_identical_across_runs(self, wave, tmp_path):
        model = small_model(seed=50)
        geoms = three_geoms()
        cfg = tr.TrainConfig(iterations=25, log_every=5, dtype="float32", seed=50)
        paths = []
        for tag in ("a", "b"):
            _, log = tr.train(model, geoms, wave, SMALL_SAMPLER, cfg)
            p = tmp_path / f"losses_{tag}.csv"
            tr.write_loss_csv(log, p)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_timing_csv_columns(self, wave, tmp_path):
        model = small_model(seed=51)
        cfg = tr.TrainConfig(iterations=5, log_every=5, dtype="float32")
        _, log = tr.train(model, three_geoms(), wave, SMALL_SAMPLER, cfg)
        p = tmp_path / "t.csv"
        tr.write_timing_csv(log, p)
        lines = p.read_text().strip().splitlines()
        assert lines[0] == "iteration,wall_time_s"
        assert len(lines) == len(log.rows) + 1

    def test_log_monotone_iterations(self):
        log = tr.TrainLog()
        rep = ph.LossReport(1.0, 1.0, 1.0, 3.0, (1, 1, 1))
        log.append(0, rep, 0.0)
        log.append(10, rep, 1.0)
        with pytest.raises(tr.TrainingError):
            log.append(10, rep, 2.0)
