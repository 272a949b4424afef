"""Model assembly, normalization, parameter budgets, checkpoints."""
import numpy as np
import pytest

from stagflow.data import DatasetConfig, Trajectory, generate_dataset, load_dataset
from stagflow.grid import GridSpec, divergence
from stagflow.model import (ModelConfig, NormStats, build_model,
                            fit_norm_stats, load_checkpoint,
                            match_parameter_budget, parameter_count,
                            save_checkpoint)
from stagflow.solvers.ins import make_grid


def swe_grid(n=12):
    return GridSpec(n, n, 10_000.0, "closed")


def rand_swe_state(rng, grid):
    from stagflow.grid import SWEState, boundary_mask
    return SWEState(grid, rng.normal(size=grid.cell_shape),
                    rng.normal(size=grid.facex_shape),
                    rng.normal(size=grid.facey_shape), boundary_mask(grid))


class TestConfig:
    def test_swe_rejects_momentum_constraints(self):
        with pytest.raises(ValueError, match="admits"):
            ModelConfig("swe", "p4", "rho_u")

    def test_ins_rejects_mass_only(self):
        with pytest.raises(ValueError, match="admits"):
            ModelConfig("ins", "p4", "M")

    def test_round_trip_dict(self):
        cfg = ModelConfig("ins", "p4m", "M+rho_u", hidden=3, depth=2, seed=7)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"task": "ins", "flux_capacitor": 1})


class TestBuild:
    def test_p1_ins_smoke_forward(self):
        cfg = ModelConfig("ins", "p1", "none", hidden=3, depth=2, seed=0)
        grid = make_grid(48)
        model = build_model(cfg, grid)
        st_rng = np.random.default_rng(0)
        from stagflow.grid import INSState
        st = INSState(grid, st_rng.normal(size=(48, 48)),
                      st_rng.normal(size=(48, 48)))
        out = model.step_ins(st)
        assert out.u.shape == (48, 48)
        assert np.all(np.isfinite(out.u))

    @pytest.mark.parametrize("task,cons", [("swe", "M"), ("ins", "none"),
                                           ("ins", "M+rho_u")])
    @pytest.mark.parametrize("group", ["p1", "p4", "p4m"])
    def test_analytic_count_matches_built(self, task, cons, group):
        if task == "swe" and cons not in ("none", "M"):
            pytest.skip("combination not admissible")
        cfg = ModelConfig(task, group, cons, hidden=2, depth=2, seed=1)
        grid = swe_grid() if task == "swe" else make_grid(12)
        model = build_model(cfg, grid)
        assert model.parameter_count() == parameter_count(cfg)

    def test_budget_match_within_two_percent(self):
        for cfg in (ModelConfig("swe", "p4m", "M", hidden=2, depth=2),
                    ModelConfig("ins", "p4m", "M+rho_u", hidden=2, depth=2),
                    ModelConfig("ins", "p4", "none", hidden=3, depth=2)):
            matched = match_parameter_budget(cfg)
            assert matched.group == "p1"
            target = parameter_count(cfg)
            got = parameter_count(matched)
            assert abs(got - target) / target <= 0.02

    def test_constrained_forward_divfree_untrained(self):
        cfg = ModelConfig("ins", "p4m", "M+rho_u", hidden=2, depth=2, seed=3)
        grid = make_grid(16)
        model = build_model(cfg, grid)
        rng = np.random.default_rng(4)
        from stagflow.grid import INSState
        st = INSState(grid, rng.normal(size=(16, 16)),
                      rng.normal(size=(16, 16)))
        out = model.step_ins(st)
        d0 = divergence(st.u, st.v, grid)
        d1 = divergence(out.u, out.v, grid)
        assert np.max(np.abs(d1 - d0)) <= 1e-12
        assert abs(out.u.sum() - st.u.sum()) <= 1e-12 * st.u.size

    def test_mass_constrained_swe_increment_zero_mean(self):
        cfg = ModelConfig("swe", "p4", "M", hidden=2, depth=1, seed=5)
        grid = swe_grid()
        model = build_model(cfg, grid)
        st = rand_swe_state(np.random.default_rng(6), grid)
        z1 = model.predict_zeta_next(st)
        assert abs((z1 - st.zeta).mean()) <= 1e-12


class TestNormStats:
    def _trajs(self, seed=0):
        cfg = DatasetConfig.from_dict({"task": "swe", "n_trajectories": 2,
                                       "steps": 4, "seed": seed,
                                       "swe": {"grid_n": 12}})
        import tempfile
        with tempfile.TemporaryDirectory() as tmp:
            generate_dataset(cfg, tmp)
            return load_dataset(tmp).trajectories

    def test_constant_plus_noise_normalizes(self):
        rng = np.random.default_rng(7)
        zeta = 3.0 + 0.5 * rng.standard_normal((6, 10, 10))
        u = rng.standard_normal((6, 10, 9))
        v = rng.standard_normal((6, 9, 10))
        tr = Trajectory("swe", swe_grid(10),
                        {"zeta": zeta, "u": u, "v": v})
        norm = fit_norm_stats([tr], "swe")
        zn = (zeta - norm.zeta[0]) / norm.zeta[1]
        assert abs(zn.mean()) < 1e-12
        assert abs(zn.std() - 1.0) < 1e-12

    def test_round_trip_identity(self):
        trajs = self._trajs()
        norm = fit_norm_stats(trajs, "swe")
        x = trajs[0].fields["zeta"][0]
        xn = (x - norm.zeta[0]) / norm.zeta[1]
        back = xn * norm.zeta[1] + norm.zeta[0]
        assert np.max(np.abs(back - x)) <= 1e-14 * max(1, np.max(np.abs(x)))

    def test_uv_share_one_pair_with_zero_mean(self):
        trajs = self._trajs(seed=1)
        norm = fit_norm_stats(trajs, "swe")
        assert norm.uv[0] == 0.0
        pooled = np.concatenate([trajs[0].fields["u"].ravel(),
                                 trajs[0].fields["v"].ravel(),
                                 trajs[1].fields["u"].ravel(),
                                 trajs[1].fields["v"].ravel()])
        assert abs(norm.uv[1] - np.sqrt(np.mean(pooled ** 2))) <= 1e-12

    def test_zero_variance_errors(self):
        tr = Trajectory("ins", make_grid(8),
                        {"u": np.zeros((3, 8, 8)), "v": np.zeros((3, 8, 8))})
        with pytest.raises(ValueError, match="variance"):
            fit_norm_stats([tr], "ins")

    def test_empty_errors(self):
        with pytest.raises(ValueError, match="empty"):
            fit_norm_stats([], "ins")


class TestCheckpoint:
    def test_round_trip_forward_bit_exact(self, tmp_path):
        cfg = ModelConfig("swe", "p4m", "M", hidden=2, depth=2, seed=8)
        grid = swe_grid()
        norm = NormStats((0.1, 0.4), (0.0, 0.2))
        model = build_model(cfg, grid, norm)
        st = rand_swe_state(np.random.default_rng(9), grid)
        before = model.predict_zeta_next(st)
        path = tmp_path / "model.ssck"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        after = loaded.predict_zeta_next(st)
        np.testing.assert_array_equal(before, after)

    def test_checkpoint_records_config_and_norm(self, tmp_path):
        cfg = ModelConfig("ins", "p4", "rho_u", hidden=2, depth=1, seed=10)
        model = build_model(cfg, make_grid(12),
                            NormStats(None, (0.0, 0.7)))
        path = tmp_path / "m.ssck"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.cfg == cfg
        assert loaded.norm.uv == (0.0, 0.7)
        assert loaded.grid == model.grid

    def test_corrupted_magic_errors(self, tmp_path):
        cfg = ModelConfig("ins", "p1", "none", hidden=1, depth=1, seed=11)
        model = build_model(cfg, make_grid(8))
        path = tmp_path / "m.ssck"
        save_checkpoint(model, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"JUNK"
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)
