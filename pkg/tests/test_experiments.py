"""Experiment toolkit tests: config resolution, slope fitting, CSV and
metadata plumbing, problem assembly, the windowed plateau runner, every
study command on a scaled-down budget, and the command line wrapper."""

import json

import numpy as np
import pytest

from statfem_ipla.cli import main
from statfem_ipla.experiments import (
    ConfigError,
    build_problem,
    cmd_condition_numbers,
    cmd_convergence_order,
    cmd_diffusivity,
    cmd_eigs,
    cmd_nonlinear,
    cmd_posterior_variance,
    cmd_solve,
    cmd_stability,
    coefficient_l2_norm,
    config_to_dict,
    default_config,
    derive_seed,
    draw_dataset,
    fit_order,
    interval_points,
    load_config,
    load_l2_norm,
    parse_override,
    read_csv,
    run_forcing_with_plateau,
    spiral_points,
    write_csv,
    write_metadata,
)
from statfem_ipla.model_nonlinear import newton_solve
from statfem_ipla.samplers import IplaConfig, ipla_forcing_run


# ---------------------------------------------------------------------------
# slope fitting


class TestFitOrder:
    def test_exact_half_order_recovered(self):
        ns = [8, 16, 32, 64]
        errors = [[3.0 * n ** -0.5] for n in ns]
        fit = fit_order(ns, errors)
        assert fit.slope == pytest.approx(0.5, abs=1e-12)
        assert fit.intercept == pytest.approx(np.log(3.0), abs=1e-12)

    def test_flat_errors_give_zero_slope(self):
        fit = fit_order([4, 8, 16], [[0.7], [0.7], [0.7]])
        assert fit.slope == pytest.approx(0.0, abs=1e-13)

    def test_mean_errors_property(self):
        fit = fit_order([4, 8, 16], [[1.0, 4.0], [2.0, 2.0], [1.0, 1.0]])
        assert fit.mean_errors == pytest.approx(np.exp(fit.mean_log_errors))
        # geometric mean of 1 and 4 is 2
        assert fit.mean_errors[0] == pytest.approx(2.0)
        assert fit.se_log_errors[0] > 0.0
        assert fit.se_log_errors[2] == 0.0

    def test_noisy_slope_recovered_within_tolerance(self):
        rng = np.random.default_rng(11)
        ns = [8, 16, 32, 64, 128]
        errors = [
            2.0 * n ** -0.5 * np.exp(0.05 * rng.standard_normal(20))
            for n in ns
        ]
        fit = fit_order(ns, errors)
        assert abs(fit.slope - 0.5) < 0.03

    def test_needs_three_ladder_points(self):
        with pytest.raises(ValueError):
            fit_order([8, 16], [[1.0], [0.5]])

    def test_one_error_array_per_point(self):
        with pytest.raises(ValueError):
            fit_order([8, 16, 32], [[1.0], [0.5]])

    def test_empty_replicate_array_rejected(self):
        with pytest.raises(ValueError):
            fit_order([8, 16, 32], [[1.0], [], [0.2]])

    def test_nonpositive_errors_rejected(self):
        with pytest.raises(ValueError):
            fit_order([8, 16, 32], [[1.0], [0.0], [0.2]])


# ---------------------------------------------------------------------------
# observation layouts


class TestObservationLayouts:
    def test_interval_points_interior_and_even(self):
        pts = interval_points(5)
        assert pts.shape == (5, 1)
        assert pts[:, 0] == pytest.approx(np.arange(1, 6) / 6.0)
        assert pts.min() > 0.0 and pts.max() < 1.0

    def test_spiral_points_stay_inside_radius(self):
        pts = spiral_points(40)
        assert pts.shape == (40, 2)
        r = np.hypot(pts[:, 0], pts[:, 1])
        assert r.max() <= 0.9 + 1e-12
        assert r.min() > 0.0

    def test_spiral_points_custom_radius(self):
        r = np.hypot(*spiral_points(25, r_max=0.5).T)
        assert r.max() <= 0.5 + 1e-12
        # golden-angle layout should not stack points
        assert len(np.unique(np.round(r, 12))) == 25


# ---------------------------------------------------------------------------
# configuration


class TestConfigResolution:
    def test_presets_fill_defaults(self):
        cfg = default_config("poisson-disc")
        assert cfg.problem == "poisson-disc"
        assert cfg.mesh_size == 8
        assert cfg.forcing_sigma2 == 100.0
        assert cfg.forcing_lengthscale == 0.2
        assert cfg.ipla.step_size == 0.2

    def test_default_config_merges_ipla_updates(self):
        cfg = default_config("poisson-1d", mesh_size=21,
                             ipla=dict(step_size=0.5))
        assert cfg.mesh_size == 21
        assert cfg.ipla.step_size == 0.5
        # untouched ipla preset fields survive the partial update
        assert cfg.ipla.n_particles == 8

    def test_default_config_unknown_problem(self):
        with pytest.raises(ConfigError):
            default_config("heat-3d")

    def test_file_beats_preset_and_override_beats_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({
            "problem": "poisson-1d",
            "mesh_size": 32,
            "ipla": {"step_size": 0.07},
        }))
        cfg = load_config(path, ("mesh_size=21", "ipla.n_iters=123"))
        assert cfg.mesh_size == 21            # override wins
        assert cfg.ipla.step_size == 0.07     # file wins over preset 0.02
        assert cfg.ipla.n_iters == 123
        assert cfg.forcing_sigma2 == 4.0      # preset survives

    def test_default_problem_selects_preset(self):
        cfg = load_config(None, (), default_problem="diffusivity-1d")
        assert cfg.problem == "diffusivity-1d"
        assert cfg.mesh_size == 50
        assert cfg.ipla.step_size == 0.001
        assert cfg.theta_prior_mean == 1.5

    def test_list_values_become_tuples(self):
        cfg = load_config(None, ("particle_ladder=[4, 8, 16]",))
        assert cfg.particle_ladder == (4, 8, 16)
        assert isinstance(cfg.particle_ladder, tuple)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ("not_a_setting=3",))

    def test_unknown_ipla_key_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ("ipla.not_a_setting=3",))

    def test_bad_ipla_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ("ipla.step_size=-0.5",))

    def test_bad_field_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ("mesh_size=-4",))

    def test_unknown_problem_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ("problem=heat-3d",))

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_non_object_file_rejected(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2, 3]")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_override_through_scalar_rejected(self):
        with pytest.raises(ConfigError):
            load_config(None, ("mesh_size=9", "mesh_size.x=1"))

    def test_parse_override_json_and_string_values(self):
        assert parse_override("ipla.step_size=0.5") == ("ipla.step_size", 0.5)
        assert parse_override("output_dir=runs/a") == ("output_dir", "runs/a")
        assert parse_override("ladder=[1,2]") == ("ladder", [1, 2])

    def test_parse_override_requires_equals(self):
        with pytest.raises(ConfigError):
            parse_override("mesh_size")

    def test_config_to_dict_round_trips_tuples(self):
        d = config_to_dict(default_config("poisson-1d"))
        assert d["particle_ladder"] == [8, 16, 32, 64, 128, 256]
        assert isinstance(d["ipla"], dict)
        assert d["ipla"]["n_particles"] == 8


class TestDeriveSeed:
    def test_deterministic(self):
        assert derive_seed(3, 1, 4) == derive_seed(3, 1, 4)

    def test_distinct_for_distinct_keys(self):
        seeds = {derive_seed(0, i, j) for i in range(5) for j in range(5)}
        assert len(seeds) == 25

    def test_fits_in_32_bits(self):
        s = derive_seed(123, 456)
        assert 0 <= s < 2**32


# ---------------------------------------------------------------------------
# CSV and metadata plumbing


class TestCsvIo:
    def test_round_trip_types(self, tmp_path):
        path = tmp_path / "t.csv"
        value = 0.123456789012345
        write_csv(path, ["i", "x", "flag", "tag"],
                  [[1, value, True, "alpha"], [2, 3e-17, False, "beta"]])
        header, rows = read_csv(path)
        assert header == ["i", "x", "flag", "tag"]
        assert len(rows) == 2
        assert rows[0][0] == "1"
        assert float(rows[0][1]) == pytest.approx(value, rel=1e-11)
        assert rows[0][2] == "1" and rows[1][2] == "0"
        assert rows[0][3] == "alpha"
        assert float(rows[1][1]) == pytest.approx(3e-17, rel=1e-11)

    def test_numpy_scalars_format_like_python(self, tmp_path):
        path = tmp_path / "np.csv"
        write_csv(path, ["a", "b", "c"],
                  [[np.int64(7), np.float64(0.25), np.bool_(True)]])
        _, rows = read_csv(path)
        assert rows[0] == ["7", "0.25", "1"]

    def test_metadata_keys_and_round_trip(self, tmp_path):
        cfg = default_config("poisson-1d", output_dir=str(tmp_path))
        path = tmp_path / "meta.json"
        meta = write_metadata(path, "solve", cfg, [tmp_path / "out.csv"],
                              extra={"note": 3}, wall_seconds=1.5)
        loaded = json.loads(path.read_text())
        assert loaded == meta
        assert loaded["command"] == "solve"
        assert loaded["seed"] == cfg.ipla.seed
        assert loaded["outputs"] == [str(tmp_path / "out.csv")]
        assert loaded["wall_clock_seconds"] == 1.5
        assert loaded["note"] == 3
        assert isinstance(loaded["version"], str) and loaded["version"]
        assert loaded["config"]["mesh_size"] == cfg.mesh_size


# ---------------------------------------------------------------------------
# problem assembly


class TestProblemBundles:
    def test_cache_returns_same_bundle(self):
        a = build_problem(default_config("poisson-1d", mesh_size=17))
        b = build_problem(default_config("poisson-1d", mesh_size=17,
                                         n_replicates=3))
        assert a is b  # replicate count is not part of the geometry key
        c = build_problem(default_config("poisson-1d", mesh_size=19))
        assert c is not a

    def test_linear_bundle_shapes(self):
        cfg = default_config("poisson-1d", mesh_size=17, n_y=6)
        bundle = build_problem(cfg)
        assert bundle.kind == "linear"
        assert bundle.model.n_u == 15
        assert bundle.model.H.shape == (6, 15)
        assert bundle.b_true.shape == (15,)
        assert bundle.b_true == pytest.approx(
            bundle.b_true_full[bundle.model.dof.free])

    def test_disc_bundle_uses_spiral_observations(self):
        cfg = default_config("poisson-disc", mesh_size=3, n_y=9)
        bundle = build_problem(cfg)
        assert bundle.kind == "linear"
        assert bundle.system.mesh.nodes.shape[1] == 2
        assert bundle.model.H.shape[0] == 9

    def test_diffusivity_bundle_kind(self):
        cfg = default_config("diffusivity-1d", mesh_size=15)
        bundle = build_problem(cfg)
        assert bundle.kind == "diffusivity"
        assert bundle.model is not None

    def test_nonlinear_bundle_has_zeroed_boundary_load(self):
        cfg = default_config("nonlinear-1d", mesh_size=9)
        bundle = build_problem(cfg)
        assert bundle.kind == "nonlinear"
        assert bundle.model is None and bundle.nonlinear is not None
        assert bundle.b_true_full[bundle.nonlinear.bc_nodes] == pytest.approx(0.0)
        free = bundle.nonlinear.linear.dof.free
        assert bundle.b_true == pytest.approx(bundle.b_true_full[free])

    def test_draw_dataset_reproducible_per_replicate(self):
        cfg = default_config("poisson-1d", mesh_size=13, n_y=5)
        bundle = build_problem(cfg)
        y0 = draw_dataset(bundle, cfg, 0)
        assert y0.shape == (5,)
        assert np.array_equal(y0, draw_dataset(bundle, cfg, 0))
        assert not np.array_equal(y0, draw_dataset(bundle, cfg, 1))


class TestFunctionNorms:
    def test_coefficient_norm_matches_analytic_integral(self):
        # || sin(pi x) ||_{L2(0,1)} = sqrt(1/2); P1 mass quadrature is O(h^2)
        bundle = build_problem(default_config("poisson-1d", mesh_size=401))
        model = bundle.model
        x = bundle.system.mesh.nodes[model.dof.free, 0]
        d = np.sin(np.pi * x)
        got = coefficient_l2_norm(model.mass, d)
        assert got == pytest.approx(np.sqrt(0.5), rel=1e-4)

    def test_load_norm_inverts_mass(self):
        bundle = build_problem(default_config("poisson-1d", mesh_size=31))
        mass = bundle.model.mass
        rng = np.random.default_rng(4)
        c = rng.standard_normal(mass.shape[0])
        assert load_l2_norm(mass, mass @ c) == pytest.approx(
            coefficient_l2_norm(mass, c), rel=1e-10)

    def test_norms_are_homogeneous(self):
        bundle = build_problem(default_config("poisson-1d", mesh_size=31))
        mass = bundle.model.mass
        d = np.linspace(-1.0, 1.0, mass.shape[0])
        assert coefficient_l2_norm(mass, 3.0 * d) == pytest.approx(
            3.0 * coefficient_l2_norm(mass, d), rel=1e-12)


# ---------------------------------------------------------------------------
# plateau runner


def _small_linear_case():
    cfg = default_config("poisson-1d", mesh_size=13, n_y=8)
    bundle = build_problem(cfg)
    y = draw_dataset(bundle, cfg, 0)
    return bundle.model, y


class TestPlateauRunner:
    def test_windowed_run_matches_uninterrupted(self):
        model, y = _small_linear_case()
        cfg = IplaConfig(n_particles=4, step_size=0.005, n_iters=300,
                         record_stride=10, seed=7)
        direct = ipla_forcing_run(model, y, cfg)
        windowed, plateau_iter = run_forcing_with_plateau(
            model, y, cfg, window=100, rtol=0.0)
        assert plateau_iter is None
        assert np.array_equal(windowed.iters, direct.iters)
        assert np.array_equal(windowed.params, direct.params)
        assert np.array_equal(windowed.grad_norms, direct.grad_norms)
        assert np.array_equal(windowed.final_param, direct.final_param)
        assert np.array_equal(windowed.final_particles, direct.final_particles)
        assert windowed.n_iters_run == 300

    def test_plateau_stops_early(self):
        model, y = _small_linear_case()
        cfg = IplaConfig(n_particles=4, step_size=0.005, n_iters=5000,
                         record_stride=10, seed=7)
        trace, plateau_iter = run_forcing_with_plateau(
            model, y, cfg, window=50, rtol=10.0)
        assert plateau_iter == 100
        assert trace.n_iters_run == 100
        assert trace.iters[-1] == 100

    def test_budget_exhaustion_reports_none(self):
        model, y = _small_linear_case()
        cfg = IplaConfig(n_particles=4, step_size=0.005, n_iters=120,
                         record_stride=10, seed=7)
        trace, plateau_iter = run_forcing_with_plateau(
            model, y, cfg, window=60, rtol=0.0)
        assert plateau_iter is None
        assert trace.n_iters_run == 120


# ---------------------------------------------------------------------------
# study commands on tiny budgets


class TestConvergenceCommand:
    def test_small_study_writes_csv_and_meta(self, tmp_path):
        cfg = default_config(
            "poisson-1d", mesh_size=13, n_y=8, n_replicates=2,
            particle_ladder=(2, 4, 8), plateau_window=200,
            output_dir=str(tmp_path),
            ipla=dict(n_particles=2, step_size=0.02, n_iters=400,
                      record_stride=20, seed=3),
        )
        fit = cmd_convergence_order(cfg)
        assert np.isfinite(fit.slope)
        header, rows = read_csv(tmp_path / "convergence.csv")
        assert header == ["n_particles", "replicate", "l2_error",
                          "fn_l2_error", "n_iters_run", "plateau_iter",
                          "diverged"]
        assert len(rows) == 6
        assert all(float(r[2]) > 0 for r in rows)
        meta = json.loads((tmp_path / "convergence_meta.json").read_text())
        assert meta["command"] == "convergence"
        assert meta["slope_l2"] == pytest.approx(fit.slope)
        assert "slope_fn_l2" in meta and "wall_clock_seconds" in meta
        assert meta["n_diverged"] == 0

    def test_rejects_wrong_problem(self, tmp_path):
        cfg = default_config("diffusivity-1d", output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            cmd_convergence_order(cfg)


class TestPosteriorVarianceCommand:
    def _config(self, tmp_path):
        return default_config(
            "poisson-1d", mesh_size=13, n_y=8,
            variance_particles=(4, 8, 16), output_dir=str(tmp_path),
            ipla=dict(n_particles=2, step_size=0.02, n_iters=400,
                      record_stride=20, seed=5),
        )

    def test_small_study_outputs(self, tmp_path):
        cfg = self._config(tmp_path)
        mare = cmd_posterior_variance(cfg)
        assert set(mare) == {4, 8, 16}
        assert all(m > 0 for m in mare.values())
        header, rows = read_csv(tmp_path / "posterior_variance.csv")
        assert header == ["node", "x", "analytic_var", "empirical_var_N4",
                          "empirical_var_N8", "empirical_var_N16"]
        assert len(rows) == 11  # free nodes of a 13-node interval
        meta = json.loads(
            (tmp_path / "posterior_variance_meta.json").read_text())
        assert set(meta["mean_abs_relative_error"]) == {"4", "8", "16"}

    def test_csv_bytes_are_deterministic(self, tmp_path):
        out1, out2 = tmp_path / "a", tmp_path / "b"
        from dataclasses import replace
        cfg = self._config(tmp_path)
        cmd_posterior_variance(replace(cfg, output_dir=str(out1)))
        cmd_posterior_variance(replace(cfg, output_dir=str(out2)))
        b1 = (out1 / "posterior_variance.csv").read_bytes()
        b2 = (out2 / "posterior_variance.csv").read_bytes()
        assert b1 == b2

    def test_rejects_wrong_problem(self, tmp_path):
        cfg = default_config("nonlinear-1d", output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            cmd_posterior_variance(cfg)


class TestStabilityCommand:
    def test_single_cell_grid(self, tmp_path):
        cfg = default_config(
            "poisson-1d", stability_sizes=(5,), stability_lengthscales=(0.1,),
            stability_n_iters=150, stability_particles=2,
            output_dir=str(tmp_path),
            ipla=dict(seed=2),
        )
        rows = cmd_stability(cfg)
        assert len(rows) == 1
        n, ell, lg_plain, lg_pre = rows[0]
        assert (n, ell) == (5, 0.1)
        assert np.isfinite(lg_plain) and np.isfinite(lg_pre)
        # preconditioning never shrinks the stable step on this problem
        assert lg_pre > lg_plain - 0.2
        header, file_rows = read_csv(tmp_path / "stability.csv")
        assert header == ["n_nodes", "lengthscale",
                          "log10_gamma_max_unpreconditioned",
                          "log10_gamma_max_preconditioned"]
        assert len(file_rows) == 1
        assert (tmp_path / "stability_meta.json").exists()


class TestConditionCommand:
    def test_two_sizes(self, tmp_path):
        cfg = default_config("poisson-1d", condition_sizes=(8, 16),
                             output_dir=str(tmp_path))
        rows = cmd_condition_numbers(cfg)
        assert len(rows) == 2
        for n, mu, L, kappa, mu_p, L_p, kappa_p in rows:
            assert 0 < mu < L
            assert kappa == pytest.approx(L / mu)
            assert kappa_p == pytest.approx(L_p / mu_p)
            assert kappa_p < kappa
        header, file_rows = read_csv(tmp_path / "condition_numbers.csv")
        assert header[0] == "n_nodes" and len(file_rows) == 2


class TestDiffusivityCommand:
    def test_traces_and_summary(self, tmp_path):
        cfg = default_config(
            "diffusivity-1d", mesh_size=15, warm_start_lengths=(0, 40),
            hit_tolerance=0.5, output_dir=str(tmp_path),
            ipla=dict(n_particles=4, step_size=0.001, n_iters=200, seed=8),
        )
        summary = cmd_diffusivity(cfg)
        assert len(summary) == 2
        header, rows = read_csv(tmp_path / "diffusivity_summary.csv")
        assert header == ["warm_start_len", "theta_final", "exp_theta_final",
                          "theta_max", "first_hit_iter", "diverged"]
        assert [int(r[0]) for r in rows] == [0, 40]
        assert all(r[5] == "0" for r in rows)

        _, cold = read_csv(tmp_path / "diffusivity_trace_warm0.csv")
        assert len(cold) == 200
        _, warm = read_csv(tmp_path / "diffusivity_trace_warm40.csv")
        assert len(warm) == 240
        # during the warm start theta sits at its prior mean with no grad
        assert all(float(r[1]) == 1.5 for r in warm[:40])
        assert all(float(r[2]) == 0.0 for r in warm[:40])
        assert any(float(r[1]) != 1.5 for r in warm[40:])

    def test_rejects_wrong_problem(self, tmp_path):
        cfg = default_config("poisson-1d", output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            cmd_diffusivity(cfg)


class TestNonlinearCommand:
    def test_three_methods_and_sweep(self, tmp_path):
        cfg = default_config(
            "nonlinear-1d", mesh_size=9, n_replicates=1, mc_samples=15,
            fot_particle_ladder=(1, 2), output_dir=str(tmp_path),
            ipla=dict(n_particles=2, step_size=0.005, n_iters=60,
                      record_stride=10, seed=1),
        )
        out = cmd_nonlinear(cfg)
        assert set(out["mean_error"]) == {"fot", "ut", "mc"}
        assert all(v > 0 for v in out["mean_error"].values())
        assert set(out["sweep_mean_error"]) == {"1", "2"}

        header, rows = read_csv(tmp_path / "nonlinear_compare.csv")
        assert header == ["method", "replicate", "l2_forcing_error",
                          "n_refreshes", "newton_iters"]
        assert sorted(r[0] for r in rows) == ["fot", "mc", "ut"]
        header, rows = read_csv(tmp_path / "nonlinear_fot_sweep.csv")
        assert header == ["n_particles", "replicate", "l2_forcing_error"]
        assert len(rows) == 2

        meta = json.loads((tmp_path / "nonlinear_meta.json").read_text())
        for key in ("mean_l2_error", "mean_wall_seconds",
                    "mean_refresh_seconds", "fot_sweep_mean_error"):
            assert key in meta

    def test_rejects_wrong_problem(self, tmp_path):
        cfg = default_config("poisson-1d", output_dir=str(tmp_path))
        with pytest.raises(ConfigError):
            cmd_nonlinear(cfg)


class TestSolveCommand:
    def test_linear_solution_csv(self, tmp_path):
        cfg = default_config("poisson-1d", mesh_size=9,
                             output_dir=str(tmp_path))
        u = cmd_solve(cfg)
        bundle = build_problem(cfg)
        assert u == pytest.approx(bundle.system.solve())
        header, rows = read_csv(tmp_path / "solution.csv")
        assert header == ["node", "x", "u"]
        assert len(rows) == 9
        assert float(rows[0][2]) == 0.0 and float(rows[-1][2]) == 0.0

    def test_nonlinear_solution_hits_boundary_values(self, tmp_path):
        cfg = default_config("nonlinear-1d", mesh_size=9,
                             output_dir=str(tmp_path))
        u = cmd_solve(cfg)
        assert u[0] == pytest.approx(0.0, abs=1e-12)
        assert u[-1] == pytest.approx(1.0, rel=1e-12)
        meta = json.loads((tmp_path / "solution_meta.json").read_text())
        assert meta["newton_iters"] >= 1
        assert meta["residual_norm"] < 1e-8
        bundle = build_problem(cfg)
        rhs = bundle.b_true_full.copy()
        rhs[bundle.nonlinear.bc_nodes] = 0.0
        u_ref, _ = newton_solve(bundle.nonlinear, rhs)
        assert u == pytest.approx(u_ref, abs=1e-12)


class TestEigsCommand:
    def test_export_and_interval_ground_mode(self, tmp_path):
        cfg = default_config("poisson-1d", mesh_size=17,
                             output_dir=str(tmp_path))
        eigs = cmd_eigs(cfg)
        # smallest Dirichlet Laplacian eigenvalue on (0,1) is pi^2
        assert eigs.values[0] == pytest.approx(np.pi**2, rel=0.02)
        assert (tmp_path / "eigs.csv").exists()
        meta = json.loads((tmp_path / "eigs_meta.json").read_text())
        assert meta["n_modes"] == eigs.values.shape[0]


# ---------------------------------------------------------------------------
# command line


class TestCli:
    def test_solve_returns_zero_and_honours_seed(self, tmp_path):
        rc = main(["solve", "--output-dir", str(tmp_path), "--seed", "5",
                   "--mesh_size=9"])
        assert rc == 0
        assert (tmp_path / "solution.csv").exists()
        meta = json.loads((tmp_path / "solution_meta.json").read_text())
        assert meta["seed"] == 5
        assert meta["config"]["mesh_size"] == 9

    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "statfem-ipla" in capsys.readouterr().out

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_unknown_override_key_exits_2(self, tmp_path):
        rc = main(["solve", "--output-dir", str(tmp_path), "--nope=1"])
        assert rc == 2

    def test_malformed_extra_flag_exits_2(self, tmp_path):
        rc = main(["solve", "--output-dir", str(tmp_path), "--badflag"])
        assert rc == 2

    def test_missing_config_file_exits_2(self, tmp_path):
        rc = main(["solve", "--config", str(tmp_path / "absent.json")])
        assert rc == 2

    def test_command_problem_mismatch_exits_2(self, tmp_path):
        rc = main(["nonlinear", "--output-dir", str(tmp_path),
                   "--problem=poisson-1d"])
        assert rc == 2

    def test_divergent_study_exits_3(self, tmp_path):
        rc = main([
            "convergence", "--output-dir", str(tmp_path), "--mesh_size=9",
            "--n_y=5", "--n_replicates=1", "--particle_ladder=[2,4,8]",
            "--plateau_window=100", "--max_divergence_frac=0.5",
            "--ipla.n_iters=100", "--ipla.n_particles=2",
            "--ipla.step_size=1e6", "--ipla.stepsize_guard=false",
        ])
        assert rc == 3
