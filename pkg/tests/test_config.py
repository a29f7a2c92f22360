import logging
from pathlib import Path

import pytest

from core.helpers.config import (
    BudgetError,
    ConfigError,
    apply_overrides,
    build_filter_config,
    check_budget,
    estimate_cost,
    load_config,
    parse_experiment,
    resolve,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


class TestDefaults:
    def test_empty_config(self):
        cfg = build_filter_config({})
        assert cfg.n_members == 100
        assert cfg.sampler.nfe == 500
        assert cfg.sampler.eps == 0.008
        assert cfg.training.epochs == 500
        assert cfg.schedule.kind == "cosine"
        assert cfg.dynamics.kind == "lorenz63"
        assert cfg.measurement.kind == "identity"
        assert cfg.measurement_set == tuple(range(100, 2501, 100))
        assert cfg.eval_window == (2000, 2500)

    def test_lorenz96_system_defaults(self):
        cfg = build_filter_config({"dynamics": {"kind": "lorenz96"}})
        assert cfg.dynamics.dim == 64
        assert cfg.n_steps == 100
        assert cfg.gap == 5
        assert cfg.eval_window == (25, 100)
        assert cfg.init_perturbation == 1.0
        assert cfg.score_net.hidden_width == 256
        assert cfg.deviations == ["score model is an MLP instead of a 1D U-Net for Lorenz-96"]

    def test_file_overrides_system_defaults(self):
        cfg = build_filter_config({"dynamics": {"kind": "lorenz96", "dim": 40}, "filter": {"gap": 10}})
        assert cfg.dynamics.dim == 40
        assert cfg.gap == 10

    def test_enkf_has_no_deviation(self):
        cfg = build_filter_config({"dynamics": {"kind": "lorenz96"}, "filter": {"method": "enkf"}})
        assert cfg.deviations == []

    def test_training_and_init_defaults(self):
        cfg = build_filter_config({})
        assert cfg.training.epoch_mode == "single_batch"
        assert cfg.ensemble_init == "perturbed_draw"
        assert cfg.deviations == []

    def test_full_pass_epochs_are_declared(self):
        cfg = build_filter_config({"training": {"epoch_mode": "full_pass"}})
        assert cfg.deviations == ["each training epoch is a full minibatch pass instead of one Adam update"]

    def test_unknown_epoch_mode_rejected(self):
        with pytest.raises(ConfigError, match="epoch_mode"):
            build_filter_config({"training": {"epoch_mode": "sweep"}})

    def test_resolved_is_fully_populated(self):
        res = resolve({})
        assert res["training"]["finetune_layers"] == 2
        assert res["training"]["t_sampling"] == "per_example"


class TestValidation:
    def test_unknown_key_named(self):
        with pytest.raises(ConfigError, match="sampler.nfe_steps"):
            build_filter_config({"sampler": {"nfe_steps": 10}})

    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="unknown section"):
            build_filter_config({"optimizer": {}})

    def test_wrong_type(self):
        with pytest.raises(ConfigError, match="filter.n_members"):
            build_filter_config({"filter": {"n_members": "many"}})

    def test_bool_is_not_int(self):
        with pytest.raises(ConfigError):
            build_filter_config({"filter": {"n_members": True}})

    def test_int_accepted_for_float(self):
        assert build_filter_config({"measurement": {"sigma": 2}}).measurement.sigma == 2.0

    def test_gap_and_steps_exclusive(self):
        with pytest.raises(ConfigError, match="mutually exclusive"):
            build_filter_config({"filter": {"gap": 10, "measurement_steps": [10, 20]}})

    def test_explicit_measurement_steps(self):
        cfg = build_filter_config({"filter": {"measurement_steps": [30, 10, 20]}})
        assert cfg.gap is None
        assert cfg.measurement_set == (10, 20, 30)

    def test_step_zero_ignored_with_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="core.helpers.config"):
            cfg = build_filter_config({"filter": {"measurement_steps": [0, 5]}})
        assert cfg.measurement_set == (5,)
        assert "step 0 is ignored" in caplog.text

    def test_measurement_step_out_of_range(self):
        with pytest.raises(ConfigError):
            build_filter_config({"filter": {"n_steps": 10, "measurement_steps": [11], "eval_window": [0, 10]}})

    def test_eval_window_bounds(self):
        with pytest.raises(ConfigError, match="eval_window"):
            build_filter_config({"filter": {"n_steps": 10, "eval_window": [5, 20]}})

    def test_eps_beyond_terminal(self):
        with pytest.raises(ConfigError, match="t_terminal"):
            build_filter_config({"sampler": {"eps": 0.001}})

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigError, match="does not match"):
            build_filter_config({"measurement": {"dim": 4}})

    def test_bad_operator_reported(self):
        with pytest.raises(ConfigError, match="measurement"):
            build_filter_config({"measurement": {"kind": "dense", "matrix": [[1, 0, 0], [0, -1, 0], [0, 0, 1]]}})

    def test_bad_method(self):
        with pytest.raises(ConfigError, match="filter.method"):
            build_filter_config({"filter": {"method": "particle"}})

    def test_too_few_members(self):
        with pytest.raises(ConfigError):
            build_filter_config({"filter": {"n_members": 1}})


class TestOverrides:
    def test_gap_sweep_replaces_explicit_steps(self):
        raw = {"filter": {"measurement_steps": [10]}}
        out = apply_overrides(raw, {"filter.gap": 25})
        assert out["filter"] == {"gap": 25}
        assert raw["filter"] == {"measurement_steps": [10]}

    def test_unknown_path(self):
        with pytest.raises(ConfigError, match="does not name"):
            apply_overrides({}, {"dynamics.viscosity": 1.0})

    def test_experiment_section_not_sweepable(self):
        with pytest.raises(ConfigError):
            apply_overrides({}, {"experiment.jobs": 2})


class TestExperiment:
    def test_sweep_points_product(self, tiny_raw):
        raw = {**tiny_raw, "experiment": {**tiny_raw["experiment"], "sweep": {"measurement.sigma": [0.5, 1.0], "filter.n_members": [4, 8]}}}
        spec = parse_experiment(raw)
        assert len(spec.sweep_points()) == 4
        assert {"measurement.sigma": 1.0, "filter.n_members": 4} in spec.sweep_points()
        assert spec.build({"measurement.sigma": 0.5}, "enkf").measurement.sigma == 0.5

    def test_no_sweep_is_single_point(self, tiny_raw):
        assert parse_experiment(tiny_raw).sweep_points() == [{}]

    def test_empty_sweep_values(self, tiny_raw):
        raw = {**tiny_raw, "experiment": {"sweep": {"measurement.sigma": []}}}
        with pytest.raises(ConfigError, match="non-empty"):
            parse_experiment(raw)

    def test_bad_sweep_value_names_point(self, tiny_raw):
        raw = {**tiny_raw, "experiment": {"sweep": {"filter.n_members": [8, 1]}}}
        with pytest.raises(ConfigError, match="sweep point"):
            parse_experiment(raw)

    def test_unknown_method(self, tiny_raw):
        with pytest.raises(ConfigError, match="experiment.methods"):
            parse_experiment({**tiny_raw, "experiment": {"methods": ["pf"]}})

    def test_negative_seed(self, tiny_raw):
        with pytest.raises(ConfigError):
            parse_experiment({**tiny_raw, "experiment": {"seeds": [-1]}})


class TestBudget:
    def test_cost_counts_sampler_work(self, tiny_cfg, tiny_raw):
        enkf = build_filter_config({**tiny_raw, "filter": {**tiny_raw["filter"], "method": "enkf"}})
        assert estimate_cost(enkf) == 8 * 3 * 12
        assert estimate_cost(tiny_cfg) == 8 * 3 * 12 + 8 * 3 * 10 * 3

    def test_over_budget(self, tiny_raw):
        with pytest.raises(BudgetError, match="exceeds budget"):
            parse_experiment({**tiny_raw, "experiment": {"budget": 10.0}})

    def test_large_dimension_needs_opt_in(self):
        raw = {"dynamics": {"kind": "lorenz96", "dim": 600}, "filter": {"n_members": 2, "n_steps": 2, "gap": 1, "eval_window": [0, 2]}}
        with pytest.raises(BudgetError, match="allow_large"):
            parse_experiment(raw)
        spec = parse_experiment({**raw, "experiment": {"allow_large": True}})
        assert check_budget(spec) > 0


class TestLoadConfig:
    def test_loads_yaml(self, tiny_config_file):
        spec = load_config(tiny_config_file)
        assert spec.seeds == (0, 1)
        assert spec.base.n_members == 8

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_config(str(tmp_path / "nope.yaml"))

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("filter:\n  n_members: 10\n  gap: [1, 2\n")
        with pytest.raises(ConfigError, match="line"):
            load_config(str(path))

    @pytest.mark.parametrize("name", ["lorenz63.yaml", "lorenz96.yaml", "lorenz96_gap.yaml"])
    def test_shipped_configs_parse(self, name):
        spec = load_config(str(CONFIGS / name))
        assert spec.methods
