import os
import sys

import pytest

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (ConfigError, ExperimentConfig, coerce_value, expand_sweep, load_config, parse_config_text,
                    scaled_width, sweep_keys)


class TestParsing:

    def test_flat_file_with_comments_and_sweeps(self):
        text = "# experiment\nbase_model = neumf\nphi = 0.1, 0.5  # two sizes\n\nmethod=de-rrd\n"
        values = parse_config_text(text)
        assert values == {"base_model": ["neumf"], "phi": ["0.1", "0.5"], "method": ["de-rrd"]}

    def test_unknown_key_and_bad_lines(self):
        with pytest.raises(ConfigError):
            parse_config_text("colour = blue\n")
        with pytest.raises(ConfigError):
            parse_config_text("phi 0.1\n")
        with pytest.raises(ConfigError):
            parse_config_text("epochs = many\n")

    def test_paths_are_never_split(self):
        assert parse_config_text("data_path = /tmp/a,b.tsv\n") == {"data_path": ["/tmp/a,b.tsv"]}

    def test_booleans(self):
        assert coerce_value("de_squared_norm", "yes") is True
        assert coerce_value("de_squared_norm", "0") is False
        with pytest.raises(ConfigError):
            coerce_value("de_squared_norm", "maybe")

    def test_sweep_expands_serially(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text("method = de\nphi = 0.1, 0.5\nlambda_de = 0.01, 0.001\n")
        configs = load_config(str(path), {"seed": "3"})
        assert len(configs) == 4
        assert [(c.phi, c.lambda_de) for c in configs] == [(0.1, 0.01), (0.1, 0.001), (0.5, 0.01), (0.5, 0.001)]
        assert all(c.seed == 3 for c in configs)
        assert sweep_keys(configs) == ["phi", "lambda_de"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.cfg"))


class TestValidation:

    def test_defaults_are_valid(self):
        cfg = ExperimentConfig().validate()
        assert cfg.resolved_teacher_dim == 200
        assert cfg.student_dim == 20
        assert cfg.weight_de == 1e-2 and cfg.weight_rrd == 1e-3
        assert cfg.uninteresting_count == cfg.rrd_k

    def test_neumf_defaults(self):
        cfg = ExperimentConfig(base_model="neumf").validate()
        assert cfg.resolved_teacher_dim == 128
        assert cfg.weight_de == 1e-4 and cfg.weight_rrd == 1e-1

    def test_scaled_width(self):
        assert scaled_width(0.1, 200) == 20
        assert scaled_width(0.1, 64) == 6
        assert scaled_width(0.5, 5) == 3
        assert scaled_width(0.01, 10) == 1

    def test_lambda_grid(self):
        """Weights must come from the grid; zero switches a term off."""
        base = ExperimentConfig()
        assert base.with_overrides({"method": "de", "lambda_de": "0"}).validate().weight_de == 0.0
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "de", "lambda_de": "0.3"}).validate()

    def test_keys_of_other_methods_rejected(self):
        base = ExperimentConfig()
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "none", "rrd_k": "5"}).validate()
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "rd", "num_experts": "3"}).validate()
        base.with_overrides({"method": "de-rrd", "rrd_k": "5", "num_experts": "3"}).validate()

    def test_selection_gradient_floor(self):
        """The floor belongs to DE runs and cannot be negative."""
        base = ExperimentConfig()
        assert base.with_overrides({"method": "de", "tau_grad_floor": "0"}).validate().tau_grad_floor == 0.0
        assert base.with_overrides({"method": "de-rrd"}).validate().tau_grad_floor == 1e-3
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "de", "tau_grad_floor": "-1e-3"}).validate()
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "rd", "tau_grad_floor": "1e-2"}).validate()

    def test_cross_key_limits(self):
        base = ExperimentConfig()
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "rd", "epochs": "10", "rd_warmup_epochs": "10"}).validate()
        with pytest.raises(ConfigError):
            base.with_overrides({"method": "rrd", "rrd_k": "20", "cache_size": "10"}).validate()
        with pytest.raises(ConfigError):
            base.with_overrides({"phi": "1.5"}).validate()
        with pytest.raises(ConfigError):
            base.with_overrides({"base_model": "neumf", "teacher_dim": "10", "phi": "0.1"}).validate()

    def test_run_names_distinguish_ablations(self):
        base = ExperimentConfig()
        plain = base.with_overrides({"method": "de-rrd"})
        ablated = base.with_overrides({"method": "de-rrd", "de_mode": "attention", "rrd_mode": "full_ranking"})
        assert plain.run_name == "bpr_de-rrd_phi0.1_seed0"
        assert ablated.method_label == "de-rrd-attention-full_ranking"
        assert plain.run_name != ablated.run_name

    def test_saved_config_reloads(self):
        """The rendered config parses back to the same values for every method."""
        for method in ("none", "rd", "cd", "de", "rrd", "de-rrd"):
            cfg = ExperimentConfig().with_overrides({"method": method, "seed": "4"}).validate()
            (again,) = expand_sweep(parse_config_text(cfg.to_text()))
            assert again == cfg
