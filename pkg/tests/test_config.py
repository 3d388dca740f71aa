"""Tests for configuration management."""

import json
from unittest.mock import patch

import pytest

from src.ectr.config import (
    EctrConfig,
    apply_overrides,
    build_run_config,
    load_run_config,
    parse_flat_config,
)
from src.ectr.errors import ConfigError


class TestEctrConfig:
    """Test the process-level configuration class."""

    @patch.dict('os.environ', {}, clear=True)
    def test_config_default_values(self):
        """Test configuration with default values."""
        config = EctrConfig()

        assert config.log_mode == "info"
        assert config.jobs == 1
        assert config.sweep_cap == 256
        assert config.tolerance == 1e-4
        assert config.log_level == "INFO"

    @patch.dict('os.environ', {
        'ECTR_LOG': 'trace',
        'ECTR_JOBS': '4',
        'ECTR_SWEEP_CAP': '10',
        'ECTR_TOLERANCE': '1e-6',
    })
    def test_config_from_environment(self):
        """Test configuration from environment variables."""
        config = EctrConfig()

        assert config.log_mode == "trace"
        assert config.log_level == "DEBUG"
        assert config.jobs == 4
        assert config.sweep_cap == 10
        assert config.tolerance == 1e-6

    @patch.dict('os.environ', {'ECTR_LOG': 'QUIET'})
    def test_log_mode_case_insensitive(self):
        """Test ECTR_LOG is case insensitive."""
        config = EctrConfig()
        assert config.log_level == "WARNING"

    @patch.dict('os.environ', {'ECTR_LOG': 'loud'})
    def test_validation_unknown_log_mode(self):
        """Test validation rejects unknown log modes."""
        config = EctrConfig()
        assert config.log_level == "INFO"
        with pytest.raises(ValueError, match="ECTR_LOG"):
            config.validate()

    @patch.dict('os.environ', {'ECTR_JOBS': '0'})
    def test_validation_jobs(self):
        """Test validation of worker count."""
        with pytest.raises(ValueError, match="ECTR_JOBS"):
            EctrConfig().validate()

    @patch.dict('os.environ', {'ECTR_JOBS': 'many', 'ECTR_SWEEP_CAP': '8'})
    def test_unparsable_number_fails_validation(self):
        """Test a non-numeric variable is reported by validate, not at construction."""
        config = EctrConfig()

        assert config.jobs == 1
        assert config.sweep_cap == 8
        with pytest.raises(ValueError, match="ECTR_JOBS must be a number, got 'many'"):
            config.validate()

    @pytest.mark.parametrize("name", ["ECTR_SWEEP_CAP", "ECTR_TOLERANCE"])
    def test_unparsable_numbers_named(self, name):
        """Test each numeric variable names itself when unparsable."""
        with patch.dict('os.environ', {name: '1e-4x'}):
            config = EctrConfig()
        with pytest.raises(ValueError, match=name):
            config.validate()

    @patch.dict('os.environ', {'ECTR_TOLERANCE': '-1'})
    def test_validation_tolerance(self):
        """Test validation of the tolerance."""
        with pytest.raises(ValueError, match="ECTR_TOLERANCE"):
            EctrConfig().validate()

    @patch.dict('os.environ', {}, clear=True)
    def test_validation_success(self):
        """Test successful validation."""
        EctrConfig().validate()

    def test_artifact_version(self):
        """Test the manifest version string."""
        assert EctrConfig().get_artifact_version().startswith("ectr/")


class TestFlatConfig:
    """Test the flat section.key = value format."""

    def test_parse_sections(self, flat_config_text):
        """Test keys land in their sections as raw strings."""
        sections = parse_flat_config(flat_config_text)

        assert sections["simulation"]["n_per_env"] == "150"
        assert sections["train"]["method"] == "erm"
        assert sections["sweep"]["seed"] == "0, 1, 2"

    def test_comments_and_blank_lines(self):
        """Test comments and blank lines are ignored."""
        sections = parse_flat_config("\n# header\ntrain.beta = 0.25  # trailing\n\n")
        assert sections == {"train": {"beta": "0.25"}}

    def test_missing_equals(self):
        """Test a line without '=' is rejected with its line number."""
        with pytest.raises(ConfigError, match=":2:"):
            parse_flat_config("train.beta = 1\ntrain.gamma\n")

    def test_missing_section(self):
        """Test a key without a section is rejected."""
        with pytest.raises(ConfigError, match="no section"):
            parse_flat_config("beta = 1\n")

    def test_duplicate_key(self):
        """Test duplicate keys are rejected."""
        with pytest.raises(ConfigError, match="duplicate"):
            parse_flat_config("train.beta = 1\ntrain.beta = 2\n")

    def test_build_validates_values(self, flat_config_text):
        """Test raw strings are converted by the models."""
        run = build_run_config(parse_flat_config(flat_config_text))

        assert run.simulation.n_per_env == 150
        assert run.simulation.p_s_test == [0.9, 0.1]
        assert run.train.hidden == [4]
        assert run.sweep.beta == [0.1, 1.0]
        assert run.sweep.seed == [0, 1, 2]

    def test_unknown_section(self):
        """Test unknown sections are named in the error."""
        with pytest.raises(ConfigError, match="plotting"):
            build_run_config({"plotting": {"dpi": "300"}})

    def test_unknown_key(self):
        """Test unknown keys inside a known section are rejected."""
        with pytest.raises(ConfigError, match="learning_rate"):
            build_run_config({"train": {"learning_rate": "0.1"}})

    def test_unknown_method_lists_valid_methods(self):
        """Test an unknown method string reports the valid choices."""
        with pytest.raises(ConfigError) as exc_info:
            build_run_config({"train": {"method": "irm_magic"}})

        message = str(exc_info.value)
        assert "train.method" in message
        assert "ectr_known" in message
        assert "group_dro" in message

    def test_zero_samples_rejected(self):
        """Test n_per_env = 0 is a configuration error."""
        with pytest.raises(ConfigError, match="n_per_env"):
            build_run_config({"simulation": {"n_per_env": "0"}})


class TestLoadRunConfig:
    """Test loading configuration files from disk."""

    def test_load_flat_file(self, tmp_path, flat_config_text):
        """Test loading a flat config file."""
        path = tmp_path / "run.cfg"
        path.write_text(flat_config_text)

        run = load_run_config(path)
        assert run.train.method == "erm"
        assert run.train.epochs == 2

    def test_load_manifest(self, tmp_path, flat_config_text):
        """Test a JSON manifest's config object re-validates to the same run."""
        flat = tmp_path / "run.cfg"
        flat.write_text(flat_config_text)
        run = load_run_config(flat)

        manifest = tmp_path / "manifest.json"
        manifest.write_text(json.dumps({"command": "train", "config": run.model_dump(mode="json")}))

        assert load_run_config(manifest) == run

    def test_manifest_without_config(self, tmp_path):
        """Test a JSON file without a config object is rejected."""
        path = tmp_path / "manifest.json"
        path.write_text(json.dumps({"command": "train"}))
        with pytest.raises(ConfigError, match="config"):
            load_run_config(path)

    def test_missing_file(self, tmp_path):
        """Test a missing file is a configuration error."""
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "absent.cfg")

    def test_seed_override(self, tmp_path, flat_config_text):
        """Test --seed overrides both simulation and training seeds."""
        path = tmp_path / "run.cfg"
        path.write_text(flat_config_text)
        run = apply_overrides(load_run_config(path), seed=99)

        assert run.simulation.seed == 99
        assert run.train.seed == 99

    def test_no_override(self, flat_config_text):
        """Test no override returns the run unchanged."""
        run = build_run_config(parse_flat_config(flat_config_text))
        assert apply_overrides(run) is run
