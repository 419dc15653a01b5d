import json

import pytest
from pydantic import ValidationError

from config.settings import (DEFAULT_GLOBAL_RATE, ConfigManager, FractalSettings, IngestSettings,
                             RunConfig, StreamSettings, create_default_config_file, get_settings,
                             load_config_from_file, select_algorithms)
from services.grid import GridSpec
from services.placement import Algorithm
from utils.exceptions import ConfigError


class TestRunConfig:
    def test_defaults(self):
        config = RunConfig()
        assert config.seed == 0
        assert [a.algorithm for a in config.algorithms] == list(Algorithm)
        assert config.ingest.excluded_hours == [0, 1, 2, 3, 4, 5, 6]
        assert config.grid.shape == (64, 64)

    def test_derived_seeds_are_stable_and_distinct(self):
        config = RunConfig(seed=7)
        assert config.derive_seed("opt") == RunConfig(seed=7).derive_seed("opt")
        assert config.derive_seed("opt") != config.derive_seed("ftl_ch")
        assert config.derive_seed("opt") != RunConfig(seed=8).derive_seed("opt")

    def test_resolved_algorithms_fill_missing_seeds(self):
        config = RunConfig(seed=3, algorithms=[{"algorithm": "urand_nh"},
                                               {"algorithm": "ftl_ch", "seed": 99}])
        resolved = config.resolved_algorithms()
        assert resolved[0].seed == config.derive_seed("urand_nh")
        assert resolved[1].seed == 99
        # The configured entries are left as given
        assert config.algorithms[0].seed is None

    def test_radius_below_cell_side(self):
        with pytest.raises(ValidationError):
            RunConfig(grid={"epsilon": 200.0}, algorithms=[{"algorithm": "opt", "epsilon_prime": 150}])

    def test_duplicate_algorithms(self):
        with pytest.raises(ValidationError):
            RunConfig(algorithms=[{"algorithm": "opt"}, {"algorithm": "opt"}])

    def test_unknown_key(self):
        with pytest.raises(ValidationError):
            RunConfig(seeds=3)

    def test_negative_seed(self):
        with pytest.raises(ValidationError):
            RunConfig(seed=-1)


class TestSections:
    def test_excluded_hours_are_sorted_and_unique(self):
        assert IngestSettings(excluded_hours=[5, 1, 5]).excluded_hours == [1, 5]

    def test_excluded_hours_range(self):
        with pytest.raises(ValidationError):
            IngestSettings(excluded_hours=[24])

    def test_fit_range_order(self):
        with pytest.raises(ValidationError):
            FractalSettings(fit_range=(800, 100))
        assert FractalSettings(fit_range=(100, 800)).fit_range == (100, 800)

    def test_stream_defaults_to_global_rate(self):
        spec = StreamSettings().to_spec(GridSpec(), seed=4)
        assert spec.global_rate == DEFAULT_GLOBAL_RATE
        assert spec.seed == 4
        assert spec.attractor.scale == 6400.0

    def test_stream_that_does_not_fit(self):
        with pytest.raises(ConfigError):
            StreamSettings(n_requests=10).to_spec(GridSpec(rows=8, cols=8), seed=0)

    def test_stream_spec_uses_derived_seed(self):
        config = RunConfig(seed=11, stream={"n_requests": 5})
        assert config.stream_spec().seed == config.derive_seed("synth")
        assert config.stream_spec().n_requests == 5


class TestSelectAlgorithms:
    def test_reuses_configured_parameters(self):
        data = {"algorithms": [{"algorithm": "ftl_ch", "epsilon_prime": 800.0}]}
        selected = select_algorithms(data, ["opt", "ftl_ch"])
        assert selected == [{"algorithm": "opt"}, {"algorithm": "ftl_ch", "epsilon_prime": 800.0}]

    def test_unknown_name(self):
        with pytest.raises(ConfigError) as exc:
            select_algorithms({}, ["greedy"])
        assert "opt" in exc.value.details["choices"]


class TestConfigManager:
    def test_without_file(self):
        assert ConfigManager().settings == RunConfig()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigManager(config_file=str(tmp_path / "absent.json"))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{seed: 1")
        with pytest.raises(ConfigError) as exc:
            ConfigManager(config_file=str(path))
        assert "JSON" in exc.value.message

    def test_non_object(self, tmp_path):
        path = tmp_path / "list.json"
        path.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            ConfigManager(config_file=str(path))

    def test_unknown_key_names_location(self, write_config):
        with pytest.raises(ConfigError) as exc:
            ConfigManager(config_file=write_config({"grid": {"cell_size": 5}}))
        assert "grid.cell_size" in exc.value.message

    def test_flags_override_file(self, write_config):
        path = write_config({"seed": 1, "out_dir": "a", "logging": {"log_level": "DEBUG"}})
        manager = ConfigManager(config_file=path,
                                overrides={"seed": 5, "out_dir": None, "logging.log_level": "warning"})
        assert manager.settings.seed == 5
        assert manager.settings.out_dir == "a"
        assert manager.settings.logging.log_level == "WARNING"

    def test_override_into_scalar(self, write_config):
        with pytest.raises(ConfigError):
            ConfigManager(config_file=write_config({"seed": 1}), overrides={"seed.value": 2})

    def test_algorithm_flags(self, write_config):
        path = write_config({"algorithms": [{"algorithm": "pp_lh", "history_m": 10}]})
        manager = ConfigManager(config_file=path, algorithms=["pp_lh", "urand_nh"])
        labels = [a.label for a in manager.settings.algorithms]
        assert labels == ["pp_lh", "urand_nh"]
        assert manager.settings.algorithms[0].history == 10

    def test_get_dotted(self):
        manager = ConfigManager(overrides={"seed": 12})
        assert manager.get("seed") == 12
        assert manager.get("grid.epsilon") == 100.0
        assert manager.get("grid.missing", "x") == "x"

    def test_soft_issues(self, write_config, tmp_path):
        path = write_config({"ingest": {"excluded_hours": list(range(24))},
                             "input": str(tmp_path / "nothing.csv"),
                             "fractal": {"ladder_floor": 200.0, "fit_range": [100.0, 800.0]}})
        issues = ConfigManager(config_file=path).validate_config()
        assert len(issues) == 3

    def test_logging_config(self):
        log = ConfigManager().get_logging_config()
        assert log["log_level"] == "INFO"
        assert log["max_file_size"] == 50 * 1024 * 1024

    def test_save_and_reload(self, tmp_path):
        manager = ConfigManager(overrides={"seed": 21, "grid.rows": 16})
        target = tmp_path / "nested" / "saved.json"
        manager.save_config(str(target))
        assert load_config_from_file(str(target)).settings == manager.settings


class TestDefaultConfigFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "run.json"
        create_default_config_file(str(path))
        data = json.loads(path.read_text())
        assert [a["algorithm"] for a in data["algorithms"]] == ["urand_nh", "pp_lh", "ftl_ch", "opt"]
        settings = get_settings(str(path))
        assert settings.algorithms[1].history == 20
        assert settings.stream.global_rate == DEFAULT_GLOBAL_RATE
