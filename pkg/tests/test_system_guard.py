import json

import pytest

from system_guard import (
    FULL_CLOSED_SET,
    MAXIMAL_TAPS,
    ConfigError,
    deep_merge,
    load_experiment_config,
    load_fleet_config,
    validate_experiment_config,
    validate_fleet_config,
)
from tests.conftest import tiny_experiment_data
from tools.puf_sim import lfsr_period


def fleet(**overrides):
    data = {"lfsr_width": 16, "legit": [{"kind": "arbiter", "count": 2, "stages": 16}]}
    data.update(overrides)
    return data


class TestFleetConfig:
    def test_defaults_and_sequential_ids(self):
        cfg = validate_fleet_config(fleet(impostors=[{"kind": "sram", "count": 3, "rows": 10, "cols": 10}]))
        assert cfg.lfsr_taps == MAXIMAL_TAPS[16]
        assert cfg.device_ids("legit") == [0, 1]
        assert cfg.device_ids("impostors") == [2, 3, 4]

    def test_errors_carry_field_paths(self):
        with pytest.raises(ConfigError) as exc:
            validate_fleet_config(fleet(legit=[{"kind": "arbiter", "count": 0, "stages": 16}]))
        assert any(e.startswith("legit.0.count:") for e in exc.value.errors)

        with pytest.raises(ConfigError) as exc:
            validate_fleet_config(fleet(legit=[{"kind": "flash", "count": 1}]))
        assert any(e.startswith("legit.0.kind:") for e in exc.value.errors)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            validate_fleet_config(fleet(colour="blue"))

    def test_stage_count_must_match_lfsr(self):
        with pytest.raises(ConfigError, match="lfsr_width"):
            validate_fleet_config(fleet(legit=[{"kind": "arbiter", "count": 2, "stages": 32}]))

    def test_taps(self):
        with pytest.raises(ConfigError):
            validate_fleet_config(fleet(lfsr_taps=[14, 13]))
        with pytest.raises(ConfigError):
            validate_fleet_config(fleet(lfsr_taps=[16, 17]))
        with pytest.raises(ConfigError, match="no default taps"):
            validate_fleet_config({"lfsr_width": 7, "legit": [{"kind": "sram", "count": 2}]})

    @pytest.mark.parametrize("width", [4, 8, 16])
    def test_default_taps_are_maximal(self, width):
        assert lfsr_period(width, MAXIMAL_TAPS[width]) == 2 ** width - 1

    def test_overlapping_ids(self):
        with pytest.raises(ConfigError, match="already used"):
            validate_fleet_config(fleet(impostors=[{"kind": "sram", "count": 1, "start_id": 1}]))

    def test_stress_range(self):
        with pytest.raises(ConfigError):
            validate_fleet_config(fleet(legit=[{"kind": "dram", "count": 2, "stress_flip": [0.3, 0.1]}]))

    def test_default_fleet_file(self):
        cfg = load_fleet_config()
        assert len(cfg.device_ids("legit")) == 10
        assert len(cfg.device_ids("impostors")) == 5


class TestExperimentConfig:
    def test_tiny_config(self):
        cfg = validate_experiment_config(tiny_experiment_data())
        assert cfg.seeds == [7, 8]
        assert cfg.profile == "desk"
        assert len(cfg.config_hash()) == 12

    def test_hash_tracks_content(self):
        a = validate_experiment_config(tiny_experiment_data())
        b = validate_experiment_config(tiny_experiment_data())
        c = validate_experiment_config(tiny_experiment_data(repeats=3))
        assert a.config_hash() == b.config_hash() != c.config_hash()

    def test_full_profile_fills_hyperparameters(self):
        data = tiny_experiment_data(profile="full")
        data.pop("closed_set")
        cfg = validate_experiment_config(data)
        assert cfg.closed_set.epochs == FULL_CLOSED_SET["epochs"]
        assert cfg.closed_set.lr == FULL_CLOSED_SET["lr"]
        assert cfg.gan.n_d == 16  # explicit values still win

    def test_image_must_fit_memory_arrays(self):
        with pytest.raises(ConfigError, match="needs"):
            validate_experiment_config(tiny_experiment_data(image_width=40, image_height=40))
        with pytest.raises(ConfigError, match="rect crop"):
            validate_experiment_config(tiny_experiment_data(crop_mode="rect"))

    def test_open_set_needs_two_impostors(self):
        data = tiny_experiment_data()
        data["fleet"]["impostors"] = data["fleet"]["impostors"][:1]
        with pytest.raises(ConfigError, match="impostor"):
            validate_experiment_config(data)
        assert not validate_experiment_config({**data, "open_set": False}).open_set

    def test_needs_two_legit_devices(self):
        data = tiny_experiment_data(open_set=False)
        data["fleet"]["legit"] = [{"kind": "arbiter", "count": 1, "stages": 16}]
        with pytest.raises(ConfigError, match="K >= 2"):
            validate_experiment_config(data)

    def test_minimum_images(self):
        with pytest.raises(ConfigError) as exc:
            validate_experiment_config(tiny_experiment_data(images_per_device=4))
        assert any(e.startswith("images_per_device:") for e in exc.value.errors)

    def test_zero_std(self):
        with pytest.raises(ConfigError):
            validate_experiment_config(tiny_experiment_data(norm_std=[0.5, 0.0, 0.5]))


class TestLoaders:
    def test_default_experiment_resolves_fleet_file(self):
        cfg = load_experiment_config()
        assert cfg.name == "desk"
        assert cfg.fleet.master_seed == 2024
        assert (cfg.image_width, cfg.image_height) == (50, 50)

    def test_overrides_merge_deeply(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps(tiny_experiment_data()))
        cfg = load_experiment_config(str(path), {"gan": {"n_d": 32}, "repeats": 4})
        assert cfg.gan.n_d == 32
        assert cfg.gan.z_dim == 8
        assert cfg.repeats == 4

    def test_missing_and_invalid_files(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_experiment_config(str(tmp_path / "missing.json"))
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        with pytest.raises(ConfigError, match="not valid JSON"):
            load_experiment_config(str(bad))

    def test_deep_merge(self):
        base = {"a": {"b": 1, "c": 2}, "d": 3}
        assert deep_merge(base, {"a": {"b": 9}, "e": 4}) == {"a": {"b": 9, "c": 2}, "d": 3, "e": 4}
        assert base == {"a": {"b": 1, "c": 2}, "d": 3}
