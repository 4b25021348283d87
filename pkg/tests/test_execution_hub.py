import argparse
import os
import sqlite3

import pytest

import execution_hub
from execution_hub import attach_message, build_params, execute_tool, load_registry
from tools.response_helper import get_message, verdict_message


def hub_args(**overrides):
    values = dict(action="run", params=None, config=None, out=None, model=None, filter=None, listen=None,
                  axis=None, values=None, provision=None, target=None, results=None, path=None, run_dir=None,
                  replay=False, impostor=False, png=False)
    values.update(overrides)
    return argparse.Namespace(**values)


@pytest.fixture
def logs_db(tmp_path, monkeypatch):
    path = str(tmp_path / "logs.db")
    monkeypatch.setattr(execution_hub, "LOGS_DB_PATH", path)
    execution_hub.init_logs_db()
    return path


def logged(path):
    with sqlite3.connect(path) as conn:
        return conn.execute("SELECT tool_name, action, status FROM execution_logs ORDER BY id").fetchall()


class TestBuildParams:
    def test_flags_override_json_and_paths_become_absolute(self):
        params = build_params(hub_args(params='{"config": "x.json", "measure": false}', config="exp.json",
                                       axis="n_d", values="16,64"))
        assert params["config"] == os.path.abspath("exp.json")
        assert params["measure"] is False
        assert (params["axis"], params["values"]) == ("n_d", "16,64")

    def test_filter_flag_names_the_snapshot(self):
        params = build_params(hub_args(action="filter_stats", filter="f.bin"))
        assert params["path"] == os.path.abspath("f.bin")

    def test_restore_target_is_a_file(self):
        params = build_params(hub_args(action="filter_restore", path="a.bin", target="b.bin"))
        assert params["target"] == os.path.abspath("b.bin")
        device = build_params(hub_args(action="device", target="127.0.0.1:9400", replay=True))
        assert device["target"] == "127.0.0.1:9400"
        assert device["replay"] is True


class TestExecuteTool:
    def test_every_hub_action_is_registered(self):
        registry = load_registry()
        for tool, action in execution_hub.HUB_ACTIONS.values():
            assert action in registry[tool]["actions"], (tool, action)

    def test_unknown_tool_and_action(self, logs_db):
        assert execute_tool("nope", "x", {}, registry={})["status"] == "error"
        result = execute_tool("replay_filter", "explode", {})
        assert result["status"] == "error"
        assert "filter_stats" in result["available"]
        assert logged(logs_db) == [("nope", "x", "error"), ("replay_filter", "explode", "error")]

    def test_subprocess_round_trip(self, tmp_path, logs_db):
        path = str(tmp_path / "f.bin")
        result = execute_tool("replay_filter", "filter_create", {"path": path, "n": 100, "p": 0.01})
        assert result["status"] == "success"
        assert result["k"] == 7
        assert os.path.exists(path)
        assert logged(logs_db) == [("replay_filter", "filter_create", "success")]

    def test_main_exit_codes(self, tmp_path, logs_db, capsys):
        assert execution_hub.main(["filter_stats", "--path", str(tmp_path / "missing.bin")]) == 1
        assert "Could not read the filter snapshot" in capsys.readouterr().out
        assert execution_hub.main(["wire_overhead", "--params", "{not json"]) == 1


class TestMessages:
    def test_success_interpolates_result(self):
        msg = attach_message({"status": "success", "pass_count": 4, "total": 5}, "fleet_tester", "run_all_tests")
        assert msg["message"] == "4/5 fleet checks passed."

    def test_error_carries_detail(self):
        msg = attach_message({"status": "error", "message": "boom"}, "harness", "train")
        assert msg["message"] == "Training failed: boom."
        assert get_message("unknown_tool", "x", False, error_detail="bad") == "Operation failed: bad."
        assert get_message("unknown_tool", "x", True) == "Operation completed."

    def test_verdicts(self):
        assert verdict_message("replay").startswith("Rejected")
        assert verdict_message("ok").startswith("Accepted")
        assert verdict_message("mystery") == "Verdict: mystery."
