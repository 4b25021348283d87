#!/usr/bin/env python3
"""
Execution Hub - single command-line entry point.

    python execution_hub.py <action> [--params JSON] [flags]

Tool actions run as subprocesses through data/tool_registry.json, each with its
own timeout, and every call is recorded in the SQLite execution log. `serve`
runs in-process.
"""

import argparse
import json
import logging
import os
import sqlite3
import subprocess
import sys
import time

from tools.response_helper import get_message

BASE_DIR = os.path.dirname(os.path.abspath(__file__))
TOOL_REGISTRY_FILE = os.path.join(BASE_DIR, "data", "tool_registry.json")
LOGS_DB_PATH = os.path.join(BASE_DIR, "data", "logs.db")
DEFAULT_TIMEOUT = 200

# hub action -> (tool, tool action)
HUB_ACTIONS = {
    "simulate": ("harness", "simulate"),
    "train": ("harness", "train"),
    "eval": ("harness", "eval"),
    "run": ("harness", "run"),
    "ablate": ("harness", "ablate"),
    "report": ("harness", "report"),
    "filter_stats": ("replay_filter", "filter_stats"),
    "filter_create": ("replay_filter", "filter_create"),
    "filter_restore": ("replay_filter", "filter_restore"),
    "device": ("auth_protocol", "device"),
    "wire_overhead": ("auth_protocol", "wire_overhead"),
    "provision_info": ("auth_protocol", "provision_info"),
    "instability_report": ("puf_sim", "instability_report"),
    "calibration_table": ("puf_sim", "calibration_table"),
    "manifest_info": ("openset_classifier", "manifest_info"),
    "fleet_check": ("fleet_tester", "run_all_tests"),
    "system_check": ("fleet_tester", "run_system_check"),
}

# flags that name files, resolved against the caller's cwd before dispatch
PATH_FLAGS = ("config", "out", "model", "path", "provision", "results", "run_dir")

logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")


# ============================================================================
# EXECUTION LOGGING (SQLite)
# ============================================================================

def init_logs_db():
    """Initialize logs.db with execution_logs table if it doesn't exist."""
    os.makedirs(os.path.dirname(LOGS_DB_PATH), exist_ok=True)
    conn = sqlite3.connect(LOGS_DB_PATH)
    cursor = conn.cursor()
    cursor.execute("""
        CREATE TABLE IF NOT EXISTS execution_logs (
            id INTEGER PRIMARY KEY,
            timestamp TEXT,
            tool_name TEXT,
            action TEXT,
            status TEXT,
            duration_ms INTEGER,
            error TEXT
        )
    """)
    conn.commit()
    conn.close()


def log_execution(tool, action, status, result, duration_ms=None):
    try:
        error_msg = None
        if isinstance(result, dict) and result.get("status") == "error":
            error_msg = result.get("message", "")
        conn = sqlite3.connect(LOGS_DB_PATH)
        conn.execute("""
            INSERT INTO execution_logs (timestamp, tool_name, action, status, duration_ms, error)
            VALUES (?, ?, ?, ?, ?, ?)
        """, (time.strftime("%Y-%m-%dT%H:%M:%S"), tool, action, status, duration_ms, error_msg))
        conn.commit()
        conn.close()
    except sqlite3.Error as e:
        logging.warning(f"Failed to log execution: {e}")


# ============================================================================
# REGISTRY
# ============================================================================

def load_registry(path: str = TOOL_REGISTRY_FILE) -> dict:
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ============================================================================
# CORE EXECUTION
# ============================================================================

def execute_tool(tool_name, action, params, registry=None):
    """Run one tool action in a subprocess and return its parsed JSON result."""
    registry = registry if registry is not None else load_registry()

    if tool_name not in registry:
        result = {"status": "error", "message": f"Tool '{tool_name}' not found"}
        log_execution(tool_name, action, "error", result)
        return result

    tool_info = registry[tool_name]
    script_path = os.path.join(BASE_DIR, tool_info.get("script_path", ""))
    if not os.path.isfile(script_path):
        result = {"status": "error", "message": f"Script not found: {script_path}"}
        log_execution(tool_name, action, "error", result)
        return result

    actions = tool_info.get("actions", {})
    if action not in actions:
        result = {"status": "error", "message": f"Action '{action}' not found", "available": list(actions)}
        log_execution(tool_name, action, "error", result)
        return result

    timeout = actions[action].get("timeout_seconds", DEFAULT_TIMEOUT)
    module = os.path.splitext(tool_info["script_path"])[0].replace(os.sep, ".")

    start_time = time.time()
    try:
        cmd = [sys.executable, "-m", module, action, "--params", json.dumps(params)]
        proc = subprocess.run(cmd, capture_output=True, text=True, timeout=timeout, cwd=BASE_DIR)
        duration_ms = round((time.time() - start_time) * 1000)

        output = proc.stdout.strip()
        stderr_output = proc.stderr.strip() if proc.stderr else ""
        try:
            parsed = json.loads(output)
        except json.JSONDecodeError:
            parsed = {"raw_output": output, "stderr": stderr_output}

        has_traceback = "Traceback" in stderr_output
        explicit_error = parsed.get("status") == "error"
        status = "error" if (explicit_error or has_traceback) else "success"
        if has_traceback and not explicit_error:
            parsed["status"] = "error"
            parsed["_traceback_detected"] = True
            parsed["stderr"] = stderr_output

        log_execution(tool_name, action, status, parsed, duration_ms)
        return parsed

    except subprocess.TimeoutExpired:
        duration_ms = round((time.time() - start_time) * 1000)
        result = {"status": "error", "message": f"Timeout after {timeout}s"}
        log_execution(tool_name, action, "timeout", result, duration_ms)
        return result

    except OSError as e:
        duration_ms = round((time.time() - start_time) * 1000)
        result = {"status": "error", "message": str(e)}
        log_execution(tool_name, action, "error", result, duration_ms)
        return result


def attach_message(result, tool_name, action):
    """Replace or add the human-readable message from data/response_messages.json."""
    if not isinstance(result, dict):
        return result
    if result.get("status") == "error":
        detail = result.get("message") or result.get("stderr") or "Unknown error"
        result["message"] = get_message(tool_name, action, False, error_detail=detail)
    else:
        result["message"] = get_message(tool_name, action, True, result)
    return result


# ============================================================================
# SERVE (in-process)
# ============================================================================

def run_server(args, params):
    from jarvis import ServerSettings, serve

    settings = ServerSettings.from_env(
        model_path=args.model or params.get("model"),
        filter_path=args.filter or params.get("filter"),
        key_path=params.get("key"),
        listen=args.listen or params.get("listen"),
        insert_policy=params.get("insert_policy"),
    )
    start_time = time.time()
    try:
        serve(settings)
        log_execution("jarvis", "serve", "success", {"status": "success"}, round((time.time() - start_time) * 1000))
    except Exception as e:
        log_execution("jarvis", "serve", "error", {"status": "error", "message": str(e)})
        raise


# ============================================================================
# MAIN
# ============================================================================

def build_params(args) -> dict:
    params = json.loads(args.params) if args.params else {}
    flags = {
        "config": args.config,
        "out": args.out,
        "model": args.model,
        "axis": args.axis,
        "values": args.values,
        "provision": args.provision,
        "target": args.target,
        "results": args.results,
        "path": args.path or args.filter,
        "run_dir": args.run_dir,
    }
    for key, value in flags.items():
        if value is None:
            continue
        if key in PATH_FLAGS:
            value = os.path.abspath(value)
        params[key] = value
    if args.replay:
        params["replay"] = True
    if args.impostor:
        params["impostor"] = True
    if args.png:
        params["png"] = True
    # filter_restore copies --path onto --target, which is a file here
    if args.action == "filter_restore" and args.target:
        params["target"] = os.path.abspath(args.target)
    return params


def main(argv=None):
    init_logs_db()

    parser = argparse.ArgumentParser(description="PUF authentication framework")
    parser.add_argument("action", choices=sorted([*HUB_ACTIONS, "serve"]))
    parser.add_argument("--params", type=str)
    parser.add_argument("--config")
    parser.add_argument("--out")
    parser.add_argument("--model")
    parser.add_argument("--filter")
    parser.add_argument("--listen")
    parser.add_argument("--axis")
    parser.add_argument("--values")
    parser.add_argument("--provision")
    parser.add_argument("--target")
    parser.add_argument("--results")
    parser.add_argument("--path")
    parser.add_argument("--run-dir", dest="run_dir")
    parser.add_argument("--replay", action="store_true")
    parser.add_argument("--impostor", action="store_true")
    parser.add_argument("--png", action="store_true")
    args = parser.parse_args(argv)

    try:
        params = build_params(args)
    except json.JSONDecodeError as e:
        print(json.dumps({"status": "error", "message": f"--params is not valid JSON: {e}"}, indent=4))
        return 1

    if args.action == "serve":
        run_server(args, params)
        return 0

    tool_name, tool_action = HUB_ACTIONS[args.action]
    result = attach_message(execute_tool(tool_name, tool_action, params), tool_name, tool_action)
    print(json.dumps(result, indent=4))
    return 1 if result.get("status") == "error" else 0


if __name__ == "__main__":
    sys.exit(main())
