#!/usr/bin/env python3
"""
Human-readable messages for tool results and authentication verdicts.
Reads templates from data/response_messages.json.
"""

import json
import os
import re

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
DATA_DIR = os.path.join(os.path.dirname(SCRIPT_DIR), "data")
MESSAGES_FILE = os.path.join(DATA_DIR, "response_messages.json")

FALLBACK = {"_fallback": {"success": "Operation completed.", "error": "Operation failed: {error_detail}."}}

_messages_cache = None
_messages_mtime = 0


def _load_messages():
    """Load messages from JSON file, reloading when the file changes."""
    global _messages_cache, _messages_mtime

    try:
        current_mtime = os.path.getmtime(MESSAGES_FILE)
        if _messages_cache is None or current_mtime > _messages_mtime:
            with open(MESSAGES_FILE, "r", encoding="utf-8") as f:
                _messages_cache = json.load(f)
            _messages_mtime = current_mtime
        return _messages_cache
    except (FileNotFoundError, json.JSONDecodeError):
        return FALLBACK


def _interpolate(template: str, context_vars: dict) -> str:
    """Replace {variable} placeholders; missing variables become empty strings."""
    def replace_var(match):
        return str(context_vars.get(match.group(1), ""))

    return re.sub(r"\{(\w+)\}", replace_var, template)


def get_success_message(tool_name: str, action: str, context_vars: dict = None) -> str:
    """
    Example:
        >>> get_success_message("harness", "run", {"out": "runs/desk-1a2b"})
        "Experiment finished. Results and report written to runs/desk-1a2b."
    """
    messages = _load_messages()
    template = messages.get(tool_name, {}).get(action, {}).get("success")
    if template is None:
        template = messages.get("_fallback", {}).get("success", "Operation completed.")
    return _interpolate(template, context_vars or {})


def get_error_message(tool_name: str, action: str, error_detail: str) -> str:
    messages = _load_messages()
    template = messages.get(tool_name, {}).get(action, {}).get("error")
    if template is None:
        template = messages.get("_fallback", {}).get("error", "Operation failed: {error_detail}.")
    return _interpolate(template, {"error_detail": error_detail})


def get_message(tool_name: str, action: str, success: bool, context_vars: dict = None, error_detail: str = None) -> str:
    if success:
        return get_success_message(tool_name, action, context_vars or {})
    return get_error_message(tool_name, action, error_detail or "Unknown error")


def verdict_message(reason: str, context_vars: dict = None) -> str:
    """Operator-facing text for an AuthResponse reason."""
    verdicts = _load_messages().get("_verdicts", {})
    template = verdicts.get(reason, "Verdict: {reason}.")
    return _interpolate(template, {"reason": reason, **(context_vars or {})})
