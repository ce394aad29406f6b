"""
Configuration loading for voltreach.

Precedence, lowest to highest:
1. model defaults (voltreach.models)
2. the TOML file passed with --config
3. process environment (VOLTREACH_* variables, optionally from a .env file)
4. command-line flags

Environment variables:
    VOLTREACH_OUT_DIR    output directory (default "runs")
    VOLTREACH_SEED       master seed (default 0)
    VOLTREACH_WORKERS    Monte Carlo worker processes (default 1)
    VOLTREACH_LOG_LEVEL  logging level (default "INFO")
"""

import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv #for loading environment variables from a .env file
from pydantic import ValidationError

from voltreach.errors import ConfigError
from voltreach.models import RunConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

load_dotenv()

LOG_LEVEL = os.getenv("VOLTREACH_LOG_LEVEL", "INFO").upper()


def format_validation_error(err: ValidationError) -> str:
    """Flatten a pydantic error into 'dotted.key.path: message' lines."""
    lines = []
    for item in err.errors():
        path = ".".join(str(p) for p in item["loc"]) or "<root>"
        lines.append(f"{path}: {item['msg']}")
    return "; ".join(lines)


def _env_overrides() -> Dict[str, Any]:
    run: Dict[str, Any] = {}
    if "VOLTREACH_OUT_DIR" in os.environ:
        run["out_dir"] = os.environ["VOLTREACH_OUT_DIR"]
    if "VOLTREACH_SEED" in os.environ:
        run["seed"] = os.environ["VOLTREACH_SEED"]
    if "VOLTREACH_WORKERS" in os.environ:
        run["workers"] = os.environ["VOLTREACH_WORKERS"]
    return {"run": run} if run else {}


def _merge(base: Dict[str, Any], extra: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_toml(path: Path) -> Dict[str, Any]:
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: malformed TOML: {e}")


def build_config(data: Optional[Dict[str, Any]] = None,
                 overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Validate a raw configuration tree (plus environment and flag overrides)."""
    tree = _merge(data or {}, _env_overrides())
    tree = _merge(tree, overrides or {})
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(format_validation_error(e))


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    data = read_toml(Path(path)) if path else {}
    return build_config(data, overrides)


def config_hash(config: RunConfig) -> str:
    """SHA-256 of the canonical JSON form of the effective configuration.

    The output directory is left out so the same run written elsewhere keeps its hash.
    """
    tree = config.model_dump(mode="json")
    tree["run"].pop("out_dir", None)
    text = json.dumps(tree, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
