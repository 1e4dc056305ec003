"""TOML config loading for the CLI.

The file is organized into sections (``run``, ``scheduler``, ``model``,
``training``, ``data``, ``capacity``) whose keys map one-to-one onto
:class:`~fedmoesim.federation.SimConfig` fields.  Unknown sections or keys
are rejected by name; every value is type-checked before the SimConfig
validators run.  The JSON Schema in ``docs/config.schema.json`` documents the
same structure.
"""

from __future__ import annotations

import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .federation import SimConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# section -> (toml key -> SimConfig field)
SECTION_FIELDS: dict[str, dict[str, str]] = {
    "run": {
        "rounds": "num_rounds",
        "clients_per_round": "clients_per_round",
        "strategy": "strategy",
        "seed": "seed",
        "workers": "workers",
    },
    "scheduler": {
        "alpha": "alpha",
        "delta": "delta",
        "gamma": "gamma",
        "w_f": "w_f",
        "w_u": "w_u",
        "system_cap": "system_cap",
        "coverage_repair": "coverage_repair",
        "fitness_decay_target": "fitness_decay_target",
    },
    "model": {
        "input_dim": "input_dim",
        "hidden_dim": "hidden_dim",
        "num_classes": "num_classes",
        "num_experts": "num_experts",
    },
    "training": {
        "epochs": "epochs",
        "lr": "lr",
        "batch_size": "batch_size",
    },
    "data": {
        "num_clients": "num_clients",
        "samples_per_client": "samples_per_client",
        "noise_sigma": "noise_sigma",
        "skew": "skew",
        "test_samples": "test_samples",
    },
    "capacity": {
        "memory_budgets": "memory_budgets",
        "compute_rates": "compute_rates",
        "bandwidths_down": "bandwidths_down",
        "bandwidths_up": "bandwidths_up",
        "latencies": "latencies",
        "availability": "availability",
        "expert_memory_cost": "expert_memory_cost",
        "expert_param_bytes": "expert_param_bytes",
        "expert_compute_cost": "expert_compute_cost",
    },
}

_FIELD_TYPES = {f.name: f.type for f in fields(SimConfig)}
_INT_FIELDS = {name for name, t in _FIELD_TYPES.items() if t == "int"}
_FLOAT_FIELDS = {name for name, t in _FIELD_TYPES.items() if t == "float"}
_BOOL_FIELDS = {name for name, t in _FIELD_TYPES.items() if t == "bool"}
_STR_FIELDS = {name for name, t in _FIELD_TYPES.items() if t == "str"}


def _coerce(section: str, key: str, field_name: str, value: Any) -> Any:
    where = f"[{section}] {key}"
    if field_name in _BOOL_FIELDS:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if field_name in _INT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if field_name in _FLOAT_FIELDS:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if field_name in _STR_FIELDS:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    # remaining fields are numeric tuples
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{where} must be a non-empty array of numbers, got {value!r}")
    out = []
    for item in value:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"{where} must contain numbers only, got {item!r}")
        out.append(float(item))
    return tuple(out)


def config_from_dict(raw: dict, source: str = "<config>") -> SimConfig:
    """Build a SimConfig from parsed TOML data, rejecting unknown names."""
    updates: dict[str, Any] = {}
    for section, content in raw.items():
        if section not in SECTION_FIELDS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        if not isinstance(content, dict):
            raise ConfigError(f"{source}: [{section}] must be a table")
        known = SECTION_FIELDS[section]
        for key, value in content.items():
            if key not in known:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
            field_name = known[key]
            updates[field_name] = _coerce(section, key, field_name, value)
    config = replace(SimConfig(), **updates)
    config.validate()
    return config


def load_config(path: str | Path) -> SimConfig:
    """Parse and validate a TOML config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        with open(p, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: invalid TOML: {exc}") from exc
    return config_from_dict(raw, source=str(p))
