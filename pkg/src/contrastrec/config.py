"""Run configuration: a flat INI file with one section per pipeline stage.

Every CLI flag has a config twin; flags win. Unknown sections or keys are
rejected so typos fail loudly, and a config round-trips losslessly through
save/load.
"""
from __future__ import annotations

import configparser
import hashlib
import io
from pathlib import Path

from .errors import ValidationError


def _bool(text: str) -> bool:
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"not a boolean: {text!r}")


# section -> key -> (parser, default)
SCHEMA = {
    "run": {
        "outdir": (str, "out"),
        "seed": (int, 0),
        "domain": (str, "product"),
    },
    "data": {
        "records": (str, ""),
        "profiles": (str, ""),
        "history_len": (int, 5),
        "split_ratio": (float, 0.8),
        "users": (int, 200),
        "items": (int, 50),
        "tokens": (int, 8),
        "label_noise": (float, 0.1),
        "history_impurity": (float, 0.35),
        "match_rate": (float, 0.5),
    },
    "backend": {
        "kind": (str, "stub"),
        "endpoint": (str, ""),
        "model": (str, ""),
        "timeout": (float, 30.0),
        "max_concurrency": (int, 1),
        "retry_count": (int, 2),
        "augment": (_bool, False),
    },
    "autoencoder": {
        "maxlen": (int, 20),
        "dim": (int, 8),
        "hidden": (int, 64),
        "lr": (float, 0.01),
        "batch": (int, 32),
        "epochs": (int, 600),
        "seed": (int, 0),
        "mask_pad": (_bool, False),
        "dedupe": (_bool, True),
    },
    "model": {
        "task": (str, "classification"),
        "variant": (str, "full"),
        "lr": (float, 0.1),
        "batch": (int, 128),
        "epochs": (int, 300),
        "seed": (int, 0),
        "linear_head": (_bool, False),
    },
    "theory": {
        "experiment": (str, "rates"),
        "trials": (int, 50),
        "seed": (int, 0),
    },
}


class RunConfig:
    """Typed view over the schema with dict-style section access."""

    def __init__(self, values=None):
        self.values = {
            section: {key: default for key, (_, default) in keys.items()}
            for section, keys in SCHEMA.items()
        }
        if values:
            for section, keys in values.items():
                for key, value in keys.items():
                    self.set(section, key, value)

    def __getitem__(self, section: str) -> dict:
        if section not in self.values:
            raise ValidationError(f"unknown config section {section!r}")
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in SCHEMA:
            raise ValidationError(f"unknown config section {section!r}")
        if key not in SCHEMA[section]:
            raise ValidationError(f"unknown config key {section}.{key}")
        parser, _ = SCHEMA[section][key]
        if isinstance(value, str):
            value = parser(value) if parser is not str else value
        self.values[section][key] = value

    def dump(self) -> str:
        out = io.StringIO()
        for section in SCHEMA:
            out.write(f"[{section}]\n")
            for key in SCHEMA[section]:
                out.write(f"{key} = {self.values[section][key]}\n")
            out.write("\n")
        return out.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")

    def section_hash(self, *sections: str) -> str:
        """Stable hash over the named sections (all sections when empty)."""
        chosen = sections or tuple(SCHEMA)
        parts = []
        for section in chosen:
            for key in SCHEMA[section]:
                parts.append(f"{section}.{key}={self.values[section][key]}")
        return hashlib.sha256("\n".join(parts).encode("utf-8")).hexdigest()


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValidationError(f"config file not found: {path}")
    cfg = RunConfig()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ValidationError(f"unknown config section {section!r}")
        for key, value in parser.items(section):
            cfg.set(section, key, value)
    return cfg
