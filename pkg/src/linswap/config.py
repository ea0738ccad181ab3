"""INI-style run configuration with documented defaults.

Sections are fixed ([model], [attention], [transfer], [adjust], [bench]);
unknown sections or keys are errors (fail-closed). Empty string values mean
"use the default". Stage-2 reuses stage-1's corpus settings unless [adjust]
overrides them, matching the two-stage default of training both stages on the
same data.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import Any

from .errors import BadConfig
from .model import HybridSpec, ModelConfig

# key -> (default, type); type "opt_int"/"opt_str" admits empty -> None
DEFAULTS: dict[str, dict[str, tuple[Any, str]]] = {
    "model": {
        "vocab_size": (258, "int"),
        "n_layers": (2, "int"),
        "n_heads": (2, "int"),
        "head_dim": (16, "int"),
        "mlp_hidden_mult": (4.0, "float"),
        "max_seq_len": (512, "int"),
        "rope_base": (10000.0, "float"),
        "seed": (0, "int"),
        "pretrain_steps": (0, "int"),  # optional toy-teacher pretraining before transfer
        "pretrain_lr": (3e-3, "float"),
    },
    "attention": {
        "window_size": (8, "int"),
        "window_mode": ("terraced", "str"),
        "feature_kind": ("hedgehog", "str"),
        "feature_dim": (None, "opt_int"),
        "gamma_init": (1.0, "float"),
    },
    "transfer": {
        "lr": (1e-2, "float"),
        "steps": (200, "int"),
        "batch_size": (8, "int"),
        "seq_len": (64, "int"),
        "block_size": (None, "opt_int"),
        "loss": ("output_mse", "str"),
        "w_mse": (1000.0, "float"),
        "w_xent": (1.0, "float"),
        "clip_norm": (1.0, "float"),
        "eval_every": (50, "int"),
        "seed": (0, "int"),
        "corpus": (None, "opt_str"),  # path to a token corpus; empty -> synthetic
        "synthetic_tokens": (20000, "int"),
        "synthetic_seed": (0, "int"),
    },
    "adjust": {
        "lr": (1e-4, "float"),
        "steps": (500, "int"),
        "batch_size": (8, "int"),
        "seq_len": (64, "int"),
        "rank": (8, "int"),
        "alpha": (16.0, "float"),
        "targets": ("wq,wk,wv,wo", "str"),
        "clip_norm": (1.0, "float"),
        "eval_every": (50, "int"),
        "seed": (0, "int"),
        "corpus": (None, "opt_str"),  # empty -> same data as [transfer]
        "synthetic_tokens": (None, "opt_int"),
        "synthetic_seed": (None, "opt_int"),
    },
    "bench": {
        "mode": ("hybrid", "str"),
        "batch_size": (8, "int"),
        "prompt_len": (128, "int"),
        "gen_len": (512, "int"),
        "seed": (0, "int"),
        "memory_budget_mb": (None, "opt_int"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def model_config(self) -> ModelConfig:
        m = self.values["model"]
        return ModelConfig(
            vocab_size=m["vocab_size"],
            n_layers=m["n_layers"],
            n_heads=m["n_heads"],
            head_dim=m["head_dim"],
            mlp_hidden_mult=m["mlp_hidden_mult"],
            max_seq_len=m["max_seq_len"],
            rope_base=m["rope_base"],
            seed=m["seed"],
        )

    def hybrid_spec(self) -> HybridSpec:
        a = self.values["attention"]
        return HybridSpec(
            window_size=a["window_size"],
            window_mode=a["window_mode"],
            feature_kind=a["feature_kind"],
            feature_dim=a["feature_dim"],
            gamma_init=a["gamma_init"],
        )

    def resolved_lines(self) -> list[str]:
        """Every key with defaults expanded, for reproducibility logging."""
        out = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                out.append(f"config {section}.{key}={self.values[section][key]}")
        return out


def _convert(section: str, key: str, raw: str, kind: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "opt_int":
            return None if raw == "" else int(raw)
        if kind == "opt_str":
            return None if raw == "" else raw
        return raw
    except ValueError as exc:
        raise BadConfig(f"[{section}] {key}: cannot parse {raw!r} as {kind}") from exc


def default_config() -> RunConfig:
    return RunConfig({s: {k: v for k, (v, _) in keys.items()} for s, keys in DEFAULTS.items()})


def load_config(path: str | None) -> RunConfig:
    """Parse an INI file against the schema; None yields pure defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise BadConfig(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise BadConfig(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in DEFAULTS:
            raise BadConfig(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in DEFAULTS[section]:
                raise BadConfig(f"unknown key {key!r} in section [{section}]")
            cfg.values[section][key] = _convert(section, key, raw, DEFAULTS[section][key][1])
    return cfg
