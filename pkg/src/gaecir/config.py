"""Run configuration: INI-style files merged with built-in defaults and
command-line overrides.  Unknown sections or keys are rejected."""

from __future__ import annotations

import configparser
from dataclasses import dataclass

from .cir import CirSchedule
from .errors import ConfigError
from .model import GaeConfig
from .train import TrainConfig

# every key the config file may contain, with its built-in default
DEFAULTS = {
    "model": {
        "num_factors": "128",
        "num_mappings": "32",
        "mapping_nonlinearity": "sigmoid",
    },
    "train": {
        "learning_rate": "0.01",
        "batch_size": "100",
        "epochs": "600",
        "input_dropout_rate": "0.5",
        "mapping_sparsity_coeff": "1e-3",
        "factor_sparsity_coeff": "1e-3",
        "weight_decay_coeff": "1e-4",
        "max_weight_norm": "none",
        "grad_clip_norm": "none",
        "filter_norm_penalty_coeff": "1e-2",
        "checkpoint_every": "100",
    },
    "cir": {
        "mode": "linear",
        "lambda_max": "1.0",
        "k_max": "10",
        "ramp_epochs": "300",
        "step_points": "",
    },
    "data": {
        "source": "synthetic",
        "tset": "mnistr20",
        "size": "16",
        "pairs_per_image": "1",
        "dataset_name": "",
    },
    "run": {
        "seed": "12345",
        "output_dir": "runs/default",
    },
}


def _parse_optional_float(text: str):
    return None if text.strip().lower() in ("", "none", "null") else float(text)


def _parse_step_points(text: str):
    text = text.strip()
    if not text:
        return None
    points = []
    for chunk in text.split(";"):
        parts = chunk.strip().split(":")
        if len(parts) != 3:
            raise ConfigError(f"bad step point {chunk!r}, expected epoch:lambda:k")
        points.append((int(parts[0]), float(parts[1]), int(parts[2])))
    return tuple(points)


@dataclass
class RunConfig:
    """Fully merged configuration for one pipeline run."""

    values: dict  # {section: {key: str}}

    def get(self, section: str, key: str) -> str:
        return self.values[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown configuration key [{section}] {key}")
        self.values[section][key] = str(value)

    @classmethod
    def from_file(cls, path=None, overrides=None) -> "RunConfig":
        """Defaults, then the file (if any), then explicit overrides."""
        values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            with open(path) as fh:
                parser.read_file(fh)
            for section in parser.sections():
                if section not in DEFAULTS:
                    raise ConfigError(f"unknown configuration section [{section}]")
                for key, val in parser[section].items():
                    if key not in DEFAULTS[section]:
                        raise ConfigError(f"unknown configuration key [{section}] {key}")
                    values[section][key] = val
        cfg = cls(values)
        for (section, key), val in (overrides or {}).items():
            if val is not None:
                cfg.set(section, key, val)
        return cfg

    def cir_schedule(self) -> CirSchedule:
        return CirSchedule(
            mode=self.get("cir", "mode"),
            lambda_max=float(self.get("cir", "lambda_max")),
            k_max=int(self.get("cir", "k_max")),
            ramp_epochs=int(self.get("cir", "ramp_epochs")),
            step_points=_parse_step_points(self.get("cir", "step_points")),
        )

    def gae_config(self, input_dim: int) -> GaeConfig:
        return GaeConfig(
            input_dim=input_dim,
            num_factors=int(self.get("model", "num_factors")),
            num_mappings=int(self.get("model", "num_mappings")),
            mapping_nonlinearity=self.get("model", "mapping_nonlinearity"),
        )

    def train_config(self, no_cir: bool = False) -> TrainConfig:
        cir = CirSchedule.disabled() if no_cir else self.cir_schedule()
        return TrainConfig(
            learning_rate=float(self.get("train", "learning_rate")),
            batch_size=int(self.get("train", "batch_size")),
            epochs=int(self.get("train", "epochs")),
            input_dropout_rate=float(self.get("train", "input_dropout_rate")),
            mapping_sparsity_coeff=float(self.get("train", "mapping_sparsity_coeff")),
            factor_sparsity_coeff=float(self.get("train", "factor_sparsity_coeff")),
            weight_decay_coeff=float(self.get("train", "weight_decay_coeff")),
            max_weight_norm=_parse_optional_float(self.get("train", "max_weight_norm")),
            grad_clip_norm=_parse_optional_float(self.get("train", "grad_clip_norm")),
            filter_norm_penalty_coeff=float(
                self.get("train", "filter_norm_penalty_coeff")),
            cir=cir,
            seed=int(self.get("run", "seed")),
        )

    def checkpoint_every(self) -> int:
        return int(self.get("train", "checkpoint_every"))

    def dump(self, path) -> None:
        """Echo the merged effective configuration (provenance)."""
        parser = configparser.ConfigParser()
        for section, keys in self.values.items():
            parser[section] = keys
        with open(path, "w") as fh:
            parser.write(fh)
