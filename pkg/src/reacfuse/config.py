"""Run configuration: sectioned key-value files with typed defaults.

Unknown sections or keys are rejected. Values take the type of their default.
Precedence: command-line flags, then REACFUSE_SEED / REACFUSE_THREADS, then
the file, then defaults.
"""

from __future__ import annotations

import configparser
import copy
import io
import os

DEFAULTS = {
    "data": {
        "n_records": 12000, "seed": 0, "unlabeled_fraction": 0.30, "labeled_pos_fraction": 0.75,
        "unlabeled_pos_fraction": 0.58, "near_empty_fraction": 0.002, "noise_rate": 0.05,
        "pd_fraction": 0.0125, "text_noise": 0.03, "test_fraction": 0.10, "yield_cutoff": 5.0,
    },
    "graphormer": {"n_layers": 4, "n_heads": 4, "d_model": 64, "mlm_mask_rate": 0.15},
    "mlm": {"epochs": 3, "batch_size": 32, "lr": 1e-3},
    "baseline": {"epochs": 5, "batch_size": 32, "lr": 1e-4},
    "proc_lm": {"n_layers": 4, "n_heads": 4, "d_text": 128, "context_length": 512,
                "steps": 300, "batch_size": 16, "lr": 2e-3},
    "zsl_lm": {"n_layers": 2, "n_heads": 4, "d_text": 64, "context_length": 512,
               "steps": 500, "batch_size": 16, "lr": 2e-3, "corpus_records": 6000},
    "adapter": {"n_adapt_layers": 4, "epochs": 2, "batch_size": 16, "lr": 8e-4},
    "labeler": {"lr": 1e-4, "batch_size": 3000, "epochs": 300, "test_fraction": 0.2},
    "zsl": {"lo": 0.2, "hi": 0.8, "strict_lo": 0.05, "strict_hi": 0.95, "soft_mode": "target",
            "shard_size": 2000},
    "zsl_train": {"epochs": 5, "batch_size": 32, "lr": 1e-4},
    "eval": {"threshold": 0.5, "sweep_lo": 0.2, "sweep_hi": 0.8, "sweep_step": 0.05},
}


class ConfigError(ValueError):
    pass


def _coerce(section, key, raw, default):
    try:
        if isinstance(default, bool):
            low = str(raw).strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: expected {type(default).__name__}") from exc


class RunConfig:
    def __init__(self, values=None):
        self.values = copy.deepcopy(DEFAULTS)
        for section, items in (values or {}).items():
            for key, raw in items.items():
                self.set(section, key, raw)
        self.validate()

    def set(self, section, key, raw):
        if section not in self.values:
            raise ConfigError(f"unknown section [{section}]")
        if key not in self.values[section]:
            raise ConfigError(f"unknown key [{section}] {key}")
        self.values[section][key] = _coerce(section, key, raw, DEFAULTS[section][key])

    def __getitem__(self, section):
        return self.values[section]

    def validate(self):
        z = self.values["zsl"]
        for lo, hi in (("lo", "hi"), ("strict_lo", "strict_hi")):
            if not 0.0 < z[lo] < z[hi] < 1.0:
                raise ConfigError(f"[zsl] needs 0 < {lo} < {hi} < 1, got {z[lo]} and {z[hi]}")
        if z["shard_size"] < 1:
            raise ConfigError("[zsl] shard_size must be >= 1")
        if z["soft_mode"] not in ("target", "weight"):
            raise ConfigError("[zsl] soft_mode must be 'target' or 'weight'")
        d = self.values["data"]
        for key in ("unlabeled_fraction", "labeled_pos_fraction", "unlabeled_pos_fraction",
                    "near_empty_fraction", "noise_rate", "pd_fraction", "text_noise", "test_fraction"):
            if not 0.0 <= d[key] <= 1.0:
                raise ConfigError(f"[data] {key} must lie in [0, 1]")
        if d["n_records"] < 1:
            raise ConfigError("[data] n_records must be >= 1")
        e = self.values["eval"]
        if not 0.0 <= e["sweep_lo"] <= e["sweep_hi"] <= 1.0 or e["sweep_step"] <= 0:
            raise ConfigError("[eval] sweep bounds invalid")
        g = self.values["graphormer"]
        if g["d_model"] % g["n_heads"]:
            raise ConfigError("[graphormer] d_model must be divisible by n_heads")
        for sec in ("proc_lm", "zsl_lm"):
            if self.values[sec]["d_text"] % self.values[sec]["n_heads"]:
                raise ConfigError(f"[{sec}] d_text must be divisible by n_heads")
        return self

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    @classmethod
    def from_text(cls, text):
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from exc
        return cls({s: dict(parser.items(s)) for s in parser.sections()})

    def apply_overrides(self, seed=None, env=None):
        env = os.environ if env is None else env
        if seed is None and env.get("REACFUSE_SEED"):
            seed = env["REACFUSE_SEED"]
        if seed is not None:
            self.set("data", "seed", seed)
        return self

    def dumps(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section in sorted(self.values):
            parser[section] = {k: repr(v) if isinstance(v, float) else str(v)
                               for k, v in sorted(self.values[section].items())}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def resolve_threads(flag=None, env=None):
    env = os.environ if env is None else env
    raw = flag if flag is not None else env.get("REACFUSE_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"threads must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError("threads must be >= 1")
    return n
