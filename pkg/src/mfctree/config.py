"""Experiment configuration: TOML files with dotted sections and command-line overrides.

Recognized keys (defaults in brackets):

    [problem]     family ["lq"]; params.* passed to the family builder
    [grid]        K [16]; t0 [0.0]
    [tree]        branching [2]; mode ["binomial"]; center [default: true when branching > 1]
    [particles]   N [256]; init_mean [0.0]; init_std [1.0]
    [solver]      grad_tol [1e-8]; max_iters [200]; step_rule ["cg"]; backend ["open-loop-tree"]
    [checks]      select [all]; k1 [K/2]; ito_N [4096]; ito_paths [256]; bellman_dirs [4]
    [derivatives] x_min [-2.0]; x_max [2.0]; x_num [9]; directions [4]
    [bench]       K_values [[8, 16, 32]]; N [64]
    [master]      x_samples [[-0.5, 0.0, 0.5]]; h [0.01]; copies [N/256]
    [run]         seed [0]; workers [1]; out ["mfctree-out"]
"""
import copy
import hashlib
import json
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "problem": {"family": "lq", "params": {}},
    "grid": {"K": 16, "t0": 0.0},
    "tree": {"branching": 2, "mode": "binomial", "center": None},
    "particles": {"N": 256, "init_mean": 0.0, "init_std": 1.0},
    "solver": {"grad_tol": 1e-8, "max_iters": 200, "step_rule": "cg", "backend": "open-loop-tree"},
    "checks": {"select": None, "k1": None, "ito_N": 4096, "ito_paths": 256, "bellman_dirs": 4},
    "derivatives": {"x_min": -2.0, "x_max": 2.0, "x_num": 9, "directions": 4},
    "bench": {"K_values": [8, 16, 32], "N": 64},
    "master": {"x_samples": [-0.5, 0.0, 0.5], "h": 1e-2, "copies": None},
    "run": {"seed": 0, "workers": 1, "out": "mfctree-out"},
}

# keys that do not influence numerical results
_NON_NUMERIC = (("run", "workers"), ("run", "out"))


class ConfigError(ValueError):
    """Malformed configuration file or override."""


def _merge(base, extra, path=""):
    for key, value in extra.items():
        where = f"{path}{key}"
        if key not in base and not path.startswith("problem.params."):
            raise ConfigError(f"unknown configuration key {where!r}")
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value, where + ".")
        else:
            base[key] = value
    return base


def parse_value(text):
    """Parse an override value as a TOML value, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(data, item):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, text = item.split("=", 1)
    parts = [p for p in key.strip().split(".") if p]
    if not parts:
        raise ConfigError(f"override {item!r} has an empty key")
    nested = value = parse_value(text.strip())
    for p in reversed(parts):
        nested = {p: nested}
    _merge(data, nested)
    return value


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))
    source: str = None

    def __getitem__(self, section):
        return self.data[section]

    @classmethod
    def from_toml(cls, text, source=None, overrides=()):
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            msg = getattr(exc, "msg", str(exc))
            line, col = getattr(exc, "lineno", None), getattr(exc, "colno", None)
            where = f"line {line}, column {col}" if line is not None else str(exc)
            raise ConfigError(f"{source or '<config>'}:{line}:{col}: {msg} ({where})") from None
        data = _merge(copy.deepcopy(DEFAULTS), raw)
        for item in overrides:
            apply_override(data, item)
        cfg = cls(data, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides=()):
        if path is None:
            return cls.from_toml("", None, overrides)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from None
        return cls.from_toml(text, str(path), overrides)

    def validate(self):
        try:
            self._validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid configuration value: {exc}") from None

    def _validate(self):
        d = self.data
        checks = [
            (int(d["grid"]["K"]) >= 1, "grid.K must be >= 1"),
            (int(d["tree"]["branching"]) >= 1, "tree.branching must be >= 1"),
            (int(d["particles"]["N"]) >= 1, "particles.N must be >= 1"),
            (float(d["solver"]["grad_tol"]) > 0, "solver.grad_tol must be positive"),
            (0 <= int(d["run"]["seed"]) < 2**64, "run.seed must be an unsigned 64-bit integer"),
            (int(d["run"]["workers"]) >= 1, "run.workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def numeric_view(self):
        """Configuration without keys that cannot change results."""
        d = copy.deepcopy(self.data)
        for section, key in _NON_NUMERIC:
            d[section].pop(key, None)
        return d

    def hash(self):
        blob = json.dumps(self.numeric_view(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


def reference():
    """Documented key reference (the module docstring)."""
    return __doc__
