"""Flat key=value configuration files.

Keys use dotted prefixes to address components, e.g.::

    model.name = quadratic
    model.d = 2
    dgme.warmup_iterations = 30000
    dbme.n_steps = 50
    run.seed = 0

Unknown keys are rejected so typos fail loudly instead of silently
falling back to defaults.
"""

import dataclasses
import hashlib
import json

from .dbme import DbmeConfig
from .dgme import DgmeConfig
from .errors import ConfigError
from .models import build_model

KNOWN_PREFIXES = ("model", "dgme", "dbme", "oracle", "run")

ORACLE_KEYS = {"n_steps", "tol", "max_iters", "substeps"}
RUN_KEYS = {"seed", "output_dir", "threads"}


def parse_scalar(text):
    """Best-effort typed parse: bool, none, int, float, tuple, string."""
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if "," in text:
        return tuple(parse_scalar(part) for part in text.split(","))
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            pass
    return text


def load_config(path):
    """Read a key=value file into a flat {dotted key: raw value} dict."""
    flat = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in flat:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            prefix = key.split(".", 1)[0]
            if prefix not in KNOWN_PREFIXES:
                raise ConfigError(
                    f"{path}:{lineno}: unknown section {prefix!r}; "
                    f"known: {KNOWN_PREFIXES}"
                )
            flat[key] = parse_scalar(value)
    return flat


def section(flat, prefix):
    """Extract keys under a dotted prefix, prefix stripped."""
    out = {}
    for key, value in flat.items():
        head, _, tail = key.partition(".")
        if head == prefix:
            if not tail:
                raise ConfigError(f"key {key!r} is missing a field name")
            out[tail] = value
    return out


def _build_dataclass(cls, params, label):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(params) - names)
    if unknown:
        raise ConfigError(f"unknown {label} option(s): {unknown}")
    if isinstance(params.get("hidden"), int):
        params["hidden"] = (params["hidden"],)
    cfg = cls(**params)
    cfg.validate()
    return cfg


def make_dgme_config(flat, seed=None):
    params = section(flat, "dgme")
    if seed is not None:
        params.setdefault("seed", seed)
    return _build_dataclass(DgmeConfig, params, "dgme")


def make_dbme_config(flat, seed=None):
    params = section(flat, "dbme")
    if seed is not None:
        params.setdefault("seed", seed)
    return _build_dataclass(DbmeConfig, params, "dbme")


def make_model(flat):
    params = section(flat, "model")
    if "name" not in params:
        raise ConfigError("config needs a model.name entry")
    name = params.pop("name")
    return build_model(name, params)


def oracle_options(flat):
    params = section(flat, "oracle")
    unknown = sorted(set(params) - ORACLE_KEYS)
    if unknown:
        raise ConfigError(f"unknown oracle option(s): {unknown}")
    return params


def run_options(flat):
    params = section(flat, "run")
    unknown = sorted(set(params) - RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown run option(s): {unknown}")
    return params


def config_hash(flat):
    """Stable fingerprint of a parsed config, for run manifests."""
    blob = json.dumps({k: repr(v) for k, v in sorted(flat.items())})
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
