"""Run configuration: one JSON document with a section per subcommand.

Unknown keys are rejected anywhere in the document; every numeric knob
lives in the config (flags are only for paths/verbosity elsewhere), so
a config plus its seeds fully determines a run. Each command writes a
``run_meta.json`` with the config hash and seeds; it intentionally
carries no timestamps so that reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from . import kernels
from .errors import ConfigError

SCHEMA_VERSION = 1
FORMAT_VERSIONS = {"dataset": 1, "checkpoint": 1, "region": 1}

_NUM = (int, float)

# key -> (allowed types, required, default); nested dicts handled below
_SCHEMAS = {
    "synth": {
        "out_dir": (str, True, None),
        "truth_dir": (str, True, None),
        "seed": (int, True, None),
        "sites": (int, False, 12),
        "days": (int, False, 365),
        "start": (str, False, "2021-01-01"),
        "grid": (list, False, [32, 32]),
        "pixel_size_m": (_NUM, False, 30.0),
        "noise_rel": (_NUM, False, 0.10),
        "band_noise": (_NUM, False, 0.015),
        "cloud_fraction": (_NUM, False, 0.0),
        "types_per_site": (int, False, 2),
        "ecosystems": (list, False, ["SYN"]),
        "height_range": (list, False, [3.0, 9.0]),
        "plume": (dict, False, {"peak_scale": 10.0, "along_spread": 0.5,
                                "cross_spread": 0.3, "u_min": 0.1}),
    },
    "train": {
        "dataset_dir": (str, True, None),
        "checkpoint": (str, True, None),
        "log_csv": (str, False, None),
        "split_seed": (int, True, None),
        "seed": (int, True, None),
        "lambda": (_NUM, False, 0.0),
        "entropy_sign": (str, False, "prose"),
        "learning_rate": (_NUM, False, 1e-4),
        "batch_size": (int, False, 64),
        "max_epochs": (int, False, 50),
        "patience": (int, False, 5),
        "hidden_width": (int, False, 64),
        "hidden_layers": (int, False, 3),
        "augment": (bool, False, True),
        "augment_right_angles": (bool, False, False),
        "samples_per_epoch": (int, False, None),
        "eval_sample_cap": (int, False, 2048),
        "baseline": (dict, False, None),
    },
    "eval": {
        "dataset_dir": (str, True, None),
        "checkpoint": (str, True, None),
        "baseline_checkpoint": (str, False, None),
        "truth_dir": (str, False, None),
        "split_seed": (int, True, None),
        "out_dir": (str, True, None),
        "eval_roles": (list, False, ["val_site", "test_site"]),
        "pixel_truth_cap": (int, False, 200),
        "importance_features": (list, False, None),
        "importance_cap": (int, False, 1500),
        "seed": (int, False, 0),
    },
    "footprint": {
        "dataset_dir": (str, True, None),
        "checkpoint": (str, True, None),
        "out_dir": (str, True, None),
        "split_seed": (int, True, None),
        "seed": (int, False, 0),
        "sample_cap": (int, False, 512),
        "bins": (int, False, 16),
        "scans": (list, False, []),
    },
    "upscale": {
        "region_dir": (str, True, None),
        "checkpoint": (str, True, None),
        "out_dir": (str, True, None),
        "tile_rows": (int, False, 64),
        "time_range": (list, False, None),
    },
}

_BASELINE_KEYS = {
    "enabled": (bool, False, True),
    "checkpoint": (str, True, None),
    "log_csv": (str, False, None),
}

_SCAN_KEYS = {
    "variable": (str, True, None),
    "min": (_NUM, True, None),
    "max": (_NUM, True, None),
    "points": (int, False, 25),
}

_PLUME_KEYS = {
    "peak_scale": (_NUM, False, 10.0),
    "along_spread": (_NUM, False, 0.5),
    "cross_spread": (_NUM, False, 0.3),
    "u_min": (_NUM, False, 0.1),
}


def _check_section(name, section, schema):
    unknown = set(section) - set(schema)
    if unknown:
        raise ConfigError(f"{name}: unknown key(s) {sorted(unknown)}")
    out = {}
    for key, (types, required, default) in schema.items():
        if key in section and section[key] is not None:
            val = section[key]
            if types is int and isinstance(val, bool):
                raise ConfigError(f"{name}.{key}: expected int, got bool")
            if not isinstance(val, types):
                raise ConfigError(f"{name}.{key}: expected "
                                  f"{getattr(types, '__name__', types)}, "
                                  f"got {type(val).__name__}")
            out[key] = val
        elif required:
            raise ConfigError(f"{name}.{key} is required")
        else:
            out[key] = default
    return out


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version must be {SCHEMA_VERSION}")
    unknown = set(doc) - set(_SCHEMAS) - {"schema_version"}
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {sorted(unknown)}")
    return doc


def section(doc, name):
    if name not in doc:
        raise ConfigError(f"config has no {name!r} section")
    out = _check_section(name, doc[name], _SCHEMAS[name])
    if name == "train" and out["baseline"] is not None:
        out["baseline"] = _check_section("train.baseline", out["baseline"],
                                         _BASELINE_KEYS)
    if name == "synth":
        out["plume"] = _check_section("synth.plume", out["plume"],
                                      _PLUME_KEYS)
    if name == "footprint":
        out["scans"] = [_check_section(f"footprint.scans[{i}]", s, _SCAN_KEYS)
                        for i, s in enumerate(out["scans"])]
    return out


def config_hash(doc):
    return hashlib.sha256(json.dumps(doc, sort_keys=True,
                                     separators=(",", ":")).encode()).hexdigest()


def write_run_meta(out_dir, command, doc, seeds):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "config_sha256": config_hash(doc),
        "schema_version": SCHEMA_VERSION,
        "format_versions": FORMAT_VERSIONS,
        "seeds": seeds,
        "kernel_backend": kernels.active_backend(),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2,
                                                      sort_keys=True))
