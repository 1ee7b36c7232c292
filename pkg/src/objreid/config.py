"""Key-value run configuration.

Format: one `key = value` per line, `#` comments; values are JSON literals
(numbers, true/false, quoted strings, arrays) or bare strings. Unknown keys
are rejected; missing keys take the documented defaults below. Command-line
flags override file values.
"""

from __future__ import annotations

import copy
import json

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "threads": 1,

    "curation.eps": 1.0,
    "curation.min_pts": 3,
    "curation.range_m": 50.0,
    "curation.min_points": 5,
    "curation.fov_margin_px": 0.0,

    "patch.margin_px": 10.0,
    "patch.target": 224,
    "patch.square": True,

    "augment.enabled": False,
    "augment.brightness": 0.4,
    "augment.contrast": 0.4,
    "augment.saturation": 0.4,
    "augment.hue": 0.1,
    "augment.center_jitter": 0.1,
    "augment.scale_min": 0.9,
    "augment.scale_max": 1.1,
    "augment.max_rotation": 10.0,
    "augment.erase_min": 0.02,
    "augment.erase_max": 0.2,

    "train.lr": 0.01,
    "train.lr_min": 0.0,
    "train.temperature": 0.07,
    "train.epochs_max": 100,
    "train.patience": 10,
    "train.instances_per_batch": 8,
    "train.views_per_instance": 4,
    "train.loss": "supcon",
    "train.triplet_margin": 0.3,
    "train.momentum": 0.0,
    "train.hidden_dim": 768,
    "train.embed_dim": 128,
    "train.supcon_log": True,

    "split.mode": "sequence",
    "split.train_sequences": [],
    "split.val_sequences": [],
    "split.axis": "x",
    "split.threshold": 0.0,
    "split.val_fraction": 0.2,

    "eval.similarity": "cosine",
    "eval.illumination": "all",
    "eval.viewpoint": "all",
    "eval.top_k": [1, 5],
    "eval.cmc_max_k": 50,
    "eval.hard_rule": "disjunctive",
    "eval.per_query": True,

    "synth.classes": ["tree", "pole", "bollard"],
    "synth.instances_per_class": [7, 7, 6],
    "synth.area_half": 40.0,
    "synth.spacing": 5.0,
    "synth.n_sequences": 6,
    "synth.frames_per_sequence": 40,
    "synth.path_radius": 25.0,
    "synth.weather_scale": 0.3,
    "synth.viewpoint_scale": 0.2,
    "synth.sigma": 0.05,
    "synth.feature_dim": 768,
    "synth.surface_points": 60,
    "synth.clutter_points": 120,
}


class RunConfig:
    """Validated configuration with dotted-key access."""

    def __init__(self, values=None, text=""):
        self.values = copy.deepcopy(DEFAULTS)
        self.text = text
        for key, value in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)

    def __getitem__(self, key):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def override(self, key, value):
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value)
        self.text += f"\n# override\n{key} = {json.dumps(value)}\n"

    def canonical_text(self, exclude=("threads",)):
        """Resolved configuration as sorted `key = value` lines; execution-only
        keys (thread count) are excluded so they cannot affect output bytes."""
        lines = [f"{k} = {json.dumps(self.values[k])}"
                 for k in sorted(self.values) if k not in exclude]
        return "\n".join(lines) + "\n"


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key}: expected true/false, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        if float(value) != int(value):
            raise ConfigError(f"{key}: expected integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected list, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected string, got {value!r}")
        return value
    return value


def parse_config_text(text):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        try:
            parsed = json.loads(val)
        except ValueError:
            parsed = val  # bare string
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = parsed
    return RunConfig(values, text)


def load_config(path=None):
    if path is None:
        return RunConfig()
    with open(path) as f:
        return parse_config_text(f.read())
