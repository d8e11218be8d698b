"""Experiment configuration: JSON manifests, dotted-key overrides, presets.

A configuration is a nested JSON document (see README for the schema).  The
CLI merges, in order: built-in defaults, an optional preset, an optional config
file, and ``--set key=value`` overrides, then hashes the resolved document so
every output file can be traced back to it.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field

from .bound import BoundConstants
from .channel import ChannelConfig
from .errors import ConfigurationError
from .learning import TrainingConfig


@dataclass
class LatticeOptions:
    name: str = "e8"
    rho: float = 1.0
    second_moment_samples: int = 100_000


@dataclass
class SelectionOptions:
    """Raw selection settings; ``theta = None`` means the packing-radius default."""

    theta: float | None = None
    epsilon: float = 0.05
    max_iters: int = 8
    qp_tolerance: float = 1e-6
    brute_force_bound: int = 5


@dataclass
class DatasetOptions:
    kind: str = "blobs"
    partition: str = "iid"
    num_train: int = 1000
    num_test: int = 500
    feature_dim: int = 7
    num_classes: int = 3
    cluster_std: float = 1.5
    center_spread: float = 2.0
    dirichlet_alpha: float = 2.0
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None


@dataclass
class ModelOptions:
    kind: str = "softmax_linear"
    hidden_dim: int = 16


@dataclass
class ExperimentConfig:
    scheme: str = "fedcpu"
    seeds: list[int] = field(default_factory=lambda: list(range(20)))
    rounds: int = 50
    workers: int = 1
    output_dir: str | None = None
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig(30, 30))
    lattice: LatticeOptions = field(default_factory=LatticeOptions)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    selection: SelectionOptions = field(default_factory=SelectionOptions)
    dataset: DatasetOptions = field(default_factory=DatasetOptions)
    model: ModelOptions = field(default_factory=ModelOptions)
    constants: BoundConstants = field(default_factory=BoundConstants)

    def __post_init__(self) -> None:
        if self.scheme not in ("fedcpu", "ideal_fedavg"):
            raise ConfigurationError(f"unknown scheme {self.scheme!r}")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.rounds < 0:
            raise ConfigurationError("rounds must be >= 0")


_SECTIONS = {
    "channel": ChannelConfig,
    "lattice": LatticeOptions,
    "training": TrainingConfig,
    "selection": SelectionOptions,
    "dataset": DatasetOptions,
    "model": ModelOptions,
    "constants": BoundConstants,
}


def default_config_dict() -> dict:
    """Built-in defaults (30 devices / 30 antennas / SNR 10 / tau 3 / mu 0.01 / B 100)."""
    return config_to_dict(ExperimentConfig())


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_from_dict(doc: dict) -> ExperimentConfig:
    doc = copy.deepcopy(doc)
    kwargs = {}
    for key, value in doc.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigurationError(f"section {key!r} must be a mapping")
            try:
                kwargs[key] = _SECTIONS[key](**value)
            except TypeError as exc:
                raise ConfigurationError(f"bad field in section {key!r}: {exc}") from None
        elif key in ("scheme", "seeds", "rounds", "workers", "output_dir"):
            kwargs[key] = value
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config root must be a JSON object")
    return doc


def deep_merge(base: dict, overrides: dict) -> dict:
    """Recursively merge ``overrides`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def apply_overrides(doc: dict, assignments: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as JSON when possible."""
    doc = copy.deepcopy(doc)
    for item in assignments:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"cannot descend into {dotted!r}")
        node[keys[-1]] = value
    return doc


def config_hash(doc: dict) -> str:
    """Short stable digest of a resolved configuration document."""
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


# --------------------------------------------------------------------------
# Desk-scale presets: one-command trend reproductions on synthetic blobs.
# Each preset is a base override document plus named variants merged on top.

_DESK_BASE = {
    "scheme": "fedcpu",
    "seeds": list(range(16)),
    "rounds": 50,
    "channel": {
        "num_antennas": 30,
        "num_devices": 10,
        "snr": 10.0,
        "power": 1.0,
        "fading_scale": 5.0,
    },
    "lattice": {"name": "e8", "rho": 1.0, "second_moment_samples": 100_000},
    "training": {"tau": 3, "learning_rate": 0.006, "lr_decay": 1.0, "batch_size": 20},
    "dataset": {
        "kind": "blobs",
        "partition": "iid",
        "num_train": 1000,
        "num_test": 5000,
        "feature_dim": 7,
        "num_classes": 3,
        "cluster_std": 1.0,
        "center_spread": 2.5,
    },
    "model": {"kind": "softmax_linear"},
}

PRESETS: dict[str, dict] = {
    "tau_sweep": {
        "description": "Final accuracy versus the number of local SGD steps.",
        "base": _DESK_BASE,
        "variants": {
            "tau_1": {"training": {"tau": 1}},
            "tau_3": {"training": {"tau": 3}},
            "tau_5": {"training": {"tau": 5}},
        },
    },
    "antenna_sweep": {
        "description": "Accuracy and decode-error rate versus server antennas.",
        "base": _DESK_BASE,
        "variants": {
            "m_5": {"channel": {"num_antennas": 5}},
            "m_15": {"channel": {"num_antennas": 15}},
            "m_30": {"channel": {"num_antennas": 30}},
        },
    },
    "device_sweep": {
        "description": "Accuracy versus the number of participating devices.",
        "base": _DESK_BASE,
        "variants": {
            "k_5": {"channel": {"num_devices": 5}},
            "k_10": {"channel": {"num_devices": 10}},
            "k_20": {"channel": {"num_devices": 20}},
        },
    },
    "rho_sweep": {
        "description": "Quantization/decoding-error balance versus the lattice scale.",
        "base": _DESK_BASE,
        "variants": {
            "rho_025": {"lattice": {"rho": 0.25}},
            "rho_05": {"lattice": {"rho": 0.5}},
            "rho_1": {"lattice": {"rho": 1.0}},
        },
    },
    "lattice_sweep": {
        "description": "Accuracy across lattice families under coarse quantization.",
        # Coarse cells and full-batch local steps isolate the lattice's own
        # quantization noise; the channel stays benign so decoding is clean.
        "base": deep_merge(
            _DESK_BASE,
            {
                "lattice": {"rho": 4.0},
                "training": {"batch_size": 100},
                "dataset": {"num_test": 20000},
            },
        ),
        "variants": {
            "identity": {"lattice": {"name": "identity"}},
            "hexagonal": {"lattice": {"name": "hexagonal"}},
            "e8": {"lattice": {"name": "e8"}},
        },
    },
    "high_fidelity": {
        "description": "Full pipeline at a benign channel versus the error-free baseline.",
        "base": _DESK_BASE,
        "variants": {
            "fedcpu": {},
            "ideal": {"scheme": "ideal_fedavg"},
        },
    },
}


def preset_variants(name: str) -> list[tuple[str, dict]]:
    """Resolved (variant_name, config_dict) pairs for a preset."""
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    spec = PRESETS[name]
    base = deep_merge(default_config_dict(), spec["base"])
    return [(vname, deep_merge(base, overrides)) for vname, overrides in spec["variants"].items()]
