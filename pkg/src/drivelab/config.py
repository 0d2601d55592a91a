"""Run configuration: a single JSON file with defaults, dotted-key overrides,
suite expansion, and content hashing for provenance."""

import copy
import hashlib
import json

from . import world as sim


class ConfigError(ValueError):
    """Invalid configuration contents."""


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "runs/default",
    "jobs": 1,
    "paths": {
        "demos": "demos.jsonl",
        "vocab": "vocab.jsonl",
        "pretrained": "pretrained.ckpt",
        "pretrain_history": "pretrain_history.json",
        "postopt_dir": "postopt",
        "final": "postopt/policy.ckpt",
        "takeover": "takeover_probe.jsonl",
        "eval_report": "eval_report.json",
        "eval_table": "eval_report.txt",
        "trend": "trend.csv",
    },
    "suites": {
        "train": {"kinds": list(sim.SCENARIO_KINDS), "seeds": [0, 1, 2, 3]},
        "validation": {"kinds": list(sim.SCENARIO_KINDS), "seeds": [100, 101]},
        "test": {"kinds": list(sim.SCENARIO_KINDS), "seeds": [200, 201, 202, 203, 204]},
    },
    "policy": {"feature_dim": 64, "k": 64, "n_agents": 8, "n_map": 16},
    "expert": {"desired_speed": 8.0, "time_headway": 1.5, "min_gap": 2.0,
               "max_accel": 2.0, "comfort_decel": 3.0, "lookahead": 6.0,
               "forecast_horizon": 2.0, "yield_horizon": 4.0},
    "train": {"beta": 0.1, "gamma": 0.1, "tau_label": 1.0,
              "pretrain_epochs": 2, "pretrain_lr": 2e-4,
              "dagger_epochs": 1, "dagger_lr": 5e-5,
              "po_epochs": 10, "po_lr": 1e-6,
              "rounds": 5, "batch_size": 16,
              "takeover_weight": 4.0, "eps_steer": 0.2},
    "demo_subsample": 1,        # keep every n-th demonstration frame
    "creep_enabled": True,
    "scenario": {"route_length": 120.0, "speed_limit": 8.0},
}


def load_config(path=None):
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path) as f:
                user = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        _deep_update(cfg, user)
    return cfg


def _deep_update(base, extra):
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v


def apply_overrides(cfg, overrides):
    """Apply --set key.path=value pairs; values parse as JSON, falling back
    to plain strings."""
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: no section {p!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return cfg


def expand_suite(cfg, name):
    """A suite entry is either {kinds, seeds} (full product) or an explicit
    list of {kind, seed} records."""
    entry = cfg["suites"].get(name)
    if entry is None:
        raise ConfigError(f"no suite named {name!r}")
    sc = cfg["scenario"]
    if isinstance(entry, list):
        items = [(e["kind"], int(e["seed"])) for e in entry]
    else:
        items = [(k, int(s)) for k in entry["kinds"] for s in entry["seeds"]]
    for kind, _ in items:
        if kind not in sim.SCENARIO_KINDS:
            raise ConfigError(f"suite {name!r}: unknown scenario kind {kind!r}")
    return [sim.ScenarioSpec(kind=k, seed=s, route_length=sc["route_length"],
                             speed_limit=sc["speed_limit"]) for k, s in items]


def validate(cfg):
    train_seeds = {s.seed for s in expand_suite(cfg, "train")}
    test_seeds = {s.seed for s in expand_suite(cfg, "test")}
    overlap = train_seeds & test_seeds
    if overlap:
        raise ConfigError(f"train and test suites share seeds {sorted(overlap)}")
    if cfg["jobs"] < 1:
        raise ConfigError("jobs must be >= 1")
    if cfg["demo_subsample"] < 1:
        raise ConfigError("demo_subsample must be >= 1")
    return cfg


def config_hash(cfg):
    """Hash of the result-determining config entries. Plumbing knobs that
    cannot change any artifact's content (worker count, output location) are
    excluded so reruns compare equal."""
    semantic = {k: v for k, v in cfg.items() if k not in ("jobs", "out_dir", "paths")}
    return hashlib.sha256(
        json.dumps(semantic, sort_keys=True).encode()).hexdigest()[:16]


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()[:16]
