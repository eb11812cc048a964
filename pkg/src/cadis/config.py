"""Experiment configuration: INI files, overrides, and validation.

Configuration is plain key = value text in sections. Every key has a
documented default; unknown sections or keys are rejected by name so typos
surface immediately. Values can be overridden with repeated
``--set section.key=value`` flags, and the master seed / output directory
additionally respond to the CADIS_SEED / CADIS_OUT environment variables.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .data import PartitionSpec
from .engine import ExperimentConfig, IdxData, SyntheticData
from .kd import KdConfig
from .nn import NetworkShape
from .similarity import ThresholdSchedule, TransitiveConfig

DEFAULTS: dict[str, dict[str, str]] = {
    "experiment": {
        "algorithm": "cadis",
        "rounds": "50",
        "clients": "100",
        "participants": "10",
        "local_epochs": "5",
        "batch_size": "8",
        "learning_rate": "0.001",
        "seed": "0",
        "target_accuracy": "none",
        "snapshot_every": "0",
    },
    "data": {
        "source": "synthetic",
        "classes": "10",
        "dims": "20",
        "per_class": "300",
        "test_per_class": "50",
        "spread": "0.05",
        "data_seed": "2023",
        "train_images": "",
        "train_labels": "",
        "test_images": "",
        "test_labels": "",
    },
    "partition": {
        "scheme": "mc",
        "cluster_ratios": "3:3:2:1:1",
        "label_fraction": "0.2",
        "bc_share": "0.6",
        "pareto_shape": "3.0",
        "balanced": "auto",
        "seed": "1",
    },
    "network": {
        "hidden": "128",
        "representation": "64",
    },
    "kd": {
        "weight": "1.0",
        "bandwidth": "adaptive",
        "floor": "1e-12",
    },
    "similarity": {
        "epsilon0": "0.5",
        "epsilon_max": "0.975",
        "ramp": "50",
        "gamma": "0.2",
        "transitive": "true",
        "count_all_members": "false",
    },
    "output": {
        "dir": "runs",
        "run_id": "",
    },
}


class ConfigError(ValueError):
    """Invalid or unknown configuration input."""


def _merge_defaults(raw: dict[str, dict[str, str]]) -> dict[str, dict[str, str]]:
    bad: list[str] = []
    merged = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for section, kv in raw.items():
        if section not in DEFAULTS:
            bad.append(f"[{section}]")
            continue
        for key, value in kv.items():
            if key not in DEFAULTS[section]:
                bad.append(f"[{section}] {key}")
            else:
                merged[section][key] = value
    if bad:
        raise ConfigError("unknown configuration keys: " + ", ".join(sorted(bad)))
    return merged


def read_config_file(path) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    with open(path, "r", encoding="utf-8") as f:
        parser.read_file(f)
    return {s: dict(parser.items(s)) for s in parser.sections()}


def apply_overrides(
    raw: dict[str, dict[str, str]], pairs: list[str]
) -> dict[str, dict[str, str]]:
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        target, value = pair.split("=", 1)
        if "." not in target:
            raise ConfigError(f"override {pair!r} is not of the form section.key=value")
        section, key = target.split(".", 1)
        section, key = section.strip(), key.strip()
        raw.setdefault(section, {})[key] = value.strip()
    return raw


def _as_int(section: str, key: str, value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be an integer, got {value!r}") from None


def _as_float(section: str, key: str, value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"[{section}] {key} must be a number, got {value!r}") from None


def _as_bool(section: str, key: str, value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "yes", "on", "1"):
        return True
    if v in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"[{section}] {key} must be a boolean, got {value!r}")


@dataclass(frozen=True)
class ResolvedConfig:
    experiment: ExperimentConfig
    out_dir: Path
    run_id: str


def build_config(
    raw: dict[str, dict[str, str]],
    run_name: str = "run",
    env: dict[str, str] | None = None,
) -> ResolvedConfig:
    """Merge defaults, apply CADIS_SEED / CADIS_OUT, and build the typed config."""
    env = dict(os.environ if env is None else env)
    cfg = _merge_defaults(raw)

    if "CADIS_SEED" in env:
        cfg["experiment"]["seed"] = env["CADIS_SEED"]
    if "CADIS_OUT" in env:
        cfg["output"]["dir"] = env["CADIS_OUT"]

    exp = cfg["experiment"]
    dat = cfg["data"]
    par = cfg["partition"]
    net = cfg["network"]
    kd = cfg["kd"]
    sim = cfg["similarity"]

    source = dat["source"].strip().lower()
    if source == "synthetic":
        data = SyntheticData(
            classes=_as_int("data", "classes", dat["classes"]),
            dims=_as_int("data", "dims", dat["dims"]),
            per_class=_as_int("data", "per_class", dat["per_class"]),
            test_per_class=_as_int("data", "test_per_class", dat["test_per_class"]),
            spread=_as_float("data", "spread", dat["spread"]),
            seed=_as_int("data", "data_seed", dat["data_seed"]),
        )
        input_dim, classes = data.dims, data.classes
    elif source == "idx":
        paths = [dat[k] for k in ("train_images", "train_labels", "test_images", "test_labels")]
        if not all(paths):
            raise ConfigError("[data] source=idx requires all four IDX file paths")
        data = IdxData(*paths)
        # Shape fields for IDX data are taken from the network section below
        # and validated against the files when the run starts.
        input_dim = _as_int("data", "dims", dat["dims"])
        classes = _as_int("data", "classes", dat["classes"])
    else:
        raise ConfigError(f"[data] source must be synthetic or idx, got {source!r}")

    ratios = tuple(
        _as_float("partition", "cluster_ratios", part)
        for part in par["cluster_ratios"].replace(",", ":").split(":")
        if part.strip()
    )
    balanced_raw = par["balanced"].strip().lower()
    balanced = None if balanced_raw in ("auto", "none", "") else _as_bool(
        "partition", "balanced", balanced_raw
    )
    spec = PartitionSpec(
        scheme=par["scheme"].strip().lower(),
        clients=_as_int("experiment", "clients", exp["clients"]),
        cluster_ratios=ratios,
        label_fraction=_as_float("partition", "label_fraction", par["label_fraction"]),
        bc_share=_as_float("partition", "bc_share", par["bc_share"]),
        pareto_shape=_as_float("partition", "pareto_shape", par["pareto_shape"]),
        balanced=balanced,
        seed=_as_int("partition", "seed", par["seed"]),
    )

    hidden = tuple(
        _as_int("network", "hidden", h) for h in net["hidden"].split(",") if h.strip()
    )
    shape = NetworkShape(
        input_dim=input_dim,
        hidden=hidden,
        rep_dim=_as_int("network", "representation", net["representation"]),
        classes=classes,
    )

    bandwidth_raw = kd["bandwidth"].strip().lower()
    bandwidth = None if bandwidth_raw in ("adaptive", "") else _as_float(
        "kd", "bandwidth", bandwidth_raw
    )
    kd_config = KdConfig(
        weight=_as_float("kd", "weight", kd["weight"]),
        bandwidth=bandwidth,
        floor=_as_float("kd", "floor", kd["floor"]),
    )

    schedule = ThresholdSchedule(
        start=_as_float("similarity", "epsilon0", sim["epsilon0"]),
        maximum=_as_float("similarity", "epsilon_max", sim["epsilon_max"]),
        ramp=_as_int("similarity", "ramp", sim["ramp"]),
    )
    transitive = TransitiveConfig(
        enabled=_as_bool("similarity", "transitive", sim["transitive"]),
        gamma=_as_float("similarity", "gamma", sim["gamma"]),
    )

    target_raw = exp["target_accuracy"].strip().lower()
    target = None if target_raw in ("none", "") else _as_float(
        "experiment", "target_accuracy", target_raw
    )

    try:
        experiment = ExperimentConfig(
            data=data,
            partition=spec,
            shape=shape,
            rounds=_as_int("experiment", "rounds", exp["rounds"]),
            participants=_as_int("experiment", "participants", exp["participants"]),
            local_epochs=_as_int("experiment", "local_epochs", exp["local_epochs"]),
            batch_size=_as_int("experiment", "batch_size", exp["batch_size"]),
            learning_rate=_as_float("experiment", "learning_rate", exp["learning_rate"]),
            kd=kd_config,
            schedule=schedule,
            transitive=transitive,
            count_all_members=_as_bool(
                "similarity", "count_all_members", sim["count_all_members"]
            ),
            algorithm=exp["algorithm"].strip().lower(),
            seed=_as_int("experiment", "seed", exp["seed"]),
            target_accuracy=target,
            snapshot_every=_as_int("experiment", "snapshot_every", exp["snapshot_every"]),
        )
    except ValueError as err:
        raise ConfigError(str(err)) from None

    run_id = cfg["output"]["run_id"].strip() or (
        f"{run_name}-{experiment.algorithm}-s{experiment.seed}"
    )
    return ResolvedConfig(
        experiment=experiment, out_dir=Path(cfg["output"]["dir"]), run_id=run_id
    )


def load_config(
    path,
    overrides: list[str] | None = None,
    env: dict[str, str] | None = None,
) -> ResolvedConfig:
    raw = read_config_file(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return build_config(raw, run_name=Path(path).stem, env=env)
