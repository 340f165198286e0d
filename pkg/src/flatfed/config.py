"""Experiment configuration: a line-oriented key/value format with sections.

The format is deliberately small and diff-friendly::

    # full-line comments and blank lines are ignored
    [section]
    key = value          # values: int, float, true/false, "string", [lists]

Unknown sections or keys are rejected with their line number. The exact
schema lives in ``SCHEMA`` below and is documented in the README and the
shipped presets under configs/.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field

from .errors import ConfigError
from .federation import SwaConfig

__all__ = ["ExperimentConfig", "parse_config", "parse_config_text", "SCHEMA"]

_INT_RE = re.compile(r"^[+-]?\d+$")


def _parse_scalar(text: str, path: str, line_no: int):
    text = text.strip()
    if not text:
        raise ConfigError(f"{path}:{line_no}: empty value")
    if text == "true":
        return True
    if text == "false":
        return False
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    if _INT_RE.match(text):
        return int(text)
    try:
        return float(text)
    except ValueError:
        return text  # bare string (paths, names)


def _parse_value(text: str, path: str, line_no: int):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ConfigError(f"{path}:{line_no}: unterminated list")
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, path, line_no) for part in inner.split(",")]
    return _parse_scalar(text, path, line_no)


def _parse_sections(text: str, path: str) -> dict[str, dict[str, tuple[object, int]]]:
    sections: dict[str, dict[str, tuple[object, int]]] = {}
    current: str | None = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if not current:
                raise ConfigError(f"{path}:{line_no}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"{path}:{line_no}: key outside any [section]")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in sections[current]:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r} in [{current}]")
        sections[current][key] = (_parse_value(value, path, line_no), line_no)
    return sections


# section -> key -> expected type ("int" | "float" | "bool" | "str" | "list")
SCHEMA: dict[str, dict[str, str]] = {
    "experiment": {
        "name": "str",
        "seed": "int",
        "rounds": "int",
        "output_dir": "str",
        "checkpoint_every": "int",
    },
    "dataset": {
        "kind": "str",
        "num_classes": "int",
        "per_class": "int",
        "test_per_class": "int",
        "input_dim": "int",
        "seed": "int",
        "separation": "float",
        "spread": "float",
        "train_paths": "list",
        "test_path": "str",
        "normalize": "bool",
    },
    "partition": {"clients": "int", "alpha": "float", "seed": "int"},
    "federation": {"clients_per_round": "int"},
    "model": {"kind": "str", "hidden": "list"},
    "optimizer": {
        "kind": "str",
        "lr": "float",
        "momentum": "float",
        "weight_decay": "float",
        "rho": "float",
        "eta": "float",
        "batch_size": "int",
        "epochs": "int",
    },
    "server": {"beta": "float", "lr": "float"},
    "swa": {
        "start_round": "int",
        "cycle": "int",
        "gamma1": "float",
        "gamma2": "float",
        "cyclic_from_start": "bool",
    },
    "augment": {"standard": "bool", "cutout": "int", "mixup": "float"},
    "probes": {
        "lambda_max_every": "int",
        "spectrum_k": "int",
        "hvp_batch": "int",
        "per_client_every": "int",
        "feature_norm_every": "int",
        "seed": "int",
    },
}


def _coerce(value, want: str, path: str, key: str, line_no: int):
    if want == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}:{line_no}: {key!r} must be an integer")
        return value
    if want == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}:{line_no}: {key!r} must be a number")
        return float(value)
    if want == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path}:{line_no}: {key!r} must be true or false")
        return value
    if want == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path}:{line_no}: {key!r} must be a string")
        return value
    if want == "list":
        if not isinstance(value, list):
            raise ConfigError(f"{path}:{line_no}: {key!r} must be a list")
        return value
    raise AssertionError(want)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str
    num_classes: int = 10
    per_class: int = 100
    test_per_class: int = 50
    input_dim: int = 32
    seed: int = 0
    separation: float = 3.0
    spread: float = 1.0
    train_paths: tuple[str, ...] = ()
    test_path: str = ""
    normalize: bool = True


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    rho: float = 0.05
    eta: float = 0.2
    batch_size: int = 64
    epochs: int = 1


@dataclass(frozen=True)
class AugmentSpec:
    standard: bool = False
    cutout: int = 0
    mixup: float = 0.0


@dataclass(frozen=True)
class ProbeSpec:
    lambda_max_every: int = 0
    spectrum_k: int = 1
    hvp_batch: int = 1024
    per_client_every: int = 0
    feature_norm_every: int = 0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    seed: int
    rounds: int
    output_dir: str
    checkpoint_every: int
    dataset: DatasetSpec
    clients: int
    alpha: float
    partition_seed: int
    clients_per_round: int
    model_kind: str
    hidden: tuple[int, ...]
    optimizer: OptimizerSpec
    server_beta: float
    server_lr: float
    swa: SwaConfig | None
    augment: AugmentSpec
    probes: ProbeSpec
    source_text: str = field(repr=False, default="")


def _get(sec: dict, key: str, default=None):
    return sec[key][0] if key in sec else default


def parse_config_text(text: str, path: str = "<config>") -> ExperimentConfig:
    sections = _parse_sections(text, path)

    for sec_name, entries in sections.items():
        if sec_name not in SCHEMA:
            first_line = min(line for _, line in entries.values()) if entries else 0
            raise ConfigError(f"{path}:{first_line}: unknown section [{sec_name}]")
        for key, (value, line_no) in entries.items():
            if key not in SCHEMA[sec_name]:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r} in [{sec_name}]")
            entries[key] = (_coerce(value, SCHEMA[sec_name][key], path, key, line_no), line_no)

    def require(sec_name: str, key: str):
        sec = sections.get(sec_name, {})
        if key not in sec:
            raise ConfigError(f"{path}: missing required key {key!r} in [{sec_name}]")
        return sec[key][0]

    exp = sections.get("experiment", {})
    rounds = require("experiment", "rounds")
    if rounds < 1:
        line = exp["rounds"][1]
        raise ConfigError(f"{path}:{line}: 'rounds' must be >= 1, got {rounds}")

    ds_sec = sections.get("dataset", {})
    kind = require("dataset", "kind")
    if kind not in ("synthetic", "cifar10", "cifar100"):
        line = ds_sec["kind"][1]
        raise ConfigError(f"{path}:{line}: unknown dataset kind {kind!r}")
    if kind != "synthetic" and not _get(ds_sec, "train_paths"):
        raise ConfigError(f"{path}: dataset kind {kind!r} requires 'train_paths'")
    defaults = DatasetSpec(kind=kind)
    dataset = DatasetSpec(
        kind=kind,
        num_classes=_get(ds_sec, "num_classes", 10 if kind != "cifar100" else 100),
        per_class=_get(ds_sec, "per_class", defaults.per_class),
        test_per_class=_get(ds_sec, "test_per_class", defaults.test_per_class),
        input_dim=_get(ds_sec, "input_dim", defaults.input_dim),
        seed=_get(ds_sec, "seed", defaults.seed),
        separation=_get(ds_sec, "separation", defaults.separation),
        spread=_get(ds_sec, "spread", defaults.spread),
        train_paths=tuple(str(p) for p in _get(ds_sec, "train_paths", [])),
        test_path=str(_get(ds_sec, "test_path", "")),
        normalize=_get(ds_sec, "normalize", defaults.normalize),
    )

    part = sections.get("partition", {})
    clients = require("partition", "clients")
    if clients < 1:
        line = part["clients"][1]
        raise ConfigError(f"{path}:{line}: 'clients' must be >= 1")
    alpha = float(_get(part, "alpha", 0.0))
    if alpha < 0:
        line = part["alpha"][1]
        raise ConfigError(f"{path}:{line}: 'alpha' must be >= 0")

    fed_sec = sections.get("federation", {})
    clients_per_round = require("federation", "clients_per_round")
    if not 1 <= clients_per_round <= clients:
        line = fed_sec["clients_per_round"][1]
        raise ConfigError(
            f"{path}:{line}: 'clients_per_round' must be in [1, {clients}]"
        )

    model_sec = sections.get("model", {})
    model_kind = require("model", "kind")
    if model_kind not in ("mlp", "lenet"):
        line = model_sec["kind"][1]
        raise ConfigError(f"{path}:{line}: unknown model kind {model_kind!r}")
    hidden = tuple(int(h) for h in _get(model_sec, "hidden", []))

    opt_sec = sections.get("optimizer", {})
    opt_kind = str(_get(opt_sec, "kind", "sgd"))
    if opt_kind not in ("sgd", "sam", "asam"):
        line = opt_sec["kind"][1]
        raise ConfigError(f"{path}:{line}: unknown optimizer kind {opt_kind!r}")
    od = OptimizerSpec()
    optimizer = OptimizerSpec(
        kind=opt_kind,
        lr=_get(opt_sec, "lr", od.lr),
        momentum=_get(opt_sec, "momentum", od.momentum),
        weight_decay=_get(opt_sec, "weight_decay", od.weight_decay),
        rho=_get(opt_sec, "rho", od.rho),
        eta=_get(opt_sec, "eta", od.eta),
        batch_size=_get(opt_sec, "batch_size", od.batch_size),
        epochs=_get(opt_sec, "epochs", od.epochs),
    )
    if optimizer.epochs < 1:
        raise ConfigError(f"{path}: 'epochs' must be >= 1")

    server = sections.get("server", {})
    server_beta = float(_get(server, "beta", 0.0))
    server_lr = float(_get(server, "lr", 1.0))

    swa = None
    if "swa" in sections:
        swa_sec = sections["swa"]
        swa = SwaConfig(
            start_round=require("swa", "start_round"),
            cycle=_get(swa_sec, "cycle", 1),
            gamma1=_get(swa_sec, "gamma1", optimizer.lr),
            gamma2=_get(swa_sec, "gamma2", optimizer.lr),
            cyclic_from_start=_get(swa_sec, "cyclic_from_start", False),
        )
        if swa.start_round < 1:
            raise ConfigError(f"{path}: swa 'start_round' must be >= 1")

    aug_sec = sections.get("augment", {})
    augment = AugmentSpec(
        standard=_get(aug_sec, "standard", False),
        cutout=_get(aug_sec, "cutout", 0),
        mixup=float(_get(aug_sec, "mixup", 0.0)),
    )

    probe_sec = sections.get("probes", {})
    pd = ProbeSpec()
    probes = ProbeSpec(
        lambda_max_every=_get(probe_sec, "lambda_max_every", pd.lambda_max_every),
        spectrum_k=_get(probe_sec, "spectrum_k", pd.spectrum_k),
        hvp_batch=_get(probe_sec, "hvp_batch", pd.hvp_batch),
        per_client_every=_get(probe_sec, "per_client_every", pd.per_client_every),
        feature_norm_every=_get(probe_sec, "feature_norm_every", pd.feature_norm_every),
        seed=_get(probe_sec, "seed", pd.seed),
    )

    return ExperimentConfig(
        name=str(_get(exp, "name", "run")),
        seed=int(_get(exp, "seed", 0)),
        rounds=rounds,
        output_dir=str(_get(exp, "output_dir", "")),
        checkpoint_every=int(_get(exp, "checkpoint_every", 100)),
        dataset=dataset,
        clients=clients,
        alpha=alpha,
        partition_seed=int(_get(part, "seed", 0)),
        clients_per_round=clients_per_round,
        model_kind=model_kind,
        hidden=hidden,
        optimizer=optimizer,
        server_beta=server_beta,
        server_lr=server_lr,
        swa=swa,
        augment=augment,
        probes=probes,
        source_text=text,
    )


def parse_config(path: str | os.PathLike) -> ExperimentConfig:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    return parse_config_text(text, path)
