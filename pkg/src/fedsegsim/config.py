"""Declarative experiment configuration: one TOML file describes a run.

The file has four tables plus two top-level keys::

    seed = 0                  # master seed; every random draw derives from it
    output_dir = "runs/demo"  # artifact directory (joined to FEDSEGSIM_OUTPUT_ROOT)

    [data]        # scenario: preset name, shape, sizes, optional holdout
    [model]       # network widths
    [losses]      # loss temperatures
    [federation]  # round loop: counts, flags, learning rates

Unknown keys anywhere are rejected.  `num_clients`, `seed`, `k_ch`, and `tau`
live in their owning tables and are injected into the federation config, so a
single value controls each concern.  Parsing is lossless: `to_toml` emits a
file that parses back to an identical configuration.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError, SetupError
from .federation import FederationConfig
from .scenes import ClientData, FederationSplit, load_dataset, make_preset, split_federation

PRESETS = ("severe", "slight", "custom")


@dataclass(frozen=True)
class DataConfig:
    """Scenario description.

    `num_clients` counts participating training clients.  With a holdout,
    one extra domain is generated and held out as the unseen-domain eval set,
    so the training federation still has `num_clients` members.
    """

    preset: str = "severe"
    num_clients: int = 4
    num_classes: int = 6
    size: int = 64
    n_train: int = 200
    n_val: int = 40
    base_seed: Optional[int] = None  # defaults to the master seed
    holdout_client: Optional[int] = None
    root: Optional[str] = None  # custom preset: saved-dataset directory

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"data.preset must be one of {PRESETS}, got {self.preset!r}")
        if self.preset == "custom":
            if self.root is None:
                raise ConfigError("data.preset = 'custom' requires data.root")
            if self.holdout_client is not None:
                raise ConfigError("custom datasets carry their own unseen split; drop data.holdout_client")
        elif self.root is not None:
            raise ConfigError("data.root only applies to the custom preset")
        if self.num_clients < 2:
            raise ConfigError("data.num_clients must be >= 2")
        if self.num_classes < 2:
            raise ConfigError("data.num_classes must be >= 2")
        if self.size < 8 or self.size % 4:
            raise ConfigError("data.size must be >= 8 and a multiple of 4")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("data.n_train and data.n_val must be >= 1")
        if self.holdout_client is not None and not 0 <= self.holdout_client <= self.num_clients:
            raise ConfigError("data.holdout_client must index one of the generated domains")


@dataclass(frozen=True)
class ModelConfig:
    k_ch: int = 32

    def __post_init__(self):
        if self.k_ch < 4:
            raise ConfigError("model.k_ch must be >= 4")


@dataclass(frozen=True)
class LossSettings:
    tau: float = 0.05

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError("losses.tau must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    output_dir: str
    data: DataConfig
    model: ModelConfig
    losses: LossSettings
    federation: FederationConfig  # fully resolved (includes seed/num_clients/k_ch/tau)


# Federation keys a config file may set; the remaining FederationConfig fields
# are owned by other tables and injected.
_FEDERATION_KEYS = {
    f.name for f in fields(FederationConfig) if f.name not in ("num_clients", "seed", "k_ch", "tau")
}


def _check_type(path: str, value: Any, expected: type) -> Any:
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if expected is bool and not isinstance(value, bool):
        raise ConfigError(f"{path} must be a boolean, got {value!r}")
    if expected is str and not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


_SCHEMA: Dict[str, Dict[str, type]] = {
    "data": {
        "preset": str, "num_clients": int, "num_classes": int, "size": int,
        "n_train": int, "n_val": int, "base_seed": int, "holdout_client": int, "root": str,
    },
    "model": {"k_ch": int},
    "losses": {"tau": float},
    "federation": {
        "rounds": int, "local_iters": int, "batch_size": int, "client_fraction": float,
        "upload_ratio": float, "lambda_target": float, "warmup_rounds": int,
        "rollback_drop_threshold": float, "clip_norm": float, "use_proto": bool,
        "use_multicon": bool, "use_adv": bool, "algorithm": str, "learning_rate": float,
        "disc_learning_rate": float, "server_learning_rate": float, "weight_decay": float,
        "distill_batch": int, "intra_period": int, "inter_anchors": int, "proto_max_images": int,
    },
}

assert set(_SCHEMA["federation"]) == _FEDERATION_KEYS


def _take_table(raw: Dict[str, Any], section: str) -> Dict[str, Any]:
    table = raw.get(section, {})
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    schema = _SCHEMA[section]
    out = {}
    for key, value in table.items():
        if key not in schema:
            raise ConfigError(f"unknown key {section}.{key}")
        out[key] = _check_type(f"{section}.{key}", value, schema[key])
    return out


def from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a parsed TOML document into an ExperimentConfig."""
    allowed_top = {"seed", "output_dir", "data", "model", "losses", "federation"}
    for key in raw:
        if key not in allowed_top:
            raise ConfigError(f"unknown key {key}")
    seed = _check_type("seed", raw.get("seed", 0), int)
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    output_dir = _check_type("output_dir", raw.get("output_dir", "runs/default"), str)

    data = DataConfig(**_take_table(raw, "data"))
    model = ModelConfig(**_take_table(raw, "model"))
    losses = LossSettings(**_take_table(raw, "losses"))
    federation = FederationConfig(
        num_clients=data.num_clients,
        seed=seed,
        k_ch=model.k_ch,
        tau=losses.tau,
        **_take_table(raw, "federation"),
    )
    return ExperimentConfig(
        seed=seed, output_dir=output_dir, data=data, model=model, losses=losses, federation=federation
    )


def parse_config(text: str) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:  # message carries line/column anchors
        raise ConfigError(f"config parse error: {exc}") from exc
    return from_dict(raw)


def load_config(path: str, overrides: Optional[List[str]] = None) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode("utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not overrides:
        return parse_config(text)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides))


def apply_overrides(raw: Dict[str, Any], sets: List[str]) -> Dict[str, Any]:
    """Apply `section.key=value` (or `key=value`) assignments to a raw document.

    Values are parsed as TOML scalars; anything that does not parse is taken
    as a bare string, so `--set federation.algorithm=fedavg` needs no quoting.
    """
    out = copy.deepcopy(raw)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, _, literal = item.partition("=")
        keys = path.strip().split(".")
        if not all(keys) or len(keys) > 2:
            raise ConfigError(f"override path {path!r} must be key or section.key")
        try:
            value = tomllib.loads(f"v = {literal.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = literal.strip()
        node = out
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {path!r} descends into a non-table")
        node[keys[-1]] = value
    return out


# ---------------------------------------------------------------------------
# Serialization back to TOML (lossless round trip)
# ---------------------------------------------------------------------------


def _toml_scalar(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)  # valid TOML basic string for our values
    raise ConfigError(f"cannot serialize {value!r} to TOML")


def to_toml(config: ExperimentConfig) -> str:
    lines = [f"seed = {_toml_scalar(config.seed)}", f"output_dir = {_toml_scalar(config.output_dir)}"]

    def table(name: str, values: Dict[str, Any]) -> None:
        lines.append("")
        lines.append(f"[{name}]")
        for key, value in values.items():
            if value is None:
                continue
            lines.append(f"{key} = {_toml_scalar(value)}")

    table("data", asdict(config.data))
    table("model", asdict(config.model))
    table("losses", asdict(config.losses))
    fed = {k: v for k, v in asdict(config.federation).items() if k in _FEDERATION_KEYS}
    table("federation", fed)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Materializing the scenario
# ---------------------------------------------------------------------------


def experiment_split(config: ExperimentConfig) -> FederationSplit:
    data = config.data
    if data.preset == "custom":
        return load_split_from_dir(data.root)
    base_seed = data.base_seed if data.base_seed is not None else config.seed
    n_domains = data.num_clients + (1 if data.holdout_client is not None else 0)
    pairs = make_preset(data.preset, n_domains, data.num_classes, data.size, base_seed)
    return split_federation(
        [p[0] for p in pairs],
        [p[1] for p in pairs],
        n_train=data.n_train,
        n_val=data.n_val,
        holdout_client=data.holdout_client,
    )


def save_split_to_dir(split: FederationSplit, root: str) -> None:
    """Directory layout consumed by the custom preset: client_<id>/{train,val}
    plus an optional unseen/."""
    from .scenes import save_dataset

    for data in split.clients:
        save_dataset(data.train, os.path.join(root, f"client_{data.client_id}", "train"))
        save_dataset(data.val, os.path.join(root, f"client_{data.client_id}", "val"))
    if split.unseen:
        save_dataset(split.unseen, os.path.join(root, "unseen"))


def load_split_from_dir(root: str) -> FederationSplit:
    if not os.path.isdir(root):
        raise SetupError(f"custom dataset directory {root!r} does not exist")
    client_dirs = sorted(
        d for d in os.listdir(root) if d.startswith("client_") and os.path.isdir(os.path.join(root, d))
    )
    if not client_dirs:
        raise SetupError(f"no client_<id> directories under {root!r}")
    clients = []
    for d in client_dirs:
        try:
            cid = int(d[len("client_"):])
        except ValueError as exc:
            raise SetupError(f"bad client directory name {d!r}") from exc
        clients.append(
            ClientData(
                client_id=cid,
                train=load_dataset(os.path.join(root, d, "train")),
                val=load_dataset(os.path.join(root, d, "val")),
            )
        )
    clients.sort(key=lambda c: c.client_id)
    unseen_dir = os.path.join(root, "unseen")
    unseen = load_dataset(unseen_dir) if os.path.isdir(unseen_dir) else None
    holdout = unseen[0].client_id if unseen else None
    return FederationSplit(clients=clients, unseen=unseen, holdout_client=holdout)


def resolve_output_dir(output_dir: str) -> str:
    """Relative output paths live under FEDSEGSIM_OUTPUT_ROOT when it is set."""
    root = os.environ.get("FEDSEGSIM_OUTPUT_ROOT")
    if root and not os.path.isabs(output_dir):
        return os.path.join(root, output_dir)
    return output_dir
