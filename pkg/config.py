"""Run configuration: defaults, profiles, file/env/flag merging, and artifact manifests.

Precedence, lowest first: profile defaults, JSON config file, UNIGRAPH_*
environment variables (a .env file is honored by the CLI), command-line flags.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Mapping, Optional


LOGGER = logging.getLogger("config")

ENV_PREFIX = "UNIGRAPH_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    profile: str = "desk"
    seed: int = 0
    deterministic: bool = False
    data_dir: str = "data/synthetic"
    run_dir: str = "runs/default"
    # synthetic graph
    num_classes: int = 3
    nodes_per_class: int = 50
    intra_p: float = 0.1
    inter_p: float = 0.01
    words_per_node: int = 12
    noise_ratio: float = 0.25
    # PPR sampling
    ppr_alpha: float = 0.15
    ppr_epsilon: float = 1e-6
    ppr_topk: int = 32
    # language model
    vocab_size: int = 2000
    hidden_size: int = 64
    lm_layers: int = 2
    lm_heads: int = 4
    max_len: int = 32
    dropout: float = 0.2
    mask_rate: float = 0.75
    # GNN
    num_gnn_layers: int = 3
    gnn_heads: int = 4
    residual: bool = True
    attention_dropout: float = 0.0
    nonlinearity: str = "elu"
    use_edge_features: bool = True
    # ablation switches
    use_gnn: bool = True
    use_mlm: bool = True
    sampler: str = "ppr"
    sampler_hops: int = 2
    # pre-training
    lr: float = 1e-3
    weight_decay: float = 1e-3
    ema_decay: float = 0.996
    loss_lambda: float = 0.1
    batch_anchors: int = 8
    epochs: int = 1
    max_steps: int = 0
    latent_source: str = "lm_cls"
    grad_clip: float = 0.0
    checkpoint_every: int = 0
    log_every: int = 10
    # inference
    pre_gnn: bool = False
    # linear probe
    probe_lr: float = 0.01
    probe_epochs: int = 5000
    probe_patience: int = 200
    probe_eval_every: int = 10
    probe_bias: bool = True
    # few-shot
    ways: int = 3
    shots: int = 3
    tasks: int = 500
    max_query: int = 50
    # instruction export
    template_domain: str = "citation"
    neighbor_cap: int = 8
    inline: bool = False
    instruction_split: str = "test"
    # gradient check
    gradcheck_tolerance: float = 1e-4

    def __post_init__(self) -> None:
        if self.profile not in PROFILES:
            raise ConfigError(f"Unknown profile: {self.profile} (expected one of {', '.join(PROFILES)})")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


PROFILES: Dict[str, Dict[str, Any]] = {
    "desk": {},
    "paper": {
        "mask_rate": 0.75,
        "lr": 2e-5,
        "weight_decay": 0.001,
        "dropout": 0.2,
        "num_gnn_layers": 3,
        "ppr_topk": 128,
        "ema_decay": 0.996,
        "loss_lambda": 0.1,
        "hidden_size": 768,
        "lm_layers": 12,
        "lm_heads": 12,
        "gnn_heads": 12,
        "max_len": 128,
        "vocab_size": 50000,
        "epochs": 1,
    },
}

FIELD_TYPES: Dict[str, type] = {f.name: type(f.default) for f in fields(RunConfig)}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, value: Any, source: str) -> Any:
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key '{key}' ({source})")
    expected = FIELD_TYPES[key]
    if isinstance(value, str) and expected is not str:
        text = value.strip().lower()
        try:
            if expected is bool:
                if text in _TRUE:
                    return True
                if text in _FALSE:
                    return False
                raise ValueError(text)
            return expected(text)
        except ValueError:
            raise ConfigError(f"config key '{key}' expects {expected.__name__}, got {value!r} ({source})") from None
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if expected is not bool and isinstance(value, bool) or not isinstance(value, expected):
        raise ConfigError(f"config key '{key}' expects {expected.__name__}, got {value!r} ({source})")
    return value


def _read_config_file(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    # Keys starting with "_" are comments.
    return {k: v for k, v in data.items() if not k.startswith("_")}


def parse_config(
    path: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    """Merge profile defaults, file values, UNIGRAPH_* environment values and flag overrides."""
    environ = os.environ if environ is None else environ
    overrides = dict(overrides or {})
    file_values = _read_config_file(Path(path)) if path else {}
    env_values = {
        key: environ[ENV_PREFIX + key.upper()]
        for key in FIELD_TYPES
        if ENV_PREFIX + key.upper() in environ
    }

    layers = [(file_values, f"file {path}"), (env_values, "environment"), (overrides, "flag")]
    coerced = [{k: _coerce(k, v, source) for k, v in values.items()} for values, source in layers]

    profile = RunConfig.profile
    for values in coerced:
        profile = values.get("profile", profile)
    if profile not in PROFILES:
        raise ConfigError(f"Unknown profile: {profile} (expected one of {', '.join(PROFILES)})")

    merged = asdict(RunConfig())
    merged.update(PROFILES[profile])
    for values in coerced:
        merged.update(values)
    merged["profile"] = profile
    config = RunConfig(**merged)
    LOGGER.debug("Resolved config: %s", json.dumps(config.to_dict(), sort_keys=True))
    return config


def manifest_path(artifact_path: Path) -> Path:
    artifact_path = Path(artifact_path)
    return artifact_path.with_name(artifact_path.name + ".manifest.json")


def write_manifest(artifact_path: Path, payload: Mapping[str, Any]) -> Path:
    """Write `<artifact>.manifest.json` next to the artifact (sorted keys, no timestamps)."""
    path = manifest_path(artifact_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    return path
