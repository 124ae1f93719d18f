"""Declarative experiment configuration: schema, validation, loading, hashing, seed streams."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .clustering import GATES, ClusterConfig
from .datagen import TINTS, AugmentRecipe
from .ddm import CRITIC_INPUTS, DdmConfig
from .encoder import ENCODERS, EncoderSpec
from .errors import ConfigError
from .ssl_losses import BASELINES

METHODS = ("ddm", "baseline")
MODES = ("labeled", "pseudo")
SLICES = ("full", "prefix", "remainder")
OPTIMIZERS = ("adam", "sgd")


@dataclass(frozen=True)
class DataConfig:
    generator: str = "colored_shapes"
    palette: tuple[str, ...] = ("red", "green")
    unseen_palette: tuple[str, ...] = ("blue",)
    n_train: int = 5000
    n_test: int = 2000
    image_size: int = 16
    n_classes: int = 10
    augment: AugmentRecipe = field(default_factory=AugmentRecipe)
    cache_dir: str | None = None


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 256
    optimizer: OptimizerConfig | None = None  # None: the baseline's own default
    schedule: str = "cosine"
    ssl_slice: str = "auto"  # auto: remainder under ddm, full for the plain baseline
    probe_every: int = 0
    checkpoint_every: int = 1


@dataclass(frozen=True)
class EvalConfig:
    probes: tuple[tuple[str, str], ...] = (
        ("class", "full"),
        ("class", "prefix"),
        ("class", "remainder"),
        ("domain", "prefix"),
        ("domain", "remainder"),
    )
    probe_C: float = 1.0
    probe_max_iter: int = 2000
    unseen_fraction_train: float = 0.5
    deviation_threshold: float = 1.5


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: str = "ddm"
    mode: str = "labeled"
    baseline: str = "simclr"
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    ddm: DdmConfig = field(default_factory=DdmConfig)
    clustering: ClusterConfig = field(default_factory=ClusterConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"

    @property
    def num_domains(self) -> int:
        return self.clustering.num_domains if self.mode == "pseudo" else len(self.data.palette)

    @property
    def ssl_slice(self) -> str:
        if self.train.ssl_slice != "auto":
            return self.train.ssl_slice
        return "remainder" if self.method == "ddm" else "full"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def hash(self) -> str:
        return config_hash(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return from_dict(apply_overrides(self.to_dict(), changes))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def stream_seed(root: int, name: str) -> int:
    """Independent 32-bit seed for the named random stream under ``root``."""
    return int(np.random.SeedSequence([int(root), zlib.crc32(name.encode())]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# construction from plain documents

_SECTIONS: dict[str, type] = {
    "encoder": EncoderSpec,
    "ddm": DdmConfig,
    "clustering": ClusterConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _field_types(cls) -> dict[str, dataclasses.Field]:
    return {f.name: f for f in dataclasses.fields(cls)}


def _unknown_keys(doc: Any, cls, path: str) -> list[str]:
    if not isinstance(doc, dict):
        return [f"{path or '<root>'}: expected a mapping"]
    out = []
    fields = _field_types(cls)
    nested = {"data": {"augment": AugmentRecipe}, "train": {"optimizer": OptimizerConfig}}
    for key, value in doc.items():
        p = f"{path}.{key}" if path else key
        if key not in fields:
            out.append(f"{p}: unknown key")
            continue
        sub = _SECTIONS.get(key) if cls is ExperimentConfig else nested.get(path, {}).get(key)
        if sub is not None and value is not None:
            out.extend(_unknown_keys(value, sub, p))
    return out


def _build(cls, doc: dict | None):
    doc = dict(doc or {})
    if cls is DataConfig and "augment" in doc:
        aug = dict(doc["augment"] or {})
        for key in ("crop_scale", "crop_ratio", "blur_sigma"):
            if key in aug:
                aug[key] = tuple(aug[key])
        doc["augment"] = AugmentRecipe(**aug)
    if cls is DataConfig:
        for key in ("palette", "unseen_palette"):
            if key in doc:
                doc[key] = tuple(doc[key])
    if cls is TrainConfig and doc.get("optimizer") is not None:
        doc["optimizer"] = OptimizerConfig(**doc["optimizer"])
    if cls is EvalConfig and "probes" in doc:
        doc["probes"] = tuple(tuple(p) for p in doc["probes"])
    if cls is DdmConfig and "critic_hidden" in doc:
        doc["critic_hidden"] = tuple(doc["critic_hidden"])
    if cls is EncoderSpec:
        return EncoderSpec.from_dict(doc)
    return cls(**doc)


def from_dict(doc: dict) -> ExperimentConfig:
    """Validate a plain document and build the config; raises ConfigError listing every violation."""
    problems = validate(doc)
    if problems:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(problems))
    doc = dict(doc)
    kwargs = {k: v for k, v in doc.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, doc.get(name))
    # parameter init is one of the named streams of the root seed
    init_seed = stream_seed(kwargs.get("seed", 0), "init")
    kwargs["encoder"] = dataclasses.replace(kwargs["encoder"], seed=init_seed)
    return ExperimentConfig(**kwargs)


def default_dict() -> dict:
    return ExperimentConfig().to_dict()


def _merged(doc: dict) -> dict:
    """``doc`` laid over the defaults (sections merged key by key)."""
    base = default_dict()
    for key, value in doc.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            merged = dict(base[key])
            for k2, v2 in value.items():
                if isinstance(v2, dict) and isinstance(merged.get(k2), dict):
                    merged[k2] = {**merged[k2], **v2}
                else:
                    merged[k2] = v2
            base[key] = merged
        else:
            base[key] = value
    if doc.get("train", {}).get("optimizer", "unset") is None:
        base["train"]["optimizer"] = None
    return base


def validate(config: ExperimentConfig | dict) -> list[str]:
    """Every violated constraint, each prefixed with its field path. Empty list means valid."""
    if isinstance(config, ExperimentConfig):
        doc = config.to_dict()
    else:
        problems = _unknown_keys(config, ExperimentConfig, "")
        if problems:
            return problems
        doc = _merged(config)
    out: list[str] = []

    def need(cond: bool, msg: str):
        if not cond:
            out.append(msg)

    def num(path: str, value, lo=None, hi=None, integer=False, lo_open=False):
        kind = int if integer else (int, float)
        if isinstance(value, bool) or not isinstance(value, kind):
            out.append(f"{path}: expected {'an integer' if integer else 'a number'}, got {value!r}")
            return False
        if lo is not None and (value <= lo if lo_open else value < lo):
            out.append(f"{path}: must be {'>' if lo_open else '>='} {lo}, got {value!r}")
            return False
        if hi is not None and value > hi:
            out.append(f"{path}: must be <= {hi}, got {value!r}")
            return False
        return True

    num("seed", doc["seed"], 0, integer=True)
    need(doc["method"] in METHODS, f"method: must be one of {METHODS}")
    need(doc["mode"] in MODES, f"mode: must be one of {MODES}")
    need(doc["baseline"] in BASELINES, f"baseline: must be one of {sorted(BASELINES)}")
    need(isinstance(doc["output_dir"], str) and doc["output_dir"] != "", "output_dir: must be a non-empty path")

    enc = doc["encoder"]
    if isinstance(doc["seed"], int) and not isinstance(config, ExperimentConfig):
        given = config.get("encoder", {}).get("seed") if isinstance(config.get("encoder"), dict) else None
        need(
            given is None or given == stream_seed(doc["seed"], "init"),
            "encoder.seed: derived from the root seed; set `seed` instead",
        )
    need(enc["arch"] in ENCODERS, f"encoder.arch: must be one of {sorted(ENCODERS)}")
    if num("encoder.r", enc["r"], 2, integer=True) and num("encoder.k", enc["k"], 1, integer=True):
        need(enc["k"] < enc["r"], f"encoder.k: prefix width must be < representation width r ({enc['k']} >= {enc['r']})")
    num("encoder.image_size", enc["image_size"], 4, integer=True)
    num("encoder.in_channels", enc["in_channels"], 1, integer=True)
    if enc["arch"] == "conv4":
        need(len(enc["widths"]) == 4, "encoder.widths: conv4 needs four widths")

    ddm = doc["ddm"]
    num("ddm.lambda_var", ddm["lambda_var"], 0)
    num("ddm.lambda_invar", ddm["lambda_invar"], 0)
    num("ddm.tau", ddm["tau"], 0, lo_open=True)
    num("ddm.gp_weight", ddm["gp_weight"], 0)
    num("ddm.critic_steps", ddm["critic_steps"], 1, integer=True)
    num("ddm.critic_lr", ddm["critic_lr"], 0)
    need(ddm["critic_input"] in CRITIC_INPUTS, f"ddm.critic_input: must be one of {CRITIC_INPUTS}")

    cl = doc["clustering"]
    num("clustering.gamma", cl["gamma"], 0, 1, lo_open=True) and need(cl["gamma"] < 1, "clustering.gamma: must be < 1")
    num("clustering.warmup_fraction", cl["warmup_fraction"], 0, 1)
    num("clustering.recluster_every", cl["recluster_every"], 1, integer=True)
    num("clustering.kmeans_iters", cl["kmeans_iters"], 1, integer=True)
    num("clustering.epsilon0", cl["epsilon0"], 0)
    need(cl["gate"] in GATES, f"clustering.gate: must be one of {GATES}")
    num("clustering.num_domains", cl["num_domains"], 1, integer=True)

    data = doc["data"]
    need(data["generator"] == "colored_shapes", "data.generator: only 'colored_shapes' is available")
    need(len(data["palette"]) >= 1, "data.palette: must name at least one tint")
    for p in list(data["palette"]) + list(data["unseen_palette"]):
        need(p in TINTS, f"data.palette: unknown tint {p!r}")
    need(not set(data["palette"]) & set(data["unseen_palette"]), "data.unseen_palette: overlaps the training palette")
    num("data.n_train", data["n_train"], 1, integer=True)
    num("data.n_test", data["n_test"], 1, integer=True)
    num("data.n_classes", data["n_classes"], 1, 10, integer=True)
    if data["image_size"] != enc["image_size"]:
        out.append("data.image_size: must equal encoder.image_size")

    m = cl["num_domains"] if doc["mode"] == "pseudo" else len(data["palette"])
    if doc["method"] == "ddm" and (ddm["lambda_var"] > 0 or ddm["lambda_invar"] > 0 or doc["mode"] == "pseudo"):
        where = "clustering.num_domains" if doc["mode"] == "pseudo" else "data.palette"
        need(m >= 2, f"{where}: DDM losses need at least 2 domains (got {m})")
    if doc["mode"] == "pseudo":
        need(doc["method"] == "ddm", "mode: pseudo mode requires method 'ddm'")

    tr = doc["train"]
    num("train.epochs", tr["epochs"], 1, integer=True)
    num("train.batch_size", tr["batch_size"], 2, integer=True)
    need(tr["schedule"] in ("cosine", "constant"), "train.schedule: must be 'cosine' or 'constant'")
    need(tr["ssl_slice"] in ("auto",) + SLICES, f"train.ssl_slice: must be auto or one of {SLICES}")
    num("train.probe_every", tr["probe_every"], 0, integer=True)
    num("train.checkpoint_every", tr["checkpoint_every"], 1, integer=True)
    if tr["optimizer"] is not None:
        need(tr["optimizer"]["name"] in OPTIMIZERS, f"train.optimizer.name: must be one of {OPTIMIZERS}")
        num("train.optimizer.lr", tr["optimizer"]["lr"], 0)

    ev = doc["eval"]
    for i, probe in enumerate(ev["probes"]):
        if len(probe) != 2 or probe[0] not in ("class", "domain") or probe[1] not in SLICES:
            out.append(f"eval.probes[{i}]: expected [class|domain, full|prefix|remainder], got {probe!r}")
    num("eval.probe_C", ev["probe_C"], 0, lo_open=True)
    num("eval.probe_max_iter", ev["probe_max_iter"], 1, integer=True)
    num("eval.unseen_fraction_train", ev["unseen_fraction_train"], 0, 1, lo_open=True)
    num("eval.deviation_threshold", ev["deviation_threshold"], 0, lo_open=True)
    return out


# ---------------------------------------------------------------------------
# files and overrides


def parse_scalar(text: str):
    return yaml.safe_load(text)


def apply_overrides(doc: dict, overrides: dict[str, Any]) -> dict:
    """Set dotted keys (``train.epochs``) in a copy of ``doc``."""
    doc = copy.deepcopy(doc)
    for dotted, value in overrides.items():
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                node[part] = {} if node.get(part) is None else node[part]
            node = node[part]
        node[parts[-1]] = value
    return doc


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a YAML/JSON config (or start from defaults) and apply dotted overrides."""
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    doc = apply_overrides(doc, overrides or {})
    return from_dict(doc)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
    return path


_JSON_TYPES = {int: "integer", float: "number", str: "string", bool: "boolean"}


def _schema_for(cls) -> dict:
    props = {}
    for f in dataclasses.fields(cls):
        sub = None
        if cls is ExperimentConfig and f.name in _SECTIONS:
            sub = _SECTIONS[f.name]
        elif cls is DataConfig and f.name == "augment":
            sub = AugmentRecipe
        elif cls is TrainConfig and f.name == "optimizer":
            sub = OptimizerConfig
        if sub is not None:
            props[f.name] = _schema_for(sub)
            if f.name == "optimizer":
                props[f.name] = {"anyOf": [props[f.name], {"type": "null"}]}
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()  # type: ignore[misc]
        entry: dict[str, Any] = {"default": _plain(default)}
        if isinstance(default, (tuple, list)):
            entry["type"] = "array"
        elif type(default) in _JSON_TYPES:
            entry["type"] = _JSON_TYPES[type(default)]
        props[f.name] = entry
    return {"type": "object", "additionalProperties": False, "properties": props}


def config_schema() -> dict:
    """JSON Schema (draft 2020-12) for the configuration document, defaults included."""
    schema = _schema_for(ExperimentConfig)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "domainsplit experiment"
    props = schema["properties"]
    props["method"]["enum"] = list(METHODS)
    props["mode"]["enum"] = list(MODES)
    props["baseline"]["enum"] = sorted(BASELINES)
    return schema
