"""Experiment configuration: nested dataclasses loaded from YAML with strict keys."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .corpus import AnnotatorConfig, BenchmarkSpec
from .metatrain import MamlConfig, PptConfig
from .taskgen import ClusterConfig
from .tuning import TuneConfig

ARTIFACT_ENV = "METAPT_ARTIFACTS"


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_seq_len: int = 48
    prompt_len: int = 16
    max_vocab: int = 2000


@dataclass
class PretrainSection:
    steps: int = 6000
    batch_size: int = 32
    lr: float = 3e-3
    warmup: int = 50


@dataclass
class CorpusSection:
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    benchmark_seed: int = 0
    # optional real data; when set these replace the synthetic splits
    source_path: str = ""
    pool_path: str = ""
    downstream_paths: dict = field(default_factory=dict)
    annotator: AnnotatorConfig = field(default_factory=AnnotatorConfig)
    threshold: float = 0.95


@dataclass
class EvalSection:
    n_shot: int = 40
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    methods: list = field(default_factory=lambda: ["PT", "PPT", "MetaPT"])
    datasets: list = field(default_factory=list)  # empty means every downstream set


@dataclass
class AblationSection:
    sizes: list = field(default_factory=lambda: [1000, 4000, 16000])
    Ks: list = field(default_factory=lambda: [3, 10, 30])
    strategies: list = field(default_factory=lambda: ["kmeans", "lda", "random", "label"])
    dataset: str = ""  # empty means the first downstream set
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    pool_per_domain: int = 0  # >0 regenerates a larger unlabeled pool for the size sweep
    sweeps: list = field(default_factory=lambda: ["datasize", "clusters", "methods"])
    svg: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    artifact_dir: str = "artifacts"
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    taskgen: ClusterConfig = field(default_factory=ClusterConfig)
    maml: MamlConfig = field(default_factory=MamlConfig)
    ppt: PptConfig = field(default_factory=PptConfig)
    tune: TuneConfig = field(default_factory=TuneConfig)
    ft: TuneConfig = field(default_factory=lambda: TuneConfig(lr=1e-3))
    eval: EvalSection = field(default_factory=EvalSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of the experiment settings; where the artifacts live is not part of it."""
        d = self.to_dict()
        d.pop("artifact_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    @property
    def artifacts(self) -> Path:
        return Path(os.environ.get(ARTIFACT_ENV) or self.artifact_dir)


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            kwargs[f.name] = _build(hints[f.name], data[f.name], f"{where}{f.name}.")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _set_dotted(tree: dict, key: str, value) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, raw = item.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Defaults, then the YAML file, then ``a.b=c`` overrides; unknown keys are errors."""
    tree: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        k, v = parse_override(item)
        _set_dotted(tree, k, v)
    return _build(ExperimentConfig, tree, "")


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


SMOKE_CONFIG = Path(__file__).with_name("smoke.yaml")
