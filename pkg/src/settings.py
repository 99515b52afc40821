import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from src.errors import ConfigError

TaskName = Literal["reconstruct", "structure", "classify"]
ModeName = Literal["isolated", "mixed", "transfer", "apocalypse"]
StrategyName = Literal["cccm", "cdr"]

# Valores por defecto por dataset (k, lr, épocas totales)
DATASET_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "cora": {"k": 7, "lr": 0.01, "epochs": 150, "num_classes": 7},
    "citeseer": {"k": 5, "lr": 0.001, "epochs": 2000, "num_classes": 6},
    "pubmed": {"k": 30, "lr": 0.001, "epochs": 500, "num_classes": 3},
}

DEFAULT_UNIVERSAL_K = 15


class GraphSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: str
    content_path: Optional[str] = None
    cites_path: Optional[str] = None
    k: Optional[int] = Field(default=None, ge=1)
    lr: Optional[float] = Field(default=None, ge=0.0)
    epochs: Optional[int] = Field(default=None, ge=1)
    depth: int = Field(default=1, ge=0)
    split: Literal["planetoid", "random"] = "planetoid"
    train_ratio: float = Field(default=0.6, gt=0.0, le=1.0)
    val_ratio: float = Field(default=0.2, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def _fill_dataset_defaults(self) -> "GraphSettings":
        defaults = DATASET_DEFAULTS.get(self.id.lower(), {})
        for key in ("k", "lr", "epochs"):
            if getattr(self, key) is None:
                if key not in defaults:
                    raise ValueError(f"graph '{self.id}' needs an explicit '{key}' (no built-in default)")
                setattr(self, key, defaults[key])
        if self.split == "random" and self.train_ratio + self.val_ratio >= 1.0:
            raise ValueError("train_ratio + val_ratio must leave room for a test split")
        return self

    def resolve_paths(self, data_dir: str) -> "tuple[Path, Path]":
        base = Path(data_dir)
        content = Path(self.content_path) if self.content_path else base / f"{self.id}.content"
        cites = Path(self.cites_path) if self.cites_path else base / f"{self.id}.cites"
        return content, cites


class ModelSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden_size: int = Field(default=32, ge=2)
    heads: int = Field(default=2, ge=1)
    depth: int = Field(default=2, ge=0)
    intermediate_size: int = Field(default=32, ge=1)
    hidden_dropout: float = Field(default=0.5, ge=0.0, lt=1.0)
    attention_dropout: float = Field(default=0.3, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    residual: Literal["graph_raw", "none"] = "graph_raw"
    head_depth: int = Field(default=1, ge=1)
    mask_padding: bool = False
    position_base: float = Field(default=10000.0, gt=1.0)
    # filas por trozo en el forward/backward de batch completo
    chunk_size: int = Field(default=1024, ge=1)

    @model_validator(mode="after")
    def _check_heads(self) -> "ModelSettings":
        if self.hidden_size % 2:
            raise ValueError(f"hidden_size must be even for position embeddings, got {self.hidden_size}")
        if self.hidden_size % self.heads:
            raise ValueError(f"hidden_size {self.hidden_size} not divisible by heads {self.heads}")
        return self


class PreprocessSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alpha: float = Field(default=0.15, gt=0.0, lt=1.0)
    wl_iterations: int = Field(default=2, ge=1)
    hop_cap: int = Field(default=20, ge=1)
    intimacy_method: Literal["auto", "dense", "power"] = "auto"
    dense_limit: int = Field(default=5000, ge=1)
    power_tol: float = Field(default=1e-10, gt=0.0)
    block_size: int = Field(default=512, ge=1)


class ScheduleSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    rounds: int = Field(default=3, ge=1)
    task_order: List[TaskName] = Field(default_factory=lambda: ["reconstruct", "structure", "classify"])
    early_stop_shift: Optional[float] = Field(default=0.01, ge=0.0)
    finetune_tasks: List[TaskName] = Field(default_factory=lambda: ["classify"])
    finetune_epochs: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _non_empty(self) -> "ScheduleSettings":
        if not self.task_order:
            raise ValueError("task_order must list at least one task")
        return self


class ReasoningSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    strategy: StrategyName = "cdr"
    epochs: int = Field(default=200, ge=0)
    lr: float = Field(default=0.01, ge=0.0)
    routing_iterations: int = Field(default=3, ge=1)
    finetune_tasks: List[TaskName] = Field(default_factory=lambda: ["reconstruct", "structure"])
    finetune_epochs: Optional[int] = Field(default=None, ge=0)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: ModeName = "isolated"
    graphs: List[GraphSettings]
    sources: List[str] = Field(default_factory=list)
    target: Optional[str] = None
    universal_k: Optional[int] = Field(default=None, ge=1)
    ratio: float = Field(default=1.0, gt=0.0, le=1.0)
    pretrain: bool = True
    seed: int = 0
    data_dir: str = Field(default_factory=lambda: os.getenv("G5_DATA_DIR", "data"))
    cache_dir: str = ".cache/g5"
    out_dir: str = "runs"
    checkpoint: Optional[str] = None
    model: ModelSettings = Field(default_factory=ModelSettings)
    preprocess: PreprocessSettings = Field(default_factory=PreprocessSettings)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    reasoning: ReasoningSettings = Field(default_factory=ReasoningSettings)

    @model_validator(mode="after")
    def _check_roles(self) -> "RunConfig":
        ids = [g.id for g in self.graphs]
        if not ids:
            raise ValueError("at least one graph is required")
        if len(set(ids)) != len(ids):
            raise ValueError(f"graph ids must be unique, got {ids}")
        unknown = [g for g in [*self.sources, *([self.target] if self.target else [])] if g not in ids]
        if unknown:
            raise ValueError(f"unknown graph ids referenced: {unknown}")
        if self.mode == "isolated":
            if self.target is None and len(ids) != 1:
                raise ValueError("isolated mode needs `target` when several graphs are listed")
        elif self.mode == "mixed":
            if not self.sources:
                raise ValueError("mixed mode needs at least one source graph")
        elif self.mode == "transfer":
            if self.target is None:
                raise ValueError("transfer mode needs a target graph")
        elif self.mode == "apocalypse":
            if self.target is None or not self.sources:
                raise ValueError("apocalypse mode needs sources and a target")
            if self.target in self.sources:
                raise ValueError("apocalypse target cannot also be a source")
        return self

    # -- helpers ---------------------------------------------------------------
    def graph(self, graph_id: str) -> GraphSettings:
        for g in self.graphs:
            if g.id == graph_id:
                return g
        raise ConfigError(f"graph '{graph_id}' is not configured")

    def target_id(self) -> str:
        return self.target or self.graphs[0].id

    def source_ids(self) -> List[str]:
        if self.mode == "isolated":
            return [self.target_id()]
        return list(self.sources)

    def involved_ids(self) -> List[str]:
        ordered: List[str] = []
        for gid in [*self.source_ids(), *([self.target] if self.target else [])]:
            if gid not in ordered:
                ordered.append(gid)
        return ordered

    def resolved_universal_k(self) -> int:
        if self.universal_k is not None:
            return self.universal_k
        if self.mode == "isolated":
            return int(self.graph(self.target_id()).k)
        if self.mode == "transfer" and not self.pretrain:
            return int(self.graph(self.target_id()).k)
        return DEFAULT_UNIVERSAL_K

    def with_overrides(self, **updates: Any) -> "RunConfig":
        """Re-validate after applying CLI overrides (None values are ignored)."""
        merged = self.model_dump()
        for key, value in updates.items():
            if value is None:
                continue
            if "." in key:
                section, field_name = key.split(".", 1)
                merged[section][field_name] = value
            else:
                merged[key] = value
        return type(self).model_validate(merged)

    @classmethod
    def load(cls, path: Optional[str] = None) -> "RunConfig":
        path = path or os.getenv("G5_CONFIG_PATH") or _resolve_default_config_path()
        if not path:
            raise ConfigError("no run config found (set --config or G5_CONFIG_PATH)")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config root in {path} must be a mapping")

        # Las variables de entorno tienen prioridad sobre el archivo
        env_map = {
            "cache_dir": "G5_CACHE_DIR",
            "seed": "G5_SEED",
            "out_dir": "G5_OUT_DIR",
            "data_dir": "G5_DATA_DIR",
        }
        for key, env_name in env_map.items():
            raw = os.getenv(env_name)
            if raw:
                data[key] = int(raw) if key == "seed" else raw
        return cls.model_validate(data)


def _resolve_default_config_path() -> Optional[str]:
    """Infer a config file path when G5_CONFIG_PATH is unset."""
    repo_root = Path(__file__).resolve().parent.parent
    config_dir = repo_root / "config"
    env_key = os.getenv("G5_CONFIG_ENV", "").strip().lower()
    candidates = []
    if env_key:
        candidates.append(config_dir / f"g5.{env_key}.yaml")
    candidates.append(config_dir / "g5.default.yaml")
    for candidate in candidates:
        if candidate.is_file():
            return str(candidate)
    return None
