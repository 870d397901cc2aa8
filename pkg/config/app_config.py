import json
import logging
import os
from dataclasses import dataclass, field, fields
from typing import Dict, Optional, Union

from dotenv import load_dotenv

from config.model_config import AblationSwitches, ConfigError, EncoderConfig, TrainConfig
from modules.dataset import SyntheticSpec
from modules.numerics import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class AppSettings:
    """Process-level settings taken from the environment (.env is honoured)"""
    threads: Optional[int] = None
    log_level: str = "INFO"
    output_dir: str = "runs"

    @classmethod
    def from_env(cls) -> "AppSettings":
        load_dotenv()
        threads = os.getenv("PFGT_THREADS")
        try:
            threads = int(threads) if threads else None
        except ValueError as e:
            raise ConfigError(f"PFGT_THREADS must be an integer, got '{threads}'") from e
        if threads is not None and threads < 1:
            raise ConfigError(f"PFGT_THREADS must be positive, got {threads}")
        return cls(
            threads=threads,
            log_level=os.getenv("PFGT_LOG_LEVEL", "INFO").upper(),
            output_dir=os.getenv("PFGT_OUTPUT_DIR", "runs"),
        )


_settings = None


def get_settings() -> AppSettings:
    """Get or create the global settings instance"""
    global _settings
    if _settings is None:
        _settings = AppSettings.from_env()
    return _settings


@dataclass
class IdxSource:
    train_images: str
    train_labels: str
    test_images: str
    test_labels: str


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: Union[SyntheticSpec, IdxSource] = field(default_factory=SyntheticSpec)
    output_dir: str = "runs/default"
    seed: int = 0

    def resolve_seeds(self) -> "RunConfig":
        """Derive the data and training seeds from the single top-level seed"""
        self.train.seed = self.seed
        if isinstance(self.data, SyntheticSpec):
            self.data.seed = derive_seed(self.seed, "data")
        return self

    def to_dict(self, include_output: bool = True) -> Dict:
        data = dict(vars(self.data))
        data["kind"] = "synthetic" if isinstance(self.data, SyntheticSpec) else "idx"
        out = {
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "data": data,
            "seed": self.seed,
        }
        if include_output:
            out["output_dir"] = self.output_dir
        return out

    @classmethod
    def from_dict(cls, raw: Dict) -> "RunConfig":
        unknown = set(raw) - {"encoder", "train", "data", "output_dir", "seed"}
        if unknown:
            raise ConfigError(f"Unknown run config keys: {sorted(unknown)}")
        try:
            encoder = EncoderConfig(**_known(EncoderConfig, raw.get("encoder", {}), "encoder"))
            train_raw = _known(TrainConfig, raw.get("train", {}), "train")
            if "ablation" in train_raw and isinstance(train_raw["ablation"], str):
                train_raw["ablation"] = AblationSwitches.preset(train_raw["ablation"])
            train = TrainConfig(**train_raw)
            data_raw = dict(raw.get("data", {}))
            kind = data_raw.pop("kind", "synthetic")
            if kind == "synthetic":
                data = SyntheticSpec(**_known(SyntheticSpec, data_raw, "data"))
            elif kind == "idx":
                data = IdxSource(**_known(IdxSource, data_raw, "data"))
            else:
                raise ConfigError(f"Unknown data kind '{kind}', expected 'synthetic' or 'idx'")
        except TypeError as e:
            raise ConfigError(f"Invalid run config: {e}") from e
        except ValueError as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
        return cls(encoder=encoder, train=train, data=data,
                   output_dir=raw.get("output_dir", "runs/default"), seed=int(raw.get("seed", 0)))


def _known(kind, values: Dict, section: str) -> Dict:
    allowed = {f.name for f in fields(kind)}
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"Unknown keys in '{section}': {sorted(unknown)}")
    return dict(values)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Unreadable config {path}: {e}")
        raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must contain a JSON object")
    return RunConfig.from_dict(raw)


def save_run_config(config: RunConfig, path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
    logger.info(f"Captured run config in {path}")
