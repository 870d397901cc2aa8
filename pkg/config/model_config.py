from dataclasses import dataclass, field, asdict
from typing import Dict
import logging

logger = logging.getLogger(__name__)

M_DISTRIBUTIONS = ("uniform", "all")


class ConfigError(ValueError):
    """Raised when a configuration value violates its invariants"""


@dataclass
class EncoderConfig:
    """Shape of the frozen backbone, its prompts and its LoRA adapters"""
    image_size: int = 32
    channels: int = 1
    patch_size: int = 4
    embed_dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 6
    prompt_tokens_per_class: int = 2
    lora_rank: int = 4
    lora_scale: float = 4.0
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("image_size", "channels", "patch_size", "embed_dim", "depth",
                     "heads", "num_classes", "prompt_tokens_per_class", "lora_rank"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.lora_rank > self.embed_dim:
            raise ConfigError(f"lora_rank {self.lora_rank} exceeds embed_dim {self.embed_dim}")
        if self.lora_scale <= 0 or self.mlp_ratio <= 0 or self.init_std <= 0:
            raise ConfigError("lora_scale, mlp_ratio and init_std must be positive")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def sequence_length(self, num_prompt_blocks: int) -> int:
        """Token count seen by the transformer: class token, prompt tokens, patches"""
        return 1 + num_prompt_blocks * self.prompt_tokens_per_class + self.num_patches

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class AblationSwitches:
    use_kl: bool = True
    use_shuffle: bool = True
    use_sampling: bool = True

    PRESETS = ("kl_only", "shuffle", "full")

    @classmethod
    def preset(cls, name: str) -> "AblationSwitches":
        """Ablation rows: KL only, KL + permutation, KL + permutation + sampling"""
        if name == "kl_only":
            return cls(use_kl=True, use_shuffle=False, use_sampling=False)
        if name == "shuffle":
            return cls(use_kl=True, use_shuffle=True, use_sampling=False)
        if name == "full":
            return cls(use_kl=True, use_shuffle=True, use_sampling=True)
        raise ConfigError(f"Unknown ablation preset '{name}', expected one of {cls.PRESETS}")


@dataclass
class TrainConfig:
    lam: float = 1.0
    m_distribution: str = "uniform"
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    ablation: AblationSwitches = field(default_factory=AblationSwitches)
    full_knowledge: bool = False
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    progress: bool = False

    def __post_init__(self):
        if isinstance(self.ablation, dict):
            self.ablation = AblationSwitches(**self.ablation)
        self.betas = tuple(self.betas)
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if self.m_distribution not in M_DISTRIBUTIONS:
            raise ConfigError(
                f"Unknown m_distribution '{self.m_distribution}', expected one of {M_DISTRIBUTIONS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.full_knowledge and self.ablation.use_kl:
            logger.info("Full Knowledge baseline requested, disabling the unlearning term")
            self.ablation = AblationSwitches(
                use_kl=False,
                use_shuffle=self.ablation.use_shuffle,
                use_sampling=self.ablation.use_sampling,
            )

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data
