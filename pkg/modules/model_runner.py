import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn

from config.model_config import EncoderConfig
from modules import numerics
from modules.encoder import PromptedViT
from modules.prompt_pool import PromptPool

logger = logging.getLogger(__name__)


@dataclass
class Predictions:
    logits: np.ndarray
    labels: np.ndarray

    @property
    def confidence(self) -> np.ndarray:
        """Max softmax probability per sample"""
        shifted = self.logits - self.logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        return probs.max(axis=1)


class PreForgettableModel(nn.Module):
    """Frozen encoder gated by the class prompt pool"""

    def __init__(self, config: EncoderConfig, sampler_seed: int = 0):
        super().__init__()
        self.config = config
        self.encoder = PromptedViT(config)
        self.pool = PromptPool(config.num_classes, config.prompt_tokens_per_class,
                               config.embed_dim, config.init_std, sampler_seed)

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, images: torch.Tensor, prompt_tokens: Optional[torch.Tensor] = None,
                prompt_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.encoder(images, prompt_tokens, prompt_mask)

    @torch.no_grad()
    def logits(self, images, batch_size: int = 256, renormalize: bool = False) -> np.ndarray:
        """Inference with every active prompt in canonical class order"""
        tokens = self.pool.inference_tokens()
        chunks = []
        images = torch.as_tensor(np.asarray(images))
        for start in range(0, images.shape[0], batch_size):
            batch = images[start:start + batch_size]
            chunks.append(self.encoder(batch, tokens if tokens.shape[0] else None))
        out = torch.cat(chunks).double().numpy() if chunks else np.zeros((0, self.config.num_classes))
        if renormalize:
            inactive = [c for c in range(self.config.num_classes) if not self.pool.active[c]]
            if len(inactive) < self.config.num_classes:
                out[:, inactive] = -np.inf
        return out

    def predict(self, images, batch_size: int = 256, renormalize: bool = False) -> Predictions:
        """Argmax over the K-way head; ties resolve to the lowest class index"""
        logits = self.logits(images, batch_size, renormalize)
        return Predictions(logits=logits, labels=np.argmax(logits, axis=1))

    def kl_to_uniform(self, images, batch_size: int = 256) -> np.ndarray:
        logits = torch.as_tensor(self.logits(images, batch_size))
        return numerics.kl_to_uniform(logits, reduction="none").numpy()

    def get_model_info(self) -> Dict:
        return {
            "num_classes": self.config.num_classes,
            "active": self.pool.mask(),
            "purged": sorted(self.pool.purged),
            "trainable_parameters": sum(p.numel() for p in self.trainable_parameters()),
            "frozen_parameters": sum(p.numel() for p in self.parameters() if not p.requires_grad),
            "lora_enabled": all(a.enabled for a in self.encoder.lora_adapters()),
        }


def build_model(config: EncoderConfig, init_seed: int = 0, sampler_seed: int = 0) -> PreForgettableModel:
    """Construct a model whose initial weights depend only on init_seed"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(init_seed)
        model = PreForgettableModel(config, sampler_seed)
    info = model.get_model_info()
    logger.info(f"Built model: K={config.num_classes}, d={config.embed_dim}, depth={config.depth}, "
                f"{info['trainable_parameters']} trainable / {info['frozen_parameters']} frozen parameters")
    return model
