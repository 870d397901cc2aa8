"""
Frozen ViT-style backbone with class prompts prepended at the input layer.

Sequence layout: [class token] + prompt tokens + patch tokens. Positional embeddings
are added to the class token and the patches only, so the class-token readout does not
depend on the order of prompt blocks. LoRA adapters sit on the query and value
projections of every block; together with the head they are the only trainable
backbone-side parameters.
"""

import logging
from contextlib import contextmanager
from typing import List, Optional, Sequence

import torch
import torch.nn as nn
from einops import rearrange

from config.model_config import EncoderConfig
from modules import numerics
from modules.numerics import ShapeError

logger = logging.getLogger(__name__)


def _trunc_normal(shape, std: float) -> nn.Parameter:
    tensor = torch.empty(*shape)
    nn.init.trunc_normal_(tensor, mean=0.0, std=std, a=-2 * std, b=2 * std)
    return nn.Parameter(tensor)


class LoraAdapter(nn.Module):
    """Low-rank delta (scale/r) * A @ B on top of a frozen d x d projection"""

    def __init__(self, dim: int, rank: int, scale: float, init_std: float = 0.02):
        super().__init__()
        self.rank = rank
        self.scale = scale / rank
        self.A = _trunc_normal((dim, rank), init_std)
        self.B = nn.Parameter(torch.zeros(rank, dim))
        self.enabled = True

    def delta(self, x: torch.Tensor) -> torch.Tensor:
        return self.scale * numerics.matmul(numerics.matmul(x, self.A), self.B)

    def delta_weight(self) -> torch.Tensor:
        return self.scale * (self.A @ self.B)


def lora_apply(x: torch.Tensor, weight: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """x @ W + (s/r) * (x @ A) @ B, or x @ W alone when the adapter is stripped"""
    out = numerics.matmul(x, weight)
    if adapter.enabled:
        out = out + adapter.delta(x)
    return out


class Attention(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.embed_dim
        std = config.init_std
        self.heads = config.heads
        self.head_dim = d // config.heads
        self.norm_w = nn.Parameter(torch.ones(d))
        self.norm_b = nn.Parameter(torch.zeros(d))
        self.w_q = _trunc_normal((d, d), std)
        self.w_k = _trunc_normal((d, d), std)
        self.w_v = _trunc_normal((d, d), std)
        self.w_o = _trunc_normal((d, d), std)
        self.b_q = nn.Parameter(torch.zeros(d))
        self.b_k = nn.Parameter(torch.zeros(d))
        self.b_v = nn.Parameter(torch.zeros(d))
        self.b_o = nn.Parameter(torch.zeros(d))
        self.lora_q = LoraAdapter(d, config.lora_rank, config.lora_scale, std)
        self.lora_v = LoraAdapter(d, config.lora_rank, config.lora_scale, std)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
        h = numerics.layer_norm(x, self.norm_w, self.norm_b)
        q = numerics.add(lora_apply(h, self.w_q, self.lora_q), self.b_q)
        k = numerics.add(numerics.matmul(h, self.w_k), self.b_k)
        v = numerics.add(lora_apply(h, self.w_v, self.lora_v), self.b_v)
        q, k, v = (rearrange(t, "b n (h e) -> b h n e", h=self.heads) for t in (q, k, v))
        scores = numerics.matmul(q, k.transpose(-1, -2)) * self.head_dim ** -0.5
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = rearrange(numerics.matmul(attn, v), "b h n e -> b n (h e)")
        return numerics.add(numerics.matmul(out, self.w_o), self.b_o)


class MLP(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        d = config.embed_dim
        hidden = int(round(d * config.mlp_ratio))
        self.norm_w = nn.Parameter(torch.ones(d))
        self.norm_b = nn.Parameter(torch.zeros(d))
        self.w_1 = _trunc_normal((d, hidden), config.init_std)
        self.b_1 = nn.Parameter(torch.zeros(hidden))
        self.w_2 = _trunc_normal((hidden, d), config.init_std)
        self.b_2 = nn.Parameter(torch.zeros(d))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = numerics.layer_norm(x, self.norm_w, self.norm_b)
        h = numerics.gelu(numerics.add(numerics.matmul(h, self.w_1), self.b_1))
        return numerics.add(numerics.matmul(h, self.w_2), self.b_2)


class Block(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.attn = Attention(config)
        self.mlp = MLP(config)

    def forward(self, x: torch.Tensor, key_mask: Optional[torch.Tensor]) -> torch.Tensor:
        x = x + self.attn(x, key_mask)
        return x + self.mlp(x)


class PromptedViT(nn.Module):
    """Backbone f_theta(x, prompts) returning K-way logits from the class-token output"""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_w = _trunc_normal((config.patch_dim, d), config.init_std)
        self.patch_b = nn.Parameter(torch.zeros(d))
        self.cls_token = _trunc_normal((1, 1, d), config.init_std)
        self.pos_embed = _trunc_normal((1, 1 + config.num_patches, d), config.init_std)
        self.blocks = nn.ModuleList([Block(config) for _ in range(config.depth)])
        self.norm_w = nn.Parameter(torch.ones(d))
        self.norm_b = nn.Parameter(torch.zeros(d))
        self.head = nn.Linear(d, config.num_classes)
        nn.init.trunc_normal_(self.head.weight, std=config.init_std,
                              a=-2 * config.init_std, b=2 * config.init_std)
        nn.init.zeros_(self.head.bias)
        self._freeze_backbone()

    def _freeze_backbone(self):
        for name, param in self.named_parameters():
            trainable = name.startswith("head.") or ".lora_" in name
            param.requires_grad_(trainable)

    def lora_adapters(self) -> List[LoraAdapter]:
        return [m for m in self.modules() if isinstance(m, LoraAdapter)]

    def _as_images(self, images: torch.Tensor) -> torch.Tensor:
        cfg = self.config
        images = torch.as_tensor(images)
        if images.dim() == 3:
            images = images.unsqueeze(0)
        expected = (cfg.image_size, cfg.image_size, cfg.channels)
        if images.dim() != 4 or tuple(images.shape[1:]) != expected:
            raise ShapeError(f"images must be (B, {expected[0]}, {expected[1]}, {expected[2]}), "
                             f"got {tuple(images.shape)}")
        return images.to(self.patch_w.dtype)

    def patch_embed(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, C) -> (B, N_patches, d) with positional embeddings added"""
        images = self._as_images(images)
        p = self.config.patch_size
        patches = rearrange(images, "b (h p1) (w p2) c -> b (h w) (p1 p2 c)", p1=p, p2=p)
        tokens = numerics.add(numerics.matmul(patches, self.patch_w), self.patch_b)
        return tokens + self.pos_embed[:, 1:, :]

    def assemble_tokens(self, images: torch.Tensor, prompt_tokens: Optional[torch.Tensor] = None,
                        prompt_mask: Optional[torch.Tensor] = None):
        """Build the input sequence and its key mask; prompt_tokens is (B, L, d) or None"""
        patches = self.patch_embed(images)
        batch = patches.shape[0]
        cls = (self.cls_token + self.pos_embed[:, :1, :]).expand(batch, -1, -1)
        if prompt_tokens is None or prompt_tokens.shape[-2] == 0:
            return numerics.concat_sequence([cls, patches]), None
        if prompt_tokens.dim() == 2:
            prompt_tokens = prompt_tokens.unsqueeze(0).expand(batch, -1, -1)
        if prompt_tokens.shape[0] != batch or prompt_tokens.shape[-1] != self.config.embed_dim:
            raise ShapeError(f"prompt tokens {tuple(prompt_tokens.shape)} do not match "
                             f"batch {batch} and embed_dim {self.config.embed_dim}")
        tokens = numerics.concat_sequence([cls, prompt_tokens.to(patches.dtype), patches])
        if prompt_mask is None:
            return tokens, None
        ones = torch.ones(batch, 1, dtype=torch.bool)
        rest = torch.ones(batch, patches.shape[1], dtype=torch.bool)
        return tokens, torch.cat([ones, prompt_mask.to(torch.bool), rest], dim=1)

    def forward(self, images: torch.Tensor, prompt_tokens: Optional[torch.Tensor] = None,
                prompt_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x, key_mask = self.assemble_tokens(images, prompt_tokens, prompt_mask)
        for block in self.blocks:
            x = block(x, key_mask)
        cls_out = numerics.layer_norm(x[:, 0], self.norm_w, self.norm_b)
        return self.head(cls_out)

    def forward_blocks(self, image: torch.Tensor, prompt_blocks: Sequence[torch.Tensor]) -> torch.Tensor:
        """Single image with an explicit list of (M, d) prompt blocks -> logits of length K"""
        m, d = self.config.prompt_tokens_per_class, self.config.embed_dim
        for block in prompt_blocks:
            if tuple(block.shape) != (m, d):
                raise ShapeError(f"prompt block has shape {tuple(block.shape)}, expected ({m}, {d})")
        tokens = numerics.concat_sequence(list(prompt_blocks)) if prompt_blocks else None
        return self.forward(image, tokens)[0]


def strip_lora(encoder: PromptedViT) -> PromptedViT:
    """Disable every LoRA delta without touching the stored factors"""
    for adapter in encoder.lora_adapters():
        adapter.enabled = False
    logger.info("LoRA adapters stripped")
    return encoder


def restore_lora(encoder: PromptedViT) -> PromptedViT:
    for adapter in encoder.lora_adapters():
        adapter.enabled = True
    return encoder


@contextmanager
def lora_stripped(encoder: PromptedViT):
    previous = [a.enabled for a in encoder.lora_adapters()]
    strip_lora(encoder)
    try:
        yield encoder
    finally:
        for adapter, enabled in zip(encoder.lora_adapters(), previous):
            adapter.enabled = enabled
