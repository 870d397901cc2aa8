"""
Tensor kernels, losses and optimizer used by the encoder and the trainer.

Tensors are torch tensors and differentiation is torch autograd; this module adds
shape validation with readable diagnostics, the two training losses and the
frozen-aware Adam wrapper.
"""

import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)

_optimizer_steps = 0


class ShapeError(ValueError):
    """Operand shapes do not conform for a kernel"""


class NonFiniteError(ValueError):
    """A kernel received NaN or infinite input"""


def derive_seed(seed: int, stream: str) -> int:
    """Independent 63-bit seed for a named random stream of a run"""
    digest = hashlib.sha256(f"{int(seed)}:{stream}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def configure_threads(threads):
    if threads:
        torch.set_num_threads(int(threads))
        logger.info(f"Torch intra-op threads capped at {threads}")


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

def _require(condition: bool, message: str):
    if not condition:
        raise ShapeError(message)


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """(..., n, k) @ (k, m) or batched (..., n, k) @ (..., k, m)"""
    _require(a.dim() >= 1 and b.dim() >= 1, "matmul needs at least 1-D operands")
    inner_a = a.shape[-1]
    inner_b = b.shape[0] if b.dim() == 1 else b.shape[-2]
    _require(inner_a == inner_b,
             f"matmul inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.matmul(a, b)


def add(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Elementwise sum; b may be a trailing-dimension vector (bias)"""
    if a.shape != b.shape:
        _require(b.dim() == 1 and b.shape[0] == a.shape[-1],
                 f"add shapes differ: {tuple(a.shape)} + {tuple(b.shape)}")
    return a + b


def layer_norm(x: torch.Tensor, weight: torch.Tensor = None, bias: torch.Tensor = None,
               eps: float = 1e-6) -> torch.Tensor:
    """Normalize over the last axis to zero mean and unit variance, then apply affine terms"""
    dim = x.shape[-1]
    for name, param in (("weight", weight), ("bias", bias)):
        if param is not None:
            _require(tuple(param.shape) == (dim,),
                     f"layer_norm {name} has shape {tuple(param.shape)}, expected ({dim},)")
    return F.layer_norm(x, (dim,), weight, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def concat_sequence(parts: Sequence[torch.Tensor]) -> torch.Tensor:
    """Concatenate token blocks along the sequence axis (second to last)"""
    _require(len(parts) > 0, "concat_sequence needs at least one block")
    width = parts[0].shape[-1]
    lead = parts[0].shape[:-2]
    for part in parts:
        _require(part.dim() >= 2 and part.shape[-1] == width and part.shape[:-2] == lead,
                 f"concat_sequence block {tuple(part.shape)} does not match "
                 f"(..., n, {width}) with leading {tuple(lead)}")
    return torch.cat(list(parts), dim=-2)


# ---------------------------------------------------------------------------
# Probabilities and losses
# ---------------------------------------------------------------------------

def _check_finite(t: torch.Tensor, what: str):
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"{what} contains non-finite values")


def softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _require(-logits.dim() <= axis < max(logits.dim(), 1),
             f"softmax axis {axis} invalid for shape {tuple(logits.shape)}")
    _check_finite(logits, "softmax input")
    return torch.softmax(logits, dim=axis)


def log_softmax(logits: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _check_finite(logits, "log_softmax input")
    return torch.log_softmax(logits, dim=axis)


def _as_batch(logits: torch.Tensor) -> torch.Tensor:
    _require(logits.dim() in (1, 2), f"logits must be (K,) or (B, K), got {tuple(logits.shape)}")
    return logits.unsqueeze(0) if logits.dim() == 1 else logits


def cross_entropy(logits: torch.Tensor, label, reduction: str = "mean") -> torch.Tensor:
    """-log softmax(logits)[label]; batched inputs are reduced by mean unless reduction='none'"""
    batch = _as_batch(logits)
    num_classes = batch.shape[-1]
    labels = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    _require(labels.shape[0] == batch.shape[0],
             f"{labels.shape[0]} labels for {batch.shape[0]} logit rows")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): {labels.tolist()}")
    per_row = -log_softmax(batch).gather(1, labels.unsqueeze(1)).squeeze(1)
    return per_row if reduction == "none" else per_row.mean()


def kl_to_uniform(logits: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """KL(softmax(logits) || uniform over K) = sum_i p_i (log p_i + log K)"""
    batch = _as_batch(logits)
    num_classes = batch.shape[-1]
    _require(num_classes >= 2, "kl_to_uniform needs at least two classes")
    log_p = log_softmax(batch)
    per_row = (log_p.exp() * (log_p + math.log(num_classes))).sum(dim=-1)
    # clamp removes tiny negative rounding; gradient is unaffected away from zero
    per_row = per_row.clamp_min(0.0)
    return per_row if reduction == "none" else per_row.mean()


def backward(loss: torch.Tensor):
    """Accumulate d(loss)/d(tensor) into every upstream tensor that tracks gradients"""
    if loss.numel() != 1 or loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("backward called on a loss that does not track gradients")
    loss.backward()


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass
class NamedParameter:
    name: str
    tensor: torch.Tensor

    @property
    def frozen(self) -> bool:
        return not self.tensor.requires_grad


def collect_parameters(module: nn.Module) -> List[NamedParameter]:
    """Named view of every parameter of a model; names must be unique"""
    params = [NamedParameter(name, tensor) for name, tensor in module.named_parameters()]
    names = [p.name for p in params]
    if len(names) != len(set(names)):
        raise ValueError("Parameter names are not unique within the model")
    return params


def freeze(module: nn.Module):
    for param in module.parameters():
        param.requires_grad_(False)
        param.grad = None


def frozen_snapshot(module: nn.Module) -> dict:
    return {p.name: p.tensor.detach().clone() for p in collect_parameters(module) if p.frozen}


def optimizer_step_count() -> int:
    """Optimizer steps taken by this process; unlearning must never move it"""
    return _optimizer_steps


class AdamOptimizer:
    """Adam over the non-frozen parameters only; frozen tensors are never handed to torch"""

    def __init__(self, parameters: Iterable[torch.Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in parameters if p.requires_grad]
        if not self.params:
            raise ValueError("No trainable parameters to optimize")
        self.optimizer = torch.optim.Adam(self.params, lr=lr, betas=tuple(betas), eps=eps,
                                          weight_decay=0.0)
        self.steps = 0

    def zero_grad(self):
        self.optimizer.zero_grad(set_to_none=False)

    def step(self):
        global _optimizer_steps
        self.optimizer.step()
        self.steps += 1
        _optimizer_steps += 1
