"""
Class prompt pool: one learnable block of tokens per class and the activity mask that
gates which blocks reach the encoder. Unlearning flips mask bits and never edits a
parameter, except `purge_prompt`, which zeroes the block for good.
"""

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from typing import FrozenSet, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

logger = logging.getLogger(__name__)


class PromptPoolError(RuntimeError):
    """Invalid prompt pool request (inactive target, oversized draw, purged restore)"""


@dataclass(frozen=True)
class ForgetScenario:
    """Partition of the label space into forgotten and retained classes"""
    forget_set: FrozenSet[int]
    retain_set: FrozenSet[int]

    @classmethod
    def from_forget(cls, num_classes: int, forget: Iterable[int]) -> "ForgetScenario":
        forget_set = frozenset(int(c) for c in forget)
        unknown = [c for c in forget_set if not 0 <= c < num_classes]
        if unknown:
            raise ValueError(f"Unknown classes {sorted(unknown)} for K={num_classes}")
        return cls(forget_set, frozenset(range(num_classes)) - forget_set)

    def describe(self) -> str:
        return "-".join(str(c) for c in sorted(self.forget_set)) or "none"


class PromptPool(nn.Module):
    """
    K class prompts of M tokens each, plus the activity mask that gates them.

    All sampling randomness (distractor subsets and permutations) comes from one
    Philox counter-based generator owned by the pool.
    """

    def __init__(self, num_classes: int, tokens_per_class: int, embed_dim: int,
                 init_std: float = 0.02, rng_seed: int = 0):
        super().__init__()
        self.num_classes = num_classes
        self.tokens_per_class = tokens_per_class
        self.embed_dim = embed_dim
        prompts = torch.empty(num_classes, tokens_per_class, embed_dim)
        nn.init.trunc_normal_(prompts, mean=0.0, std=init_std, a=-2 * init_std, b=2 * init_std)
        self.prompts = nn.Parameter(prompts)
        self.active = [True] * num_classes
        self.purged = set()
        self.reseed(rng_seed)

    def reseed(self, seed: int):
        """Restart the sampler stream from `seed`"""
        self.rng_seed = int(seed)
        self.rng = np.random.Generator(np.random.Philox(self.rng_seed))

    # -- queries -------------------------------------------------------------

    def active_classes(self) -> List[int]:
        """Active class ids in ascending order"""
        return [c for c in range(self.num_classes) if self.active[c]]

    @property
    def active_count(self) -> int:
        return sum(self.active)

    def mask(self) -> List[bool]:
        """Copy of the activity mask"""
        return list(self.active)

    def load_mask(self, mask: Sequence[bool]):
        """Replace the activity mask; purged classes must stay inactive"""
        if len(mask) != self.num_classes:
            raise PromptPoolError(f"mask has {len(mask)} entries, expected {self.num_classes}")
        for c in self.purged:
            if mask[c]:
                raise PromptPoolError(f"class {c} was purged and cannot be active")
        self.active = [bool(v) for v in mask]

    def _check_class(self, c: int):
        if not 0 <= c < self.num_classes:
            raise PromptPoolError(f"class {c} outside [0, {self.num_classes})")

    # -- sampling ------------------------------------------------------------

    def sample_distractors(self, target: int, m: int, rng: Optional[np.random.Generator] = None) -> List[int]:
        """Uniform m-subset of the active classes other than target (class ids)"""
        self._check_class(target)
        if not self.active[target]:
            raise PromptPoolError(f"target class {target} is not active")
        candidates = [c for c in self.active_classes() if c != target]
        if not 0 <= m <= len(candidates):
            raise PromptPoolError(
                f"cannot draw {m} distractors from {len(candidates)} active non-target prompts")
        rng = rng if rng is not None else self.rng
        picked = rng.choice(len(candidates), size=m, replace=False)
        return [candidates[i] for i in picked]

    def assemble_shuffled(self, ids: Sequence[int], rng: Optional[np.random.Generator] = None) -> List[int]:
        """Uniform random ordering of the given prompt ids"""
        if len(ids) == 0:
            raise PromptPoolError("cannot shuffle an empty prompt set")
        rng = rng if rng is not None else self.rng
        return [ids[i] for i in rng.permutation(len(ids))]

    def draw_m(self, target: int, distribution: str, rng: Optional[np.random.Generator] = None) -> int:
        """Distractor count m ~ p(m) with support [1, active - 1]"""
        upper = self.active_count - 1
        if upper < 1:
            raise PromptPoolError("need at least two active classes to draw distractors")
        if distribution == "all":
            return upper
        rng = rng if rng is not None else self.rng
        return int(rng.integers(1, upper + 1))

    # -- token assembly --------------------------------------------------------

    def blocks(self, ids: Sequence[int]) -> List[torch.Tensor]:
        """Prompt blocks for active ids, in the given order"""
        for c in ids:
            if not self.active[c]:
                raise PromptPoolError(f"prompt {c} is inactive and cannot be assembled")
        return [self.prompts[c] for c in ids]

    def tokens(self, ids: Sequence[int]) -> torch.Tensor:
        """(len(ids) * M, d) token sequence for an ordered list of prompt ids"""
        if len(ids) == 0:
            return self.prompts.new_zeros(0, self.embed_dim)
        return torch.cat(self.blocks(ids), dim=0)

    def batch_tokens(self, id_lists: Sequence[Sequence[int]]):
        """Pad per-sample prompt sequences to a common length; returns (tokens, mask)"""
        sequences = [self.tokens(ids) for ids in id_lists]
        longest = max(s.shape[0] for s in sequences)
        padded = [F.pad(s, (0, 0, 0, longest - s.shape[0])) for s in sequences]
        mask = torch.zeros(len(sequences), longest, dtype=torch.bool)
        for i, s in enumerate(sequences):
            mask[i, :s.shape[0]] = True
        return torch.stack(padded), mask

    def inference_tokens(self) -> torch.Tensor:
        """Tokens of every active prompt in canonical class order"""
        return self.tokens(self.active_classes())

    # -- unlearning --------------------------------------------------------------

    def remove_prompt(self, c: int) -> bool:
        """Deactivate class c; touches only the activity mask"""
        self._check_class(c)
        if not self.active[c]:
            logger.warning(f"Prompt {c} is already inactive, nothing to remove")
            return False
        self.active[c] = False
        logger.info(f"Removed prompt {c} ({self.active_count} active)")
        return True

    def restore_prompt(self, c: int) -> bool:
        """Reactivate class c; purged prompts cannot come back"""
        self._check_class(c)
        if c in self.purged:
            raise PromptPoolError(f"prompt {c} was purged and cannot be restored")
        if self.active[c]:
            logger.warning(f"Prompt {c} is already active, nothing to restore")
            return False
        self.active[c] = True
        logger.info(f"Restored prompt {c} ({self.active_count} active)")
        return True

    def purge_prompt(self, c: int):
        """Deactivate and zero the block permanently"""
        self._check_class(c)
        self.active[c] = False
        self.purged.add(c)
        with torch.no_grad():
            self.prompts[c].zero_()
        logger.info(f"Purged prompt {c}")

    def restore_all(self):
        """Reactivate every prompt that was not purged"""
        for c in range(self.num_classes):
            if c not in self.purged:
                self.active[c] = True

    @contextmanager
    def scenario(self, forget: Iterable[int]):
        """Activate every non-purged prompt, remove `forget`, restore the previous mask on exit"""
        saved = self.mask()
        try:
            self.restore_all()
            for c in forget:
                if self.active[c]:
                    self.active[c] = False
            yield self
        finally:
            self.active = saved
