"""
Confidence-threshold membership inference.

The attacker labels a sample "member" when the model's maximum softmax
probability reaches a threshold, choosing the threshold that maximizes balanced
accuracy on data whose membership it knows. Reported advantage is
max(0, 2 * (balanced_accuracy - 0.5)) * 100.
"""

import logging
import os
from dataclasses import dataclass, asdict
from typing import Dict, Iterable

import numpy as np
import pandas as pd
from sklearn.metrics import balanced_accuracy_score, roc_curve

from modules.dataset import Dataset
from modules.model_runner import PreForgettableModel
from modules.numerics import derive_seed

logger = logging.getLogger(__name__)


class MembershipAttackError(ValueError):
    pass


@dataclass
class MiaReport:
    attack_advantage: float
    balanced_accuracy: float
    threshold: float
    member_mean_confidence: float
    member_std_confidence: float
    nonmember_mean_confidence: float
    nonmember_std_confidence: float
    n_members: int
    n_nonmembers: int

    def as_dict(self) -> Dict:
        return asdict(self)


def _best_threshold(scores: np.ndarray, membership: np.ndarray) -> float:
    fpr, tpr, thresholds = roc_curve(membership, scores)
    best = int(np.argmax(tpr - fpr))
    return float(thresholds[best])


def threshold_attack(member_scores, nonmember_scores, holdout_fraction: float = 0.0,
                     seed: int = 0) -> MiaReport:
    """Fit the confidence threshold and score the attack; holdout_fraction > 0 scores on unseen data"""
    members = np.asarray(member_scores, dtype=np.float64)
    nonmembers = np.asarray(nonmember_scores, dtype=np.float64)
    if members.size == 0 or nonmembers.size == 0:
        raise MembershipAttackError("member and nonmember sets must both be nonempty")
    scores = np.concatenate([members, nonmembers])
    membership = np.concatenate([np.ones(members.size, dtype=int), np.zeros(nonmembers.size, dtype=int)])

    fit_idx = eval_idx = np.arange(scores.size)
    if holdout_fraction > 0:
        order = np.random.default_rng(derive_seed(seed, "mia")).permutation(scores.size)
        n_eval = max(1, int(round(holdout_fraction * scores.size)))
        eval_idx, fit_idx = order[:n_eval], order[n_eval:]

    if len(np.unique(membership[fit_idx])) < 2:
        threshold = float(np.inf)
    else:
        threshold = _best_threshold(scores[fit_idx], membership[fit_idx])
    guesses = (scores[eval_idx] >= threshold).astype(int)
    if len(np.unique(membership[eval_idx])) < 2:
        balanced = float((guesses == membership[eval_idx]).mean())
    else:
        balanced = float(balanced_accuracy_score(membership[eval_idx], guesses))
    advantage = max(0.0, 2.0 * (balanced - 0.5)) * 100.0
    return MiaReport(
        attack_advantage=advantage,
        balanced_accuracy=balanced,
        threshold=threshold,
        member_mean_confidence=float(members.mean()),
        member_std_confidence=float(members.std()),
        nonmember_mean_confidence=float(nonmembers.mean()),
        nonmember_std_confidence=float(nonmembers.std()),
        n_members=int(members.size),
        n_nonmembers=int(nonmembers.size),
    )


def mia_attack(model: PreForgettableModel, members: Dataset, nonmembers: Dataset,
               target_classes: Iterable[int], holdout_fraction: float = 0.0, seed: int = 0,
               remove_prompts: bool = True) -> MiaReport:
    """Attack the target classes, by default with their prompts removed; the pool mask is restored afterwards"""
    targets = sorted({int(c) for c in target_classes})
    members = members.of_classes(targets)
    nonmembers = nonmembers.of_classes(targets)
    if len(members) == 0 or len(nonmembers) == 0:
        raise MembershipAttackError(f"no member or nonmember samples for classes {targets}")
    with model.pool.scenario(targets if remove_prompts else ()):
        member_scores = model.predict(members.images).confidence
        nonmember_scores = model.predict(nonmembers.images).confidence
    report = threshold_attack(member_scores, nonmember_scores, holdout_fraction, seed)
    logger.info(f"MIA on classes {targets}: advantage {report.attack_advantage:.2f} "
                f"(balanced accuracy {report.balanced_accuracy:.4f})")
    return report


def write_mia_report(report: MiaReport, text_path: str, csv_path: str):
    os.makedirs(os.path.dirname(os.path.abspath(text_path)), exist_ok=True)
    row = report.as_dict()
    with open(text_path, "w") as f:
        for key, value in row.items():
            f.write(f"{key}={value}\n")
    pd.DataFrame([row]).to_csv(csv_path, index=False)
    logger.info(f"Wrote membership attack report to {text_path} and {csv_path}")
