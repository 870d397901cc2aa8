"""
Evaluation harness for the pre-forgettable classifier.

Accuracies are class-averaged percentages. Every routine that changes the prompt
mask restores it before returning; none of them updates a parameter.
"""

import itertools
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from modules.dataset import Dataset
from modules.encoder import lora_stripped
from modules.model_runner import PreForgettableModel
from modules.numerics import derive_seed
from modules.prompt_pool import ForgetScenario

logger = logging.getLogger(__name__)

MAX_COMBINATIONS = 64
RETAINED_GROUP = "retained"


class EvaluationError(ValueError):
    """Evaluation request cannot be satisfied"""


def class_averaged_accuracy(predicted: np.ndarray, labels: np.ndarray, classes: Iterable[int]) -> float:
    """Mean over classes of per-class accuracy, as a percentage"""
    per_class = []
    for c in sorted(classes):
        mask = labels == c
        if mask.any():
            per_class.append(float((predicted[mask] == c).mean()))
    if not per_class:
        raise EvaluationError(f"no test samples for classes {sorted(classes)}")
    return 100.0 * float(np.mean(per_class))


def retain_accuracy(model: PreForgettableModel, dataset: Dataset, scenario: ForgetScenario,
                    renormalize: bool = False) -> float:
    """Class-averaged accuracy on the retained classes under the current mask"""
    if not scenario.retain_set:
        raise EvaluationError("retain set is empty")
    subset = dataset.of_classes(scenario.retain_set)
    if len(subset) == 0:
        raise EvaluationError(f"no test samples for retained classes {sorted(scenario.retain_set)}")
    predicted = model.predict(subset.images, renormalize=renormalize).labels
    return class_averaged_accuracy(predicted, subset.labels, scenario.retain_set)


def forget_accuracy(model: PreForgettableModel, dataset: Dataset, scenario: ForgetScenario,
                    renormalize: bool = False) -> float:
    """Class-averaged accuracy on the forgotten classes; near chance once their prompts are gone"""
    if not scenario.forget_set:
        raise EvaluationError("forget set is empty")
    subset = dataset.of_classes(scenario.forget_set)
    if len(subset) == 0:
        raise EvaluationError(f"no test samples for forgotten classes {sorted(scenario.forget_set)}")
    predicted = model.predict(subset.images, renormalize=renormalize).labels
    return class_averaged_accuracy(predicted, subset.labels, scenario.forget_set)


def overall_accuracy(model: PreForgettableModel, dataset: Dataset) -> float:
    """Plain sample accuracy over the whole dataset"""
    predicted = model.predict(dataset.images).labels
    return 100.0 * float((predicted == dataset.labels).mean())


def abstention_stats(model: PreForgettableModel, dataset: Dataset) -> Dict[str, float]:
    """How close the outputs on a subset are to 'no idea': KL to uniform and top confidence"""
    kl = model.kl_to_uniform(dataset.images)
    confidence = model.predict(dataset.images).confidence
    return {"mean_kl_to_uniform": float(kl.mean()), "mean_max_confidence": float(confidence.mean())}


# ---------------------------------------------------------------------------
# Scenario sweep
# ---------------------------------------------------------------------------

@dataclass
class CombinationResult:
    forget_set: tuple
    acc_r: float
    acc_f: float
    acc_f_intact: float


@dataclass
class EvalReport:
    f: int
    rows: List[CombinationResult] = field(default_factory=list)

    @property
    def n_combinations(self) -> int:
        return len(self.rows)

    def _stats(self, attr: str):
        values = np.array([getattr(r, attr) for r in self.rows], dtype=np.float64)
        return float(values.mean()), float(values.std())

    @property
    def acc_r(self):
        return self._stats("acc_r")

    @property
    def acc_f(self):
        return self._stats("acc_f")

    def summary_row(self) -> Dict:
        (r_mean, r_std), (f_mean, f_std) = self.acc_r, self.acc_f
        return {"f": self.f, "n_combinations": self.n_combinations,
                "acc_r_mean": round(r_mean, 4), "acc_r_std": round(r_std, 4),
                "acc_f_mean": round(f_mean, 4), "acc_f_std": round(f_std, 4)}


def forget_combinations(num_classes: int, f: int, seed: int = 0,
                        cap: int = MAX_COMBINATIONS) -> List[tuple]:
    """Every f-subset of the classes, or a seeded sample of `cap` distinct ones when there are more"""
    total = math.comb(num_classes, f)
    if total <= cap:
        return list(itertools.combinations(range(num_classes), f))
    logger.warning(f"C({num_classes}, {f}) = {total} combinations, sampling {cap}")
    rng = np.random.default_rng(derive_seed(seed, f"sweep:{f}"))
    chosen = set()
    while len(chosen) < cap:
        chosen.add(tuple(sorted(int(c) for c in rng.choice(num_classes, size=f, replace=False))))
    return sorted(chosen)


def scenario_sweep(model: PreForgettableModel, dataset: Dataset, f: int, seed: int = 0,
                   renormalize: bool = False) -> EvalReport:
    """Remove every f-subset of prompts in turn and measure Acc_r / Acc_f"""
    num_classes = model.config.num_classes
    if not 1 <= f <= num_classes - 1:
        raise EvaluationError(f"f must lie in [1, {num_classes - 1}], got {f}")
    with model.pool.scenario(()):
        intact = model.predict(dataset.images).labels
    report = EvalReport(f)
    for combo in forget_combinations(num_classes, f, seed):
        scenario = ForgetScenario.from_forget(num_classes, combo)
        with model.pool.scenario(combo):
            acc_r = retain_accuracy(model, dataset, scenario, renormalize)
            acc_f = forget_accuracy(model, dataset, scenario, renormalize)
        acc_f_intact = class_averaged_accuracy(intact, dataset.labels, scenario.forget_set)
        report.rows.append(CombinationResult(combo, acc_r, acc_f, acc_f_intact))
    (r_mean, r_std), (f_mean, f_std) = report.acc_r, report.acc_f
    logger.info(f"Sweep f={f}: {report.n_combinations} combinations, "
                f"Acc_r={r_mean:.2f}±{r_std:.2f} Acc_f={f_mean:.2f}±{f_std:.2f}")
    return report


def default_forget_counts(num_classes: int) -> List[int]:
    """f in {1, ceil(K/2), K-1}, deduplicated"""
    return sorted({1, math.ceil(num_classes / 2), num_classes - 1})


SUMMARY_COLUMNS = ["f", "n_combinations", "acc_r_mean", "acc_r_std", "acc_f_mean", "acc_f_std"]
ROW_COLUMNS = ["f", "forget_set", "acc_r", "acc_f", "acc_f_intact"]


def sweep_frames(reports: Sequence[EvalReport]):
    """(summary, per-combination) DataFrames for a list of sweep reports"""
    summary = pd.DataFrame([r.summary_row() for r in reports], columns=SUMMARY_COLUMNS)
    rows = pd.DataFrame(
        [{"f": r.f, "forget_set": "-".join(map(str, row.forget_set)), "acc_r": row.acc_r,
          "acc_f": row.acc_f, "acc_f_intact": row.acc_f_intact} for r in reports for row in r.rows],
        columns=ROW_COLUMNS)
    return summary, rows.round(4)


def write_sweep_csv(reports: Sequence[EvalReport], summary_path: str, rows_path: Optional[str] = None):
    os.makedirs(os.path.dirname(os.path.abspath(summary_path)), exist_ok=True)
    summary, rows = sweep_frames(reports)
    summary.to_csv(summary_path, index=False)
    if rows_path:
        rows.to_csv(rows_path, index=False)
    logger.info(f"Wrote sweep summary to {summary_path}")


# ---------------------------------------------------------------------------
# Sequential inference
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    batch_index: int
    group: str
    removed: bool
    n: int
    correct: int

    @property
    def accuracy(self) -> float:
        return 100.0 * self.correct / self.n if self.n else float("nan")


def parse_schedule(text: str) -> Dict[int, List[int]]:
    """'10:2,20:4+5' -> {10: [2], 20: [4, 5]}"""
    schedule: Dict[int, List[int]] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        try:
            position, classes = item.split(":")
            schedule.setdefault(int(position), []).extend(int(c) for c in classes.split("+"))
        except ValueError as e:
            raise EvaluationError(f"bad schedule entry '{item}', expected position:class[+class]") from e
    return schedule


def sequential_inference(model: PreForgettableModel, dataset: Dataset,
                         schedule: Mapping[int, Sequence[int]], batch_size: int = 60,
                         seed: int = 0) -> List[TraceRow]:
    """
    Stream test batches in a fixed shuffled order, removing prompts at the scheduled
    batch positions (before that batch is classified). No parameter is updated.
    """
    num_classes = model.config.num_classes
    scheduled = sorted({int(c) for classes in schedule.values() for c in classes})
    unknown = [c for c in scheduled if not 0 <= c < num_classes]
    if unknown:
        raise EvaluationError(f"schedule references unknown classes {unknown}")
    retained = [c for c in range(num_classes) if c not in scheduled]
    order = np.random.default_rng(derive_seed(seed, "stream")).permutation(len(dataset))
    rows: List[TraceRow] = []
    saved = model.pool.mask()
    try:
        for batch_index, start in enumerate(range(0, len(dataset), batch_size)):
            for c in schedule.get(batch_index, []):
                model.pool.remove_prompt(int(c))
            idx = order[start:start + batch_size]
            labels = dataset.labels[idx]
            predicted = model.predict(dataset.images[idx]).labels
            hits = predicted == labels
            in_retained = np.isin(labels, retained)
            rows.append(TraceRow(batch_index, RETAINED_GROUP, False,
                                 int(in_retained.sum()), int(hits[in_retained].sum())))
            for c in scheduled:
                mask = labels == c
                rows.append(TraceRow(batch_index, f"class_{c}", not model.pool.active[c],
                                     int(mask.sum()), int(hits[mask].sum())))
    finally:
        model.pool.active = saved
    logger.info(f"Sequential trace: {len(rows)} rows over {math.ceil(len(dataset) / batch_size)} batches")
    return rows


def smooth_trace(rows: Sequence[TraceRow], window: int = 5) -> Dict[str, List[float]]:
    """Trailing windowed accuracy per group (pooled counts over the window)"""
    groups: Dict[str, List[TraceRow]] = {}
    for row in rows:
        groups.setdefault(row.group, []).append(row)
    smoothed = {}
    for group, items in groups.items():
        items = sorted(items, key=lambda r: r.batch_index)
        values = []
        for i in range(len(items)):
            chunk = items[max(0, i - window + 1):i + 1]
            n = sum(r.n for r in chunk)
            values.append(100.0 * sum(r.correct for r in chunk) / n if n else float("nan"))
        smoothed[group] = values
    return smoothed


TRACE_COLUMNS = ["batch_index", "group", "removed", "n", "correct", "accuracy"]


def write_trace_csv(rows: Sequence[TraceRow], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame = pd.DataFrame([asdict(r) for r in rows], columns=TRACE_COLUMNS[:-1])
    frame["removed"] = frame["removed"].astype(int)
    frame["accuracy"] = [round(r.accuracy, 4) if r.n else None for r in rows]
    frame.to_csv(path, index=False, columns=TRACE_COLUMNS)


def read_trace_csv(path: str) -> List[TraceRow]:
    frame = pd.read_csv(path, dtype={"group": str})
    return [TraceRow(int(r.batch_index), r.group, bool(int(r.removed)), int(r.n), int(r.correct))
            for r in frame.itertuples(index=False)]


# ---------------------------------------------------------------------------
# Jailbreak check
# ---------------------------------------------------------------------------

@dataclass
class JailbreakReport:
    intact_accuracy: float
    stripped_accuracy: float


def jailbreak_eval(model: PreForgettableModel, dataset: Dataset) -> JailbreakReport:
    """Overall accuracy with LoRA intact and with every adapter stripped (prompts kept)"""
    with model.pool.scenario(()):
        intact = overall_accuracy(model, dataset)
        with lora_stripped(model.encoder):
            stripped = overall_accuracy(model, dataset)
    logger.info(f"Jailbreak check: intact {intact:.2f}%, LoRA stripped {stripped:.2f}%")
    return JailbreakReport(intact, stripped)
