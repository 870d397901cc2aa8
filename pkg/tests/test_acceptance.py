"""
End-to-end runs on the default synthetic task (K=6). Deselected by default; run with
`pytest -m slow`.
"""

import numpy as np
import pytest

from config.app_config import RunConfig
from config.model_config import AblationSwitches, TrainConfig
from modules.dataset import SyntheticSpec, generate_synthetic
from modules.encoder import lora_stripped
from modules.evaluator import (
    RETAINED_GROUP, class_averaged_accuracy, forget_accuracy, overall_accuracy, retain_accuracy,
    scenario_sweep, sequential_inference, smooth_trace,
)
from modules.membership_attack import mia_attack
from modules.model_runner import build_model
from modules.numerics import derive_seed
from modules.prompt_pool import ForgetScenario
from modules.trainer import fit

pytestmark = pytest.mark.slow

K = 6
CHANCE = 100.0 / K
SEEDS = (0, 1, 2)


def _train(seed=0, data=None, **train_kwargs):
    run = RunConfig(train=TrainConfig(**train_kwargs), data=data or SyntheticSpec(), seed=seed).resolve_seeds()
    splits = generate_synthetic(run.data)
    model = build_model(run.encoder, init_seed=derive_seed(seed, "init"),
                        sampler_seed=derive_seed(seed, "sampler"))
    fit(model, splits.train, run.train)
    return model, splits


def _stripped_accuracy(model, dataset):
    with lora_stripped(model.encoder):
        return overall_accuracy(model, dataset)


@pytest.fixture(scope="module")
def unlearning_run():
    return _train(seed=0)


@pytest.fixture(scope="module")
def full_knowledge_run():
    return _train(seed=0, full_knowledge=True)


def test_full_knowledge_utility(full_knowledge_run):
    model, splits = full_knowledge_run
    assert overall_accuracy(model, splits.test) >= 90.0


def test_forgotten_class_drops_to_chance(unlearning_run):
    model, splits = unlearning_run
    scenario = ForgetScenario.from_forget(K, [2])
    with model.pool.scenario([2]):
        acc_f = forget_accuracy(model, splits.test, scenario)
        kl = model.kl_to_uniform(splits.test.of_classes([2]).images)
    assert acc_f <= 2 * CHANCE
    assert float(kl.mean()) <= 0.2


def test_retained_classes_keep_their_accuracy(unlearning_run):
    model, splits = unlearning_run
    scenario = ForgetScenario.from_forget(K, [2])
    before = class_averaged_accuracy(model.predict(splits.test.images).labels, splits.test.labels,
                                     scenario.retain_set)
    with model.pool.scenario([2]):
        after = retain_accuracy(model, splits.test, scenario)
    assert abs(after - before) <= 5.0


def test_sweep_is_stable_across_forget_counts(unlearning_run):
    model, splits = unlearning_run
    intact = class_averaged_accuracy(model.predict(splits.test.images).labels, splits.test.labels, range(K))
    for f in (1, 3, 5):
        report = scenario_sweep(model, splits.test, f)
        assert report.acc_f[0] <= 2 * CHANCE, f
        assert report.acc_r[0] >= intact - 5.0, f


def test_ablation_ordering():
    means = {}
    for preset in AblationSwitches.PRESETS:
        scores = []
        for seed in SEEDS:
            model, splits = _train(seed=seed, ablation=AblationSwitches.preset(preset))
            scores.append(np.mean([scenario_sweep(model, splits.test, f).acc_r[0] for f in (1, 3, 5)]))
        means[preset] = float(np.mean(scores))
    assert means["full"] > means["shuffle"] > means["kl_only"]
    assert means["full"] - means["kl_only"] >= 20.0


def test_stripping_lora_collapses_only_the_unlearning_model():
    for seed in SEEDS:
        ours, splits = _train(seed=seed)
        baseline, _ = _train(seed=seed, full_knowledge=True)
        stripped_ours = _stripped_accuracy(ours, splits.test)
        stripped_baseline = _stripped_accuracy(baseline, splits.test)
        assert stripped_ours <= 0.5 * stripped_baseline, seed
        assert abs(stripped_ours - CHANCE) <= 15.0, seed


def test_membership_attack_fails_on_forgotten_classes(unlearning_run):
    model, splits = unlearning_run
    report = mia_attack(model, splits.train, splits.test, range(1, K))
    assert report.attack_advantage <= 5.0


def test_membership_attack_works_on_overfit_control():
    noisy = SyntheticSpec(samples_per_class=30, noise_std=2.0)
    model, splits = _train(seed=0, data=noisy, full_knowledge=True, epochs=150, lr=3e-3, batch_size=16)
    report = mia_attack(model, splits.train, splits.test, range(1, K), remove_prompts=False)
    assert report.attack_advantage >= 30.0


def test_sequential_removals_hold(unlearning_run):
    model, splits = unlearning_run
    window = 5
    events = {4: [1], 9: [4]}
    rows = sequential_inference(model, splits.test, events, batch_size=24)
    smoothed = smooth_trace(rows, window)
    for batch, classes in events.items():
        for c in classes:
            after = smoothed[f"class_{c}"][batch + window - 1:]
            assert after and max(after) < CHANCE + 10.0, c
    retained = smoothed[RETAINED_GROUP][window - 1:]
    assert max(retained) - min(retained) < 5.0
