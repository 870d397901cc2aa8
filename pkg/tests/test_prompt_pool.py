import itertools
import logging
import time
from collections import Counter

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from modules.dataset import SyntheticSpec, generate_synthetic
from modules.numerics import optimizer_step_count
from modules.prompt_pool import ForgetScenario, PromptPool, PromptPoolError


@pytest.fixture
def pool():
    return PromptPool(num_classes=6, tokens_per_class=2, embed_dim=8, rng_seed=42)


def test_distractor_subsets_are_uniform(pool):
    draws = Counter(tuple(sorted(pool.sample_distractors(0, 2))) for _ in range(30000))
    subsets = list(itertools.combinations(range(1, 6), 2))
    assert set(draws) == set(subsets)
    _, p_value = chisquare([draws[s] for s in subsets])
    assert p_value > 0.001


def test_permutations_are_uniform(pool):
    ids = [4, 1, 3, 0]
    draws = Counter(tuple(pool.assemble_shuffled(ids)) for _ in range(30000))
    perms = list(itertools.permutations(ids))
    assert set(draws) == set(perms)
    _, p_value = chisquare([draws[p] for p in perms])
    assert p_value > 0.001


def test_distractors_never_include_target_or_inactive(pool):
    pool.remove_prompt(4)
    for _ in range(20000):
        picked = pool.sample_distractors(2, 3)
        assert 2 not in picked and 4 not in picked
        assert len(set(picked)) == 3


@pytest.mark.slow
def test_target_excluded_over_a_million_draws():
    pool = PromptPool(num_classes=6, tokens_per_class=1, embed_dim=4, rng_seed=1)
    rng = np.random.Generator(np.random.Philox(9))
    assert not any(3 in pool.sample_distractors(3, 4, rng) for _ in range(1_000_000))


def test_distractor_draw_limits(pool):
    with pytest.raises(PromptPoolError):
        pool.sample_distractors(0, 6)
    assert pool.sample_distractors(0, 0) == []
    pool.remove_prompt(0)
    with pytest.raises(PromptPoolError):
        pool.sample_distractors(0, 1)


def test_draw_m_support(pool):
    values = {pool.draw_m(0, "uniform") for _ in range(2000)}
    assert values == {1, 2, 3, 4, 5}
    assert pool.draw_m(0, "all") == 5
    pool.remove_prompt(1)
    assert pool.draw_m(0, "all") == 4
    for c in (2, 3, 4, 5):
        pool.remove_prompt(c)
    with pytest.raises(PromptPoolError):
        pool.draw_m(0, "uniform")


def test_same_seed_same_draws():
    a = PromptPool(6, 2, 8, rng_seed=3)
    b = PromptPool(6, 2, 8, rng_seed=3)
    assert [a.sample_distractors(1, 3) for _ in range(20)] == [b.sample_distractors(1, 3) for _ in range(20)]
    a.reseed(3)
    b.reseed(4)
    assert [a.assemble_shuffled([0, 1, 2]) for _ in range(20)] != [b.assemble_shuffled([0, 1, 2]) for _ in range(20)]


def test_token_assembly_follows_requested_order(pool):
    tokens = pool.tokens([3, 1])
    assert tokens.shape == (4, 8)
    assert torch.equal(tokens[:2], pool.prompts[3])
    assert torch.equal(tokens[2:], pool.prompts[1])
    assert pool.tokens([]).shape == (0, 8)


def test_batch_tokens_pads_and_masks(pool):
    tokens, mask = pool.batch_tokens([[0, 1, 2], [5]])
    assert tokens.shape == (2, 6, 8)
    assert mask.tolist() == [[True] * 6, [True, True, False, False, False, False]]
    assert torch.count_nonzero(tokens[1, 2:]) == 0


def test_inference_uses_active_prompts_in_class_order(pool):
    pool.remove_prompt(2)
    expected = torch.cat([pool.prompts[c] for c in (0, 1, 3, 4, 5)])
    assert torch.equal(pool.inference_tokens(), expected)
    with pytest.raises(PromptPoolError):
        pool.tokens([2])


def test_remove_and_restore_touch_only_the_mask(pool, caplog):
    before = pool.prompts.detach().clone()
    steps = optimizer_step_count()
    assert pool.remove_prompt(3) is True
    assert pool.active_classes() == [0, 1, 2, 4, 5]
    with caplog.at_level(logging.WARNING):
        assert pool.remove_prompt(3) is False
    assert "already inactive" in caplog.text
    assert pool.restore_prompt(3) is True
    with caplog.at_level(logging.WARNING):
        assert pool.restore_prompt(3) is False
    assert "already active" in caplog.text
    assert torch.equal(pool.prompts.detach(), before)
    assert optimizer_step_count() == steps


def _median_toggle_seconds(pool, c, samples=25, calls=200):
    per_call = []
    for _ in range(samples):
        started = time.perf_counter()
        for _ in range(calls):
            pool.remove_prompt(c)
            pool.restore_prompt(c)
        per_call.append((time.perf_counter() - started) / (2 * calls))
    return float(np.median(per_call))


def test_remove_prompt_cost_does_not_grow_with_data(tiny_model):
    timings = {}
    for samples_per_class in (20, 200):
        data = generate_synthetic(SyntheticSpec(num_classes=4, samples_per_class=samples_per_class,
                                                image_size=8, seed=1)).train
        tiny_model.predict(data.images)
        steps = optimizer_step_count()
        timings[samples_per_class] = _median_toggle_seconds(tiny_model.pool, 2)
        assert optimizer_step_count() == steps
    assert timings[20] < 1e-3
    assert timings[200] < 1e-3
    assert 0.8 <= timings[200] / timings[20] <= 1.2


def test_purge_is_permanent(pool):
    pool.purge_prompt(1)
    assert torch.count_nonzero(pool.prompts[1]) == 0
    assert not pool.active[1]
    with pytest.raises(PromptPoolError):
        pool.restore_prompt(1)
    with pytest.raises(PromptPoolError):
        pool.load_mask([True] * 6)
    pool.restore_all()
    assert pool.active_classes() == [0, 2, 3, 4, 5]


def test_scenario_restores_previous_mask(pool):
    pool.remove_prompt(0)
    with pool.scenario([2, 3]):
        assert pool.active_classes() == [0, 1, 4, 5]
    assert pool.mask() == [False, True, True, True, True, True]
    with pytest.raises(RuntimeError):
        with pool.scenario([1]):
            raise RuntimeError("boom")
    assert pool.mask() == [False, True, True, True, True, True]


def test_out_of_range_classes_raise(pool):
    with pytest.raises(PromptPoolError):
        pool.remove_prompt(6)
    with pytest.raises(PromptPoolError):
        pool.load_mask([True] * 5)


def test_forget_scenario_partition():
    scenario = ForgetScenario.from_forget(5, [3, 1])
    assert scenario.forget_set == {1, 3}
    assert scenario.retain_set == {0, 2, 4}
    assert scenario.describe() == "1-3"
    assert ForgetScenario.from_forget(5, []).describe() == "none"
    with pytest.raises(ValueError):
        ForgetScenario.from_forget(5, [5])


def test_remove_then_restore_gives_identical_logits(tiny_model, tiny_splits):
    images = tiny_splits.test.images
    with torch.no_grad():
        tiny_model.encoder.blocks[0].attn.lora_q.B.normal_(generator=torch.Generator().manual_seed(0))
    before = tiny_model.logits(images)
    tiny_model.pool.remove_prompt(1)
    assert not np.array_equal(tiny_model.logits(images), before)
    tiny_model.pool.restore_prompt(1)
    assert np.array_equal(tiny_model.logits(images), before)
