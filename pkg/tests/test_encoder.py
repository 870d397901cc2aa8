import dataclasses

import numpy as np
import pytest
import torch

from modules.encoder import LoraAdapter, PromptedViT, lora_stripped, restore_lora, strip_lora
from modules.numerics import ShapeError


@pytest.fixture
def encoder(tiny_config):
    torch.manual_seed(0)
    return PromptedViT(tiny_config)


def _randomize_lora(encoder, seed=1):
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for adapter in encoder.lora_adapters():
            adapter.B.copy_(torch.randn(adapter.B.shape, generator=gen) * 0.5)


def _images(config, n, seed=0):
    rng = np.random.default_rng(seed)
    return torch.as_tensor(rng.random((n, config.image_size, config.image_size, config.channels)),
                           dtype=torch.float32)


def test_forward_shapes(encoder, tiny_config):
    images = _images(tiny_config, 3)
    prompts = torch.randn(3 * tiny_config.prompt_tokens_per_class, tiny_config.embed_dim)
    assert encoder(images).shape == (3, tiny_config.num_classes)
    assert encoder(images, prompts).shape == (3, tiny_config.num_classes)
    assert encoder(images[0]).shape == (1, tiny_config.num_classes)


def test_sequence_length_accounts_for_prompt_blocks(encoder, tiny_config):
    images = _images(tiny_config, 2)
    for q in (0, 1, 3):
        prompts = torch.zeros(q * tiny_config.prompt_tokens_per_class, tiny_config.embed_dim)
        tokens, _ = encoder.assemble_tokens(images, prompts)
        assert tokens.shape == (2, tiny_config.sequence_length(q), tiny_config.embed_dim)


def test_only_head_and_lora_are_trainable(encoder):
    for name, param in encoder.named_parameters():
        expected = name.startswith("head.") or ".lora_" in name
        assert param.requires_grad == expected, name


def test_lora_starts_as_identity(encoder, tiny_config):
    images = _images(tiny_config, 2)
    intact = encoder(images)
    with lora_stripped(encoder):
        stripped = encoder(images)
    assert torch.equal(intact, stripped)
    for adapter in encoder.lora_adapters():
        assert torch.count_nonzero(adapter.B) == 0


def test_lora_delta_rank_and_scale():
    torch.manual_seed(3)
    adapter = LoraAdapter(dim=16, rank=2, scale=2.0)
    with torch.no_grad():
        adapter.B.normal_()
    assert torch.linalg.matrix_rank(adapter.delta_weight()).item() <= 2
    doubled = LoraAdapter(dim=16, rank=2, scale=4.0)
    doubled.load_state_dict(adapter.state_dict())
    assert torch.allclose(doubled.delta_weight(), 2 * adapter.delta_weight())
    x = torch.randn(5, 16)
    assert torch.allclose(adapter.delta(x), x @ adapter.delta_weight(), atol=1e-6)


def test_strip_is_idempotent_and_equals_zeroed_factors(encoder, tiny_config):
    _randomize_lora(encoder)
    images = _images(tiny_config, 2)
    intact = encoder(images)
    strip_lora(encoder)
    once = encoder(images)
    strip_lora(encoder)
    assert torch.equal(encoder(images), once)
    assert not torch.allclose(once, intact)

    restore_lora(encoder)
    assert torch.equal(encoder(images), intact)
    with torch.no_grad():
        for adapter in encoder.lora_adapters():
            adapter.B.zero_()
    assert torch.allclose(encoder(images), once, atol=1e-6)


def test_lora_stripped_restores_previous_state(encoder):
    with lora_stripped(encoder):
        assert not any(a.enabled for a in encoder.lora_adapters())
    assert all(a.enabled for a in encoder.lora_adapters())


def test_readout_is_invariant_to_prompt_block_order(encoder, tiny_config):
    _randomize_lora(encoder)
    m, d = tiny_config.prompt_tokens_per_class, tiny_config.embed_dim
    gen = torch.Generator().manual_seed(4)
    blocks = [torch.randn(m, d, generator=gen) for _ in range(4)]
    image = _images(tiny_config, 1)[0]
    reference = encoder.forward_blocks(image, blocks)
    for order in ([3, 2, 1, 0], [1, 3, 0, 2], [2, 0, 3, 1]):
        permuted = encoder.forward_blocks(image, [blocks[i] for i in order])
        assert torch.allclose(permuted, reference, atol=1e-5)


def test_padded_prompt_positions_are_masked(encoder, tiny_config):
    m, d = tiny_config.prompt_tokens_per_class, tiny_config.embed_dim
    images = _images(tiny_config, 2)
    short = torch.randn(m, d)
    long = torch.randn(3 * m, d)
    padded = torch.stack([long, torch.cat([short, torch.full((2 * m, d), 7.0)])])
    mask = torch.tensor([[True] * 3 * m, [True] * m + [False] * 2 * m])
    batched = encoder(images, padded, mask)
    assert torch.allclose(batched[0], encoder(images[:1], long)[0], atol=1e-5)
    assert torch.allclose(batched[1], encoder(images[1:], short)[0], atol=1e-5)


def test_shape_errors(encoder, tiny_config):
    with pytest.raises(ShapeError):
        encoder(torch.zeros(2, tiny_config.image_size + 1, tiny_config.image_size, 1))
    with pytest.raises(ShapeError):
        encoder.forward_blocks(_images(tiny_config, 1)[0], [torch.zeros(1, tiny_config.embed_dim)])
    with pytest.raises(ShapeError):
        encoder(_images(tiny_config, 2), torch.zeros(3, 2, tiny_config.embed_dim))


def test_config_controls_geometry(tiny_config):
    wide = PromptedViT(dataclasses.replace(tiny_config, num_classes=7, depth=2))
    assert wide.head.out_features == 7
    assert len(wide.blocks) == 2
    assert len(wide.lora_adapters()) == 4
