import numpy as np
import pytest
import torch

from refclick import clicks as C
from refclick.model import ModelConfig, SegModel, image_to_tensor
from refclick.prompts import (
    ReferenceFeatureCache,
    ReferenceGuidance,
    encode_prompt,
    extract_reference_feature,
    generate_prompts,
    masked_representation,
)

CFG = ModelConfig(input_size=32, patch_size=16, embed_dim=32, depth=2, num_heads=2, decoder_dim=16)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(3)
    m = SegModel(CFG)
    m.eval()
    return m


def rand_image(size=32, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def loop_masked_average(feature, mask):
    """Independent per-pixel double-loop oracle for the pooled representation."""
    h, w, c = feature.shape
    acc = np.zeros(c, dtype=np.float64)
    total = 0.0
    for i in range(h):
        for j in range(w):
            acc += feature[i, j] * mask[i, j]
            total += mask[i, j]
    if total == 0:
        return np.zeros(c, dtype=np.float64)
    return acc / total


def test_guidance_validation():
    img = rand_image()
    with pytest.raises(ValueError):
        ReferenceGuidance(np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError):
        ReferenceGuidance(img, np.zeros((8, 8), np.uint8))


def test_reference_feature_shape_and_determinism(model):
    grid = extract_reference_feature(model, rand_image(seed=1))
    assert grid.shape == (2, 2, CFG.embed_dim)
    again = extract_reference_feature(model, rand_image(seed=1))
    assert torch.equal(grid, again)


def test_reference_branch_differs_from_target_branch(model):
    """The reference path omits the extra embedding entirely."""
    img_t = image_to_tensor(rand_image(seed=2))
    ref_tokens = model.encoder_norm(model.backbone(model.embed_image(img_t)))
    zero_extras = torch.zeros(1, 3, 32, 32)
    tgt_tokens = model.encoder_norm(
        model.backbone(model.fuse(model.embed_image(img_t), model.embed_extras(zero_extras)))
    )
    assert not torch.allclose(ref_tokens, tgt_tokens, atol=1e-4)


def test_masked_representation_matches_loop_oracle():
    rng = np.random.default_rng(7)
    for _ in range(20):
        feature = rng.normal(size=(4, 4, 3))
        mask = rng.random((4, 4))
        got = masked_representation(torch.from_numpy(feature), torch.from_numpy(mask)).numpy()
        want = loop_masked_average(feature, mask)
        np.testing.assert_allclose(got, want, rtol=1e-6)


def test_masked_representation_full_mask_is_global_mean():
    rng = np.random.default_rng(8)
    feature = torch.from_numpy(rng.normal(size=(3, 5, 4)))
    got = masked_representation(feature, torch.ones(3, 5, dtype=torch.float64))
    assert torch.allclose(got, feature.mean(dim=(0, 1)), atol=1e-12)


def test_masked_representation_empty_mask_is_zero():
    feature = torch.randn(2, 2, 6)
    assert not masked_representation(feature, torch.zeros(2, 2)).any()


def test_masked_representation_dimension_mismatch():
    with pytest.raises(ValueError):
        masked_representation(torch.randn(2, 2, 3), torch.zeros(3, 3))


def test_masked_representation_scale_invariance():
    rng = np.random.default_rng(9)
    feature = torch.from_numpy(rng.normal(size=(4, 4, 5)))
    mask = torch.from_numpy(rng.random((4, 4)))
    base = masked_representation(feature, mask)
    for c in (0.1, 1.0, 7.3):
        scaled = masked_representation(feature, mask * c)
        assert torch.allclose(scaled, base, rtol=1e-6)


def test_masked_representation_ignores_outside_support():
    rng = np.random.default_rng(10)
    feature = rng.normal(size=(4, 4, 3))
    mask = np.zeros((4, 4))
    mask[:2, :2] = rng.random((2, 2)) + 0.1
    base = masked_representation(torch.from_numpy(feature), torch.from_numpy(mask))
    perturbed = feature.copy()
    perturbed[2:, 2:] += 100.0
    after = masked_representation(torch.from_numpy(perturbed), torch.from_numpy(mask))
    assert torch.equal(base, after)


def test_encode_prompt_zero_through_zero_biases(model):
    import copy

    clone = copy.deepcopy(model)
    with torch.no_grad():
        for mlp in (clone.prompt_mlp_pos, clone.prompt_mlp_neg):
            mlp[0].bias.zero_()
            mlp[2].bias.zero_()
    out = encode_prompt(clone, torch.zeros(CFG.embed_dim), C.POSITIVE)
    assert torch.allclose(out, torch.zeros(CFG.embed_dim), atol=1e-7)


def test_encode_prompt_polarities_disjoint_parameters(model):
    r = torch.randn(CFG.embed_dim)
    pos = encode_prompt(model, r, C.POSITIVE)
    neg = encode_prompt(model, r, C.NEGATIVE)
    assert pos.shape == (CFG.embed_dim,)
    assert not torch.allclose(pos, neg, atol=1e-4)


def test_encode_prompt_length_check(model):
    with pytest.raises(ValueError):
        encode_prompt(model, torch.zeros(7), C.POSITIVE)


def test_generate_prompts_empty_guidance(model):
    g = ReferenceGuidance(rand_image(seed=4))
    pos, neg = generate_prompts(model, g)
    assert not pos.any() and not neg.any()


def test_generate_prompts_routing(model):
    mask = np.zeros((32, 32), np.uint8)
    mask[4:12, 4:12] = 1
    g = ReferenceGuidance(rand_image(seed=5), mask, None)
    pos, neg = generate_prompts(model, g)
    assert pos.abs().sum() > 0
    assert not neg.any()
    # matches the explicit pipeline
    feature = extract_reference_feature(model, g.ref_image)
    from refclick import maskops

    down = torch.from_numpy(maskops.downsample_area(mask, 16)).to(pos.dtype)
    want = encode_prompt(model, masked_representation(feature, down), C.POSITIVE)
    assert torch.allclose(pos, want, atol=1e-7)


def test_feature_cache_returns_same_tensor(model):
    cache = ReferenceFeatureCache(max_entries=4)
    img = rand_image(seed=6)
    a = cache.get_or_compute(model, img)
    b = cache.get_or_compute(model, img)
    assert a is b
    with torch.no_grad():  # inference callers always extract under no_grad
        fresh = extract_reference_feature(model, img)
    assert torch.equal(a, fresh)


def test_feature_cache_evicts(model):
    cache = ReferenceFeatureCache(max_entries=2)
    imgs = [rand_image(seed=20 + i) for i in range(3)]
    for img in imgs:
        cache.get_or_compute(model, img)
    assert len(cache._entries) == 2
