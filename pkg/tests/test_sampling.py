"""Model-backed sampling wrappers: guidance arithmetic and scene decoding."""

import numpy as np
import pytest
import torch

from scenediff.assets import builtin_library
from scenediff.diffusion import NoiseSchedule
from scenediff.model import ModelConfig, SceneDenoiser, build_vocab, mixed_state
from scenediff.rng import np_rng
from scenediff.sampling import (
    generate_scenes,
    generate_scenes_continuous,
    inpaint_scene,
    make_continuous_denoiser,
    make_mixed_denoiser,
)
from scenediff.scene import InpaintMask, scenes_equal
from scenediff.grammar import build_toytable
from scenediff.training import init_ema


@pytest.fixture(scope="module")
def setup():
    library = builtin_library("desk")
    vocab = build_vocab(library)
    schedule = NoiseSchedule(num_steps=20, beta_end=0.2)
    config = ModelConfig(
        mode="mixed",
        num_categories=library.num_categories,
        vocab_size=len(vocab),
        d_model=16,
        num_heads=2,
        num_double_blocks=1,
        num_single_blocks=1,
        max_prompt_len=8,
    )
    model = SceneDenoiser(config, init_seed=3)
    gen = torch.Generator().manual_seed(17)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
    return library, vocab, schedule, model


def _continuous_model(library, vocab, seed=4):
    config = ModelConfig(
        mode="continuous",
        num_categories=library.num_categories,
        vocab_size=len(vocab),
        d_model=16,
        num_heads=2,
        num_double_blocks=1,
        num_single_blocks=1,
        max_prompt_len=8,
    )
    model = SceneDenoiser(config, init_seed=seed)
    gen = torch.Generator().manual_seed(23)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
    return model


def _rand_inputs(library, batch=2, capacity=5, seed=0):
    rng = np_rng(seed)
    cats = rng.integers(0, library.num_categories, size=(batch, capacity))
    pose = rng.standard_normal((batch, capacity, 12))
    return cats, pose


def test_unconditional_denoiser_matches_direct_forward(setup):
    library, vocab, schedule, model = setup
    cats, pose = _rand_inputs(library)
    denoise = make_mixed_denoiser(model)
    logits, eps = denoise(cats, pose, 7)
    with torch.no_grad():
        want_logits, want_eps = model(
            mixed_state(torch.from_numpy(cats), torch.from_numpy(pose), library.num_categories), 7
        )
    assert np.array_equal(logits, want_logits.numpy())
    assert np.array_equal(eps, want_eps.numpy())


def test_zero_guidance_is_pure_conditional(setup):
    library, vocab, schedule, model = setup
    cats, pose = _rand_inputs(library)
    denoise = make_mixed_denoiser(model, vocab, "A scene with 3 objects.", guidance=0.0)
    logits, eps = denoise(cats, pose, 5)
    ids = vocab.encode("A scene with 3 objects.", model.config.max_prompt_len)
    with torch.no_grad():
        want = model(
            mixed_state(torch.from_numpy(cats), torch.from_numpy(pose), library.num_categories),
            5,
            prompt_ids=torch.from_numpy(np.tile(ids, (2, 1))),
        )
    assert np.array_equal(logits, want[0].numpy())
    assert np.array_equal(eps, want[1].numpy())


def test_negative_one_guidance_is_pure_unconditional(setup):
    library, vocab, schedule, model = setup
    cats, pose = _rand_inputs(library)
    guided = make_mixed_denoiser(model, vocab, "A scene with 3 objects.", guidance=-1.0)
    plain = make_mixed_denoiser(model)
    a = guided(cats, pose, 9)
    b = plain(cats, pose, 9)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_guidance_arithmetic_matches_manual_extrapolation(setup):
    library, vocab, schedule, model = setup
    cats, pose = _rand_inputs(library)
    w = 2.5
    denoise = make_mixed_denoiser(model, vocab, "A scene with a plate.", guidance=w)
    logits, eps = denoise(cats, pose, 4)
    cond = make_mixed_denoiser(model, vocab, "A scene with a plate.", guidance=0.0)(cats, pose, 4)
    uncond = make_mixed_denoiser(model)(cats, pose, 4)
    assert np.array_equal(logits, (1 + w) * cond[0] - w * uncond[0])
    assert np.array_equal(eps, (1 + w) * cond[1] - w * uncond[1])


def test_forward_count_respects_guidance_shortcuts(setup):
    library, vocab, schedule, model = setup
    cats, pose = _rand_inputs(library)
    calls = []
    handle = model.register_forward_hook(lambda *a: calls.append(1))
    try:
        make_mixed_denoiser(model, vocab, "A scene.", guidance=0.0)(cats, pose, 3)
        assert len(calls) == 1
        calls.clear()
        make_mixed_denoiser(model, vocab, "A scene.", guidance=-1.0)(cats, pose, 3)
        assert len(calls) == 1
        calls.clear()
        make_mixed_denoiser(model, vocab, "A scene.", guidance=1.5)(cats, pose, 3)
        assert len(calls) == 2
    finally:
        handle.remove()


def test_guidance_without_prompt_rejected(setup):
    library, vocab, schedule, model = setup
    with pytest.raises(ValueError):
        make_mixed_denoiser(model, vocab, None, guidance=2.0)
    with pytest.raises(ValueError):
        make_mixed_denoiser(model, None, "A scene.", guidance=1.0)
    cont = _continuous_model(library, vocab)
    with pytest.raises(ValueError):
        make_mixed_denoiser(cont)
    with pytest.raises(ValueError):
        make_continuous_denoiser(model)


def test_generate_scenes_valid_and_deterministic(setup):
    library, vocab, schedule, model = setup
    scenes = generate_scenes(model, vocab, schedule, library, capacity=6, num_scenes=2, seed=11)
    again = generate_scenes(model, vocab, schedule, library, capacity=6, num_scenes=2, seed=11)
    assert len(scenes) == 2
    for s, s2 in zip(scenes, again):
        assert scenes_equal(s, s2)
        assert s.capacity == 6
        for slot in s.slots:
            if not slot.is_empty:
                r = slot.rotation.data.reshape(3, 3)
                assert np.allclose(r @ r.T, np.eye(3), atol=1e-9)
    different = generate_scenes(model, vocab, schedule, library, capacity=6, num_scenes=2, seed=12)
    assert not scenes_equal(scenes[0], different[0])


def test_generate_scenes_prompted_and_strided(setup):
    library, vocab, schedule, model = setup
    scenes = generate_scenes(
        model,
        vocab,
        schedule,
        library,
        capacity=6,
        prompt="A scene with 2 objects.",
        guidance=1.0,
        num_scenes=1,
        seed=5,
        method="ddim",
        num_stride_steps=5,
        eta=0.0,
    )
    assert len(scenes) == 1 and scenes[0].capacity == 6


def test_generate_scenes_continuous_path(setup):
    library, vocab, schedule, model = setup
    cont = _continuous_model(library, vocab)
    scenes = generate_scenes_continuous(cont, vocab, schedule, library, capacity=6, num_scenes=2, seed=3)
    again = generate_scenes_continuous(cont, vocab, schedule, library, capacity=6, num_scenes=2, seed=3)
    assert len(scenes) == 2
    for s, s2 in zip(scenes, again):
        assert scenes_equal(s, s2)


def test_inpaint_preserves_unmasked_slots_bitwise(setup):
    library, vocab, schedule, model = setup
    scene, _ = __import__("scenediff.grammar", fromlist=["sample_feasible"]).sample_feasible(
        build_toytable(), seed=2
    )
    untouched = inpaint_scene(model, vocab, schedule, scene, InpaintMask.none(scene.capacity), seed=4)[0]
    assert scenes_equal(untouched, scene)
    assert [s.welded for s in untouched.slots] == [s.welded for s in scene.slots]


def test_inpaint_regenerates_only_masked_slots(setup):
    library, vocab, schedule, model = setup
    from scenediff.grammar import sample_feasible

    scene, _ = sample_feasible(build_toytable(), seed=2)
    occupied = [i for i, s in enumerate(scene.slots) if not s.is_empty and not s.welded]
    target = occupied[0]
    mask = InpaintMask.for_slots(scene, [target])
    out = inpaint_scene(model, vocab, schedule, scene, mask, seed=9)[0]
    for i, (got, want) in enumerate(zip(out.slots, scene.slots)):
        if i == target:
            assert not got.welded
        else:
            assert got.category == want.category
            assert np.array_equal(got.translation, want.translation)
            assert np.array_equal(got.rotation.data, want.rotation.data)
            assert got.welded == want.welded
    twin = inpaint_scene(model, vocab, schedule, scene, mask, seed=9)[0]
    assert scenes_equal(out, twin)


def test_inpaint_mask_capacity_mismatch(setup):
    library, vocab, schedule, model = setup
    from scenediff.grammar import sample_feasible

    scene, _ = sample_feasible(build_toytable(), seed=2)
    with pytest.raises(ValueError):
        inpaint_scene(model, vocab, schedule, scene, InpaintMask.none(scene.capacity + 1))


def test_ema_shadow_changes_samples_and_restores_weights(setup):
    library, vocab, schedule, model = setup
    shadow = {k: torch.randn(v.shape, generator=torch.Generator().manual_seed(8), dtype=torch.float64) * 0.05
              for k, v in init_ema(model).items()}
    before = {k: v.clone() for k, v in model.state_dict().items()}
    live = generate_scenes(model, vocab, schedule, library, capacity=5, seed=21)[0]
    averaged = generate_scenes(model, vocab, schedule, library, capacity=5, seed=21, ema_shadow=shadow)[0]
    assert not scenes_equal(live, averaged)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])
