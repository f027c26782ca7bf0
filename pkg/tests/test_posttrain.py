"""Policy-gradient post-training: advantages, densities, rollouts, loop."""

import json
import math

import numpy as np
import pytest
import torch

from scenediff.assets import builtin_library
from scenediff.dataset import generate_dataset
from scenediff.diffusion import NoiseSchedule, ddim_mean, ddim_sigma, ddim_timesteps
from scenediff.grammar import build_toytable
from scenediff.model import ModelConfig, SceneDenoiser, build_vocab, load_checkpoint
from scenediff.posttrain import (
    PostTrainConfig,
    compute_advantages,
    count_objects_reward,
    decode_rollouts,
    posttrain,
    rollout_group,
    transition_logprob,
)
from scenediff.rng import derive_seed, np_rng
from scenediff.training import EncodedDataset

LIB = builtin_library("desk")


VOCAB = build_vocab(LIB)


def _model(seed=0):
    config = ModelConfig(
        mode="continuous",
        num_categories=LIB.num_categories,
        vocab_size=len(VOCAB),
        d_model=16,
        num_heads=2,
        num_double_blocks=1,
        num_single_blocks=1,
        max_prompt_len=4,
    )
    model = SceneDenoiser(config, init_seed=seed)
    gen = torch.Generator().manual_seed(31)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64) * 0.05)
    return model


SCHEDULE = NoiseSchedule()  # full-length schedule; strides stay in [100, 150]


def test_advantages_hand_values():
    assert np.allclose(compute_advantages([1.0, 3.0]), [-1.0, 1.0])
    assert np.allclose(compute_advantages([5.0, 5.0, 5.0]), [0.0, 0.0, 0.0])
    a = compute_advantages([2.0, 4.0, 6.0, 8.0])
    assert a.mean() == pytest.approx(0.0, abs=1e-12)
    assert a.std() == pytest.approx(1.0, rel=1e-9)
    with pytest.raises(ValueError):
        compute_advantages([])


def test_transition_logprob_matches_gaussian_density():
    model = _model()
    rng = np_rng(3)
    x_t = torch.from_numpy(rng.standard_normal((2, 4, model.config.state_dims)))
    x_prev = torch.from_numpy(rng.standard_normal((2, 4, model.config.state_dims)))
    t, t_prev, eta = 500, 400, 1.0
    got = transition_logprob(model, x_t, x_prev, t, t_prev, eta, SCHEDULE)
    with torch.no_grad():
        mean = ddim_mean(x_t, t, t_prev, model(x_t, t), eta, SCHEDULE)
    sigma = ddim_sigma(t, t_prev, eta, SCHEDULE)
    manual = (
        -((x_prev - mean) ** 2).sum(dim=(1, 2)) / (2 * sigma**2)
        - 0.5 * x_t.shape[1] * x_t.shape[2] * math.log(2 * math.pi * sigma**2)
    )
    assert torch.allclose(got.detach(), manual, rtol=1e-12)
    assert got.requires_grad


def test_transition_logprob_rejects_deterministic_jump():
    model = _model()
    x = torch.zeros((1, 3, model.config.state_dims), dtype=torch.float64)
    with pytest.raises(ValueError):
        transition_logprob(model, x, x, 10, 0, 1.0, SCHEDULE)
    with pytest.raises(ValueError):
        transition_logprob(model, x, x, 10, 5, 0.0, SCHEDULE)


def test_transition_logprob_gradient_matches_finite_differences():
    model = _model()
    rng = np_rng(9)
    x_t = torch.from_numpy(rng.standard_normal((2, 3, model.config.state_dims)))
    x_prev = torch.from_numpy(rng.standard_normal((2, 3, model.config.state_dims)))

    def value():
        return transition_logprob(model, x_t, x_prev, 600, 480, 1.0, SCHEDULE).sum()

    model.zero_grad()
    value().backward()
    h = 1e-6
    for name in ("eps_head.weight", "scene_in.weight"):
        param = dict(model.named_parameters())[name]
        flat = param.detach().view(-1)
        idx = flat.numel() // 3
        grad = param.grad.view(-1)[idx].item()
        with torch.no_grad():
            orig = flat[idx].item()
            flat[idx] = orig + h
            plus = value().item()
            flat[idx] = orig - h
            minus = value().item()
            flat[idx] = orig
        fd = (plus - minus) / (2 * h)
        assert abs(fd - grad) / max(abs(fd), abs(grad), 1e-8) < 1e-4, name


def test_rollout_group_deterministic_and_replayable():
    model = _model()
    states_a, logp_a = rollout_group(model, SCHEDULE, 5, 3, np_rng(derive_seed(11, 0, 0)), 100, 1.0)
    states_b, logp_b = rollout_group(model, SCHEDULE, 5, 3, np_rng(derive_seed(11, 0, 0)), 100, 1.0)
    assert np.array_equal(states_a, states_b)
    assert torch.equal(logp_a.detach(), logp_b.detach())
    assert logp_a.requires_grad
    assert np.all(np.isfinite(states_a)) and torch.all(torch.isfinite(logp_a))

    # manual replay of the same rng stream, plain loop arithmetic
    rng = np_rng(derive_seed(11, 0, 0))
    grid = ddim_timesteps(SCHEDULE.num_steps, 100)
    x = torch.from_numpy(rng.standard_normal((3, 5, model.config.state_dims)))
    manual_logp = torch.zeros(3, dtype=torch.float64)
    with torch.no_grad():
        for idx in range(len(grid) - 1, 0, -1):
            t, t_prev = grid[idx], grid[idx - 1]
            sigma = ddim_sigma(t, t_prev, 1.0, SCHEDULE)
            mean = ddim_mean(x, t, t_prev, model(x, t), 1.0, SCHEDULE)
            if t_prev == 0:
                x = mean
                continue
            z = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
            x_next = mean + sigma * z
            dims = x.shape[1] * x.shape[2]
            manual_logp += (
                -((x_next - mean) ** 2).sum(dim=(1, 2)) / (2 * sigma**2)
                - 0.5 * dims * math.log(2 * math.pi * sigma**2)
            )
            x = x_next
    assert np.allclose(states_a, x.numpy(), atol=1e-12)
    assert torch.allclose(logp_a.detach(), manual_logp, rtol=1e-10)


def test_rollout_capacity_expansion_adds_no_parameters():
    model = _model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    small, _ = rollout_group(model, SCHEDULE, 4, 2, np_rng(0), 100, 1.0)
    large, _ = rollout_group(model, SCHEDULE, 24, 2, np_rng(0), 100, 1.0)
    assert small.shape == (2, 4, model.config.state_dims)
    assert large.shape == (2, 24, model.config.state_dims)
    after = model.state_dict()
    assert set(after) == set(before)
    for k in before:
        assert torch.equal(after[k], before[k])


def test_decode_rollouts_counts_objects():
    model = _model()
    states, _ = rollout_group(model, SCHEDULE, 5, 2, np_rng(4), 100, 1.0)
    scenes = decode_rollouts(states, LIB)
    assert len(scenes) == 2
    for s in scenes:
        assert 0 <= count_objects_reward(s) <= 5


def test_config_validation():
    good = dict(steps=1, capacity=4)
    PostTrainConfig(**good)
    with pytest.raises(ValueError):
        PostTrainConfig(steps=1, capacity=4, num_stride_steps=50)
    with pytest.raises(ValueError):
        PostTrainConfig(steps=1, capacity=4, num_stride_steps=151)
    with pytest.raises(ValueError):
        PostTrainConfig(steps=1, capacity=4, eta=0.0)
    with pytest.raises(ValueError):
        PostTrainConfig(steps=1, capacity=4, group_size=1)
    with pytest.raises(ValueError):
        PostTrainConfig(steps=0, capacity=4)
    with pytest.raises(ValueError):
        PostTrainConfig(steps=1, capacity=4, anchor_weight=-1.0)


@pytest.fixture(scope="module")
def anchor_data():
    records = generate_dataset(build_toytable(), num_scenes=3, seed=2)
    return EncodedDataset.from_records(records, VOCAB, max_prompt_len=4), VOCAB


def test_posttrain_smoke_updates_and_logs(tmp_path, anchor_data):
    enc, vocab = anchor_data
    model = _model()
    before = {k: v.clone() for k, v in model.state_dict().items()}
    config = PostTrainConfig(
        steps=2,
        capacity=5,
        group_size=4,
        num_stride_steps=100,
        anchor_weight=150.0,
        anchor_batch_size=4,
        lr=1e-4,
        seed=5,
        log_interval=1,
        checkpoint_interval=100,
    )
    out = posttrain(model, SCHEDULE, LIB, enc, config, str(tmp_path / "rl"), vocab)
    assert len(out["reward_mean_history"]) == 2
    assert len(out["reward_max_history"]) == 2
    changed = any(not torch.equal(v, model.state_dict()[k]) for k, v in before.items())
    assert changed
    with open(out["metrics"]) as f:
        lines = [json.loads(l) for l in f if l.strip()]
    assert [l["step"] for l in lines] == [1, 2]
    assert all(np.isfinite(l["pg_loss"]) and np.isfinite(l["anchor_loss"]) for l in lines)
    loaded, _, _, _, extras = load_checkpoint(out["checkpoint"])
    assert extras["step"] == 2
    assert extras["posttrain_config"]["anchor_weight"] == 150.0
    for k, v in loaded.state_dict().items():
        assert torch.equal(v, model.state_dict()[k])


def test_posttrain_aborts_on_nonfinite_reward(tmp_path, anchor_data):
    enc, vocab = anchor_data
    model = _model()
    config = PostTrainConfig(steps=1, capacity=4, group_size=2, num_stride_steps=100, seed=1)
    with pytest.raises(RuntimeError, match="non-finite"):
        posttrain(
            model,
            SCHEDULE,
            LIB,
            enc,
            config,
            str(tmp_path / "bad"),
            vocab,
            reward_fn=lambda scene: float("nan"),
        )


def test_posttrain_requires_continuous_mode(tmp_path, anchor_data):
    enc, vocab = anchor_data
    mixed_config = ModelConfig(
        mode="mixed",
        num_categories=LIB.num_categories,
        vocab_size=len(VOCAB),
        d_model=16,
        num_heads=2,
        num_double_blocks=1,
        num_single_blocks=1,
        max_prompt_len=4,
    )
    mixed = SceneDenoiser(mixed_config)
    config = PostTrainConfig(steps=1, capacity=4, group_size=2, num_stride_steps=100)
    with pytest.raises(ValueError, match="continuous"):
        posttrain(mixed, SCHEDULE, LIB, enc, config, str(tmp_path / "wrong"), vocab)
