"""Reward post-training of a continuous-mode denoiser via policy gradients.

The reverse diffusion is run stochastically (strided jumps with full noise
injection), which makes every intermediate transition a Gaussian policy
whose log-density is differentiable in the network weights.  Scenes decoded
from the rollouts are scored by a reward, advantages are whitened within
each rollout group, and the REINFORCE objective is regularised by the
ordinary denoising loss on pretraining data so the model cannot drift into
degenerate outputs just to please the reward.

The final jump to the clean state is deterministic (its noise scale is
exactly zero), so it carries no log-density term and is simply omitted
from the policy sum.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .diffusion import NoiseSchedule, ddim_mean, ddim_sigma, ddim_timesteps
from .model import SceneDenoiser, save_checkpoint
from .rng import derive_seed, np_rng
from .scene import decode
from .training import (
    EncodedDataset,
    continuous_loss_terms,
    draw_step_noise_continuous,
)

__all__ = [
    "PostTrainConfig",
    "count_objects_reward",
    "compute_advantages",
    "transition_logprob",
    "rollout_group",
    "decode_rollouts",
    "posttrain",
]

_LOG_2PI = math.log(2.0 * math.pi)


def count_objects_reward(scene) -> float:
    """Default reward: how many slots decoded to a real object."""
    return float(scene.object_count())


def compute_advantages(rewards) -> np.ndarray:
    """Whiten rewards within the group; degenerate groups get zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("rewards must be a non-empty vector")
    return (r - r.mean()) / max(float(r.std()), 1e-6)


def transition_logprob(
    model: SceneDenoiser,
    x_t: torch.Tensor,
    x_prev: torch.Tensor,
    t: int,
    t_prev: int,
    eta: float,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Per-sample log-density of a stored stochastic jump, (B,) with grad.

    The density is evaluated at the already-sampled ``x_prev``; gradients
    flow only through the predicted mean, the standard policy-gradient
    treatment of a Gaussian policy with fixed noise scale.
    """
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    if sigma <= 0.0:
        raise ValueError("the deterministic final jump has no log-density")
    eps_hat = model(x_t, t)
    mean = ddim_mean(x_t, t, t_prev, eps_hat, eta, schedule)
    dims = x_t.shape[1] * x_t.shape[2]
    quad = ((x_prev - mean) ** 2).sum(dim=(1, 2)) / (2.0 * sigma * sigma)
    return -quad - 0.5 * dims * (_LOG_2PI + 2.0 * math.log(sigma))


def rollout_group(
    model: SceneDenoiser,
    schedule: NoiseSchedule,
    capacity: int,
    group_size: int,
    rng: np.random.Generator,
    num_stride_steps: int,
    eta: float,
):
    """Sample ``group_size`` trajectories and accumulate their log-densities.

    Returns ``(final_states (B,N,D) numpy, logp_sums (B,) torch)`` where the
    log-density sum retains the autograd graph.  The trajectory itself is
    simulated outside the graph: each next state is built from the detached
    mean, so memory stays flat in the number of steps while the density
    terms keep their gradients.
    """
    grid = ddim_timesteps(schedule.num_steps, num_stride_steps)
    dims = model.config.state_dims
    x = torch.from_numpy(rng.standard_normal((group_size, capacity, dims)))
    logp = torch.zeros(group_size, dtype=torch.float64)
    for idx in range(len(grid) - 1, 0, -1):
        t, t_prev = grid[idx], grid[idx - 1]
        sigma = ddim_sigma(t, t_prev, eta, schedule)
        if t_prev == 0 or sigma == 0.0:
            with torch.no_grad():
                eps_hat = model(x, t)
                x = ddim_mean(x, t, t_prev, eps_hat, eta, schedule)
            continue
        with torch.no_grad():
            eps_hat = model(x, t)
            mean = ddim_mean(x, t, t_prev, eps_hat, eta, schedule)
            z = torch.from_numpy(rng.standard_normal(tuple(x.shape)))
            x_prev = mean + sigma * z
        logp = logp + transition_logprob(model, x, x_prev, t, t_prev, eta, schedule)
        x = x_prev
    return x.numpy(), logp


def decode_rollouts(states: np.ndarray, library) -> list:
    """Decode final rollout states into scenes, rotations projected."""
    return [decode(states[b], library, finalize_rotations=True) for b in range(states.shape[0])]


@dataclass(frozen=True)
class PostTrainConfig:
    steps: int
    capacity: int
    group_size: int = 8
    num_stride_steps: int = 120
    eta: float = 1.0
    anchor_weight: float = 150.0
    anchor_batch_size: int = 16
    lr: float = 1e-5
    seed: int = 0
    log_interval: int = 10
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be positive")
        if self.group_size < 2:
            raise ValueError("group_size must be at least 2 (advantages need a baseline)")
        if not 100 <= self.num_stride_steps <= 150:
            raise ValueError("num_stride_steps must lie in [100, 150]")
        if self.eta <= 0:
            raise ValueError("eta must be positive: deterministic rollouts have no policy density")
        if self.anchor_weight < 0:
            raise ValueError("anchor_weight must be nonnegative")
        if self.anchor_batch_size < 1 or self.lr <= 0:
            raise ValueError("bad anchor_batch_size or lr")


def posttrain(
    model: SceneDenoiser,
    schedule: NoiseSchedule,
    library,
    anchor_data: EncodedDataset,
    config: PostTrainConfig,
    out_dir: str,
    vocab,
    reward_fn=count_objects_reward,
) -> dict:
    """Optimise expected reward with an anchored policy gradient.

    Per update: one group rollout, group-whitened advantages, the
    REINFORCE term ``-mean(advantage * logp_sum)`` plus
    ``anchor_weight`` times the denoising loss on a fresh pretraining
    batch.  Any non-finite loss aborts immediately rather than training on
    garbage.  Writes ``metrics.jsonl`` and ``checkpoint.pt`` under
    ``out_dir``; returns the reward history.
    """
    if model.config.mode != "continuous":
        raise ValueError("reward post-training operates on a continuous-mode model")
    if schedule.num_steps < config.num_stride_steps:
        raise ValueError("schedule has fewer steps than the rollout stride")
    os.makedirs(out_dir, exist_ok=True)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
    reward_mean_history: list[float] = []
    reward_max_history: list[float] = []

    def checkpoint(step):
        save_checkpoint(
            checkpoint_path,
            model,
            vocab,
            schedule,
            library,
            extras={
                "step": step,
                "posttrain_config": asdict(config),
                "reward_mean_history": reward_mean_history,
                "reward_max_history": reward_max_history,
            },
        )

    with open(metrics_path, "w") as log:
        for step in range(config.steps):
            started = time.monotonic()
            roll_rng = np_rng(derive_seed(config.seed, 0, step))
            states, logp = rollout_group(
                model,
                schedule,
                config.capacity,
                config.group_size,
                roll_rng,
                config.num_stride_steps,
                config.eta,
            )
            scenes = decode_rollouts(states, library)
            rewards = np.array([reward_fn(s) for s in scenes], dtype=np.float64)
            advantages = torch.from_numpy(compute_advantages(rewards))
            pg_loss = -(advantages * logp).mean()

            if config.anchor_weight > 0:
                pick = np_rng(derive_seed(config.seed, 1, step))
                idx = pick.integers(0, len(anchor_data), size=config.anchor_batch_size)
                noise_rng = np_rng(derive_seed(config.seed, 2, step))
                clean = anchor_data.states[idx]
                t, noise, _ = draw_step_noise_continuous(
                    schedule, clean.shape[0], clean.shape[1], clean.shape[2], noise_rng, cond_drop=0.0
                )
                anchor = continuous_loss_terms(
                    model,
                    schedule,
                    torch.from_numpy(clean),
                    torch.from_numpy(noise),
                    torch.from_numpy(t),
                    None,
                    None,
                ).total
            else:
                anchor = torch.zeros((), dtype=torch.float64)

            loss = pg_loss + config.anchor_weight * anchor
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss at step {step}: aborting post-training")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()

            reward_mean_history.append(float(rewards.mean()))
            reward_max_history.append(float(rewards.max()))
            if (step + 1) % config.log_interval == 0 or step + 1 == config.steps:
                log.write(
                    json.dumps(
                        {
                            "step": step + 1,
                            "reward_mean": float(rewards.mean()),
                            "reward_max": float(rewards.max()),
                            "pg_loss": float(pg_loss.detach()),
                            "anchor_loss": float(anchor.detach()),
                            "seconds": round(time.monotonic() - started, 4),
                        }
                    )
                    + "\n"
                )
                log.flush()
            if (step + 1) % config.checkpoint_interval == 0:
                checkpoint(step + 1)
    checkpoint(config.steps)
    return {
        "steps": config.steps,
        "reward_mean_history": reward_mean_history,
        "reward_max_history": reward_max_history,
        "checkpoint": checkpoint_path,
        "metrics": metrics_path,
    }
