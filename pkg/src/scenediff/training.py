"""Training loop, losses, LR schedule, EMA, and deterministic batch mixing.

All per-step stochasticity (timesteps, corruption noise, prompt dropout,
dataset choice) is a pure function of ``(seed, step)``, so training resumes
bit-exactly from a checkpoint without serializing generator state.

The mixed loss combines noise-prediction MSE on translations and rotations
with the variational bound of the discrete chain (a KL between the exact
forward posterior and the model's plugged-in posterior, or the negative
posterior log-likelihood at the final step) plus a small cross-entropy on
the clean-category prediction.  In continuous mode the whole state,
one-hot category block included, is scored by noise-prediction MSE.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from scenediff.dataset import SceneRecord
from scenediff.diffusion import NoiseSchedule, q_sample_continuous, q_sample_discrete
from scenediff.model import ModelConfig, SceneDenoiser, Vocab, mixed_state, save_checkpoint
from scenediff.rng import derive_seed, np_rng
from scenediff.scene import encode, encode_split

DEFAULT_LR = 2e-4
DEFAULT_WEIGHT_DECAY = 1e-3
DEFAULT_WARMUP_STEPS = 5000
DEFAULT_EMA_DECAY = 0.9999
DEFAULT_COND_DROP = 0.10
DEFAULT_CE_WEIGHT = 0.01


# ---------------------------------------------------------------------------
# Learning-rate schedule
# ---------------------------------------------------------------------------


def lr_at(step: int, base_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class LossParts:
    total: torch.Tensor
    mse_translation: torch.Tensor
    mse_rotation: torch.Tensor
    mse_category: torch.Tensor | None = None
    discrete_vb: torch.Tensor | None = None
    cross_entropy: torch.Tensor | None = None

    def scalars(self) -> dict:
        out = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if value is not None:
                out[field.name] = float(value.detach())
        return out


def _torch_posterior(p0: torch.Tensor, c_t: torch.Tensor, t: torch.Tensor, schedule: NoiseSchedule):
    """Reverse-step posterior q(c_{t-1} | c_t, p0) with per-sample timesteps.

    Differentiable in ``p0``; t == 1 uses the exact clean prior (the result
    is then the final-step predictive distribution).
    """
    k_total = p0.shape[-1]
    alpha_bar = torch.from_numpy(schedule.alpha_bar)
    ab_t = alpha_bar[t][:, None, None]
    ab_prev = alpha_bar[t - 1][:, None, None]
    alpha_step = ab_t / ab_prev
    like = torch.full_like(p0, 1.0 / k_total) * (1.0 - alpha_step)
    like = like + alpha_step * torch.nn.functional.one_hot(c_t, k_total).to(p0.dtype)
    prior = ab_prev * p0 + (1.0 - ab_prev) / k_total
    post = like * prior
    return post / post.sum(dim=-1, keepdim=True)


def mixed_loss_terms(
    model: SceneDenoiser,
    schedule: NoiseSchedule,
    clean_categories: torch.Tensor,
    clean_pose: torch.Tensor,
    noisy_categories: torch.Tensor,
    pose_noise: torch.Tensor,
    t: torch.Tensor,
    prompt_ids: torch.Tensor | None,
    null_mask: torch.Tensor | None,
    ce_weight: float = DEFAULT_CE_WEIGHT,
) -> LossParts:
    """Mixed-mode loss on a fully materialized batch (all draws supplied)."""
    k_total = model.config.num_categories
    alpha_bar = torch.from_numpy(schedule.alpha_bar)
    ab = alpha_bar[t][:, None, None]
    noisy_pose = torch.sqrt(ab) * clean_pose + torch.sqrt(1.0 - ab) * pose_noise
    state = mixed_state(noisy_categories, noisy_pose, k_total)
    logits, eps_hat = model(state, t, prompt_ids=prompt_ids, null_mask=null_mask)

    mse_translation = ((eps_hat[..., :3] - pose_noise[..., :3]) ** 2).mean()
    mse_rotation = ((eps_hat[..., 3:] - pose_noise[..., 3:]) ** 2).mean()

    p0 = torch.softmax(logits, dim=-1)
    onehot_clean = torch.nn.functional.one_hot(clean_categories, k_total).to(p0.dtype)
    q_post = _torch_posterior(onehot_clean, noisy_categories, t, schedule)
    p_post = _torch_posterior(p0, noisy_categories, t, schedule)
    log_p_post = torch.log(p_post.clamp_min(1e-30))
    kl = (q_post * (torch.log(q_post.clamp_min(1e-30)) - log_p_post)).sum(-1)
    nll_final = -log_p_post.gather(-1, clean_categories[..., None]).squeeze(-1)
    per_slot = torch.where((t == 1)[:, None], nll_final, kl)
    discrete_vb = per_slot.mean()

    cross_entropy = torch.nn.functional.cross_entropy(
        logits.reshape(-1, k_total), clean_categories.reshape(-1)
    )
    total = mse_translation + mse_rotation + discrete_vb + ce_weight * cross_entropy
    return LossParts(
        total=total,
        mse_translation=mse_translation,
        mse_rotation=mse_rotation,
        discrete_vb=discrete_vb,
        cross_entropy=cross_entropy,
    )


def continuous_loss_terms(
    model: SceneDenoiser,
    schedule: NoiseSchedule,
    clean_state: torch.Tensor,
    noise: torch.Tensor,
    t: torch.Tensor,
    prompt_ids: torch.Tensor | None,
    null_mask: torch.Tensor | None,
) -> LossParts:
    """Continuous-mode loss: noise-prediction MSE over every state block."""
    k_total = model.config.num_categories
    alpha_bar = torch.from_numpy(schedule.alpha_bar)
    ab = alpha_bar[t][:, None, None]
    noisy = torch.sqrt(ab) * clean_state + torch.sqrt(1.0 - ab) * noise
    eps_hat = model(noisy, t, prompt_ids=prompt_ids, null_mask=null_mask)
    mse_category = ((eps_hat[..., :k_total] - noise[..., :k_total]) ** 2).mean()
    mse_translation = ((eps_hat[..., k_total : k_total + 3] - noise[..., k_total : k_total + 3]) ** 2).mean()
    mse_rotation = ((eps_hat[..., k_total + 3 :] - noise[..., k_total + 3 :]) ** 2).mean()
    total = mse_category + mse_translation + mse_rotation
    return LossParts(
        total=total,
        mse_translation=mse_translation,
        mse_rotation=mse_rotation,
        mse_category=mse_category,
    )


def draw_step_noise(
    schedule: NoiseSchedule,
    clean_categories: np.ndarray,
    num_categories: int,
    rng: np.random.Generator,
    cond_drop: float,
):
    """All stochastic ingredients of one mixed-mode training step."""
    batch, capacity = clean_categories.shape
    t = rng.integers(1, schedule.num_steps + 1, size=batch)
    pose_noise = rng.standard_normal((batch, capacity, 12))
    noisy_cats = np.stack(
        [
            q_sample_discrete(clean_categories[b], int(t[b]), rng, num_categories, schedule)
            for b in range(batch)
        ]
    )
    null_mask = rng.random(batch) < cond_drop
    return t, pose_noise, noisy_cats, null_mask


def draw_step_noise_continuous(
    schedule: NoiseSchedule,
    batch: int,
    capacity: int,
    state_dims: int,
    rng: np.random.Generator,
    cond_drop: float,
):
    t = rng.integers(1, schedule.num_steps + 1, size=batch)
    noise = rng.standard_normal((batch, capacity, state_dims))
    null_mask = rng.random(batch) < cond_drop
    return t, noise, null_mask


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------


def init_ema(model: SceneDenoiser) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def ema_update(shadow: dict[str, torch.Tensor], model: SceneDenoiser, decay: float) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            shadow[name].mul_(decay).add_(p, alpha=1.0 - decay)


@contextmanager
def ema_weights(model: SceneDenoiser, shadow: dict[str, torch.Tensor]):
    """Temporarily run the model with its averaged weights."""
    backup = {name: p.detach().clone() for name, p in model.named_parameters()}
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(shadow[name])
    try:
        yield model
    finally:
        with torch.no_grad():
            for name, p in model.named_parameters():
                p.copy_(backup[name])


# ---------------------------------------------------------------------------
# Batch mixing over several datasets
# ---------------------------------------------------------------------------


class MixedBatchIterator:
    """Uniformly alternates whole batches between datasets.

    Every batch comes from a single dataset, chosen uniformly at random per
    draw; each dataset is consumed in epoch-reshuffled order.  The iterator
    state is three integers per dataset plus a draw counter, and every draw
    is a pure function of ``(seed, draw)``, so training can resume exactly.
    """

    def __init__(self, sizes: list[int], batch_size: int, seed: int):
        if not sizes or any(s <= 0 for s in sizes):
            raise ValueError("need at least one nonempty dataset")
        if batch_size <= 0:
            raise ValueError("batch size must be positive")
        self.sizes = list(sizes)
        self.batch_size = batch_size
        self.seed = seed
        self.draw = 0
        self.epochs = [0] * len(sizes)
        self.positions = [0] * len(sizes)
        self._orders = [self._order(i) for i in range(len(sizes))]

    def _order(self, ds: int) -> np.ndarray:
        return np_rng(derive_seed(self.seed, 1, ds, self.epochs[ds])).permutation(self.sizes[ds])

    def state(self) -> dict:
        return {"draw": self.draw, "epochs": list(self.epochs), "positions": list(self.positions)}

    def load_state(self, state: dict) -> None:
        self.draw = int(state["draw"])
        self.epochs = [int(e) for e in state["epochs"]]
        self.positions = [int(p) for p in state["positions"]]
        self._orders = [self._order(i) for i in range(len(self.sizes))]

    def __next__(self) -> tuple[int, np.ndarray]:
        ds = int(np_rng(derive_seed(self.seed, 0, self.draw)).integers(len(self.sizes)))
        self.draw += 1
        picked = []
        while len(picked) < self.batch_size:
            if self.positions[ds] == self.sizes[ds]:
                self.epochs[ds] += 1
                self.positions[ds] = 0
                self._orders[ds] = self._order(ds)
            picked.append(int(self._orders[ds][self.positions[ds]]))
            self.positions[ds] += 1
        return ds, np.asarray(picked, dtype=np.int64)

    def __iter__(self):
        return self


# ---------------------------------------------------------------------------
# Dataset encoding
# ---------------------------------------------------------------------------


@dataclass
class EncodedDataset:
    categories: np.ndarray  # (M, N) int64
    pose: np.ndarray  # (M, N, 12) float64
    states: np.ndarray  # (M, N, K+12) float64 — used in continuous mode
    prompt_ids: np.ndarray  # (M, L) int64

    @classmethod
    def from_records(cls, records: list[SceneRecord], vocab: Vocab, max_prompt_len: int):
        cats, pose, states, prompts = [], [], [], []
        for rec in records:
            c, p = encode_split(rec.scene)
            cats.append(c)
            pose.append(p)
            states.append(encode(rec.scene))
            prompts.append(vocab.encode(rec.prompt, max_prompt_len))
        return cls(
            categories=np.stack(cats),
            pose=np.stack(pose),
            states=np.stack(states),
            prompt_ids=np.stack(prompts),
        )

    def __len__(self) -> int:
        return self.categories.shape[0]


# ---------------------------------------------------------------------------
# Train loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int = 16
    lr: float = DEFAULT_LR
    warmup_steps: int = DEFAULT_WARMUP_STEPS
    lr_total_steps: int | None = None  # cosine horizon; defaults to ``steps``
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    ema_decay: float = DEFAULT_EMA_DECAY
    cond_drop: float = DEFAULT_COND_DROP
    ce_weight: float = DEFAULT_CE_WEIGHT
    seed: int = 0
    log_interval: int = 50
    checkpoint_interval: int = 2000


def make_optimizer(model: SceneDenoiser, config: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )


def train(
    model: SceneDenoiser,
    datasets: list[list[SceneRecord]],
    vocab: Vocab,
    schedule: NoiseSchedule,
    library,
    config: TrainConfig,
    out_dir: str,
    resume_extras: dict | None = None,
) -> dict:
    """Run the training loop, logging metrics and checkpointing periodically.

    Returns a summary dict with file locations and the final loss.  Pass the
    ``extras`` of a saved checkpoint as ``resume_extras`` to continue a run
    bit-exactly (the model must already hold that checkpoint's weights).
    """
    os.makedirs(out_dir, exist_ok=True)
    encoded = [EncodedDataset.from_records(ds, vocab, model.config.max_prompt_len) for ds in datasets]
    iterator = MixedBatchIterator([len(e) for e in encoded], config.batch_size, config.seed)
    optimizer = make_optimizer(model, config)
    shadow = init_ema(model)
    start_step = 0
    if resume_extras is not None:
        optimizer.load_state_dict(resume_extras["optimizer"])
        shadow = {k: v.clone() for k, v in resume_extras["ema"].items()}
        iterator.load_state(resume_extras["iterator"])
        start_step = int(resume_extras["step"])

    total_lr_steps = config.lr_total_steps if config.lr_total_steps is not None else config.steps
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    checkpoint_path = os.path.join(out_dir, "checkpoint.pt")
    mode = model.config.mode
    k_total = model.config.num_categories
    last_parts: dict = {}
    t_start = time.monotonic()

    def write_checkpoint(step: int) -> None:
        extras = {
            "step": step,
            "optimizer": optimizer.state_dict(),
            "ema": shadow,
            "iterator": iterator.state(),
            "train_config": dataclasses.asdict(config),
        }
        save_checkpoint(checkpoint_path, model, vocab, schedule, library, extras=extras)

    log_file = open(metrics_path, "a" if start_step > 0 else "w", encoding="utf-8")
    try:
        for step in range(start_step, config.steps):
            ds_idx, rows = next(iterator)
            data = encoded[ds_idx]
            rng = np_rng(derive_seed(config.seed, 2, step))
            prompt_ids = torch.from_numpy(data.prompt_ids[rows])
            if mode == "mixed":
                cats0 = data.categories[rows]
                t, pose_noise, noisy_cats, null_mask = draw_step_noise(
                    schedule, cats0, k_total, rng, config.cond_drop
                )
                parts = mixed_loss_terms(
                    model,
                    schedule,
                    torch.from_numpy(cats0),
                    torch.from_numpy(data.pose[rows]),
                    torch.from_numpy(noisy_cats),
                    torch.from_numpy(pose_noise),
                    torch.from_numpy(t),
                    prompt_ids,
                    torch.from_numpy(null_mask),
                    ce_weight=config.ce_weight,
                )
            else:
                states0 = data.states[rows]
                t, noise, null_mask = draw_step_noise_continuous(
                    schedule, len(rows), states0.shape[1], states0.shape[2], rng, config.cond_drop
                )
                parts = continuous_loss_terms(
                    model,
                    schedule,
                    torch.from_numpy(states0),
                    torch.from_numpy(noise),
                    torch.from_numpy(t),
                    prompt_ids,
                    torch.from_numpy(null_mask),
                )
            optimizer.zero_grad(set_to_none=True)
            parts.total.backward()
            current_lr = lr_at(step, config.lr, config.warmup_steps, total_lr_steps)
            for group in optimizer.param_groups:
                group["lr"] = current_lr
            optimizer.step()
            ema_update(shadow, model, config.ema_decay)

            last_parts = parts.scalars()
            if (step + 1) % config.log_interval == 0 or step + 1 == config.steps:
                line = {
                    "step": step + 1,
                    "lr": current_lr,
                    "dataset": ds_idx,
                    "seconds": round(time.monotonic() - t_start, 3),
                    **last_parts,
                }
                log_file.write(json.dumps(line) + "\n")
                log_file.flush()
            if (step + 1) % config.checkpoint_interval == 0 or step + 1 == config.steps:
                write_checkpoint(step + 1)
    finally:
        log_file.close()

    return {
        "steps": config.steps,
        "final_loss": last_parts.get("total"),
        "checkpoint": checkpoint_path,
        "metrics": metrics_path,
    }
