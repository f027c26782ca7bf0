"""Mixed discrete-continuous diffusion: schedule, steps, and sampling loops.

Continuous pose dimensions follow standard Gaussian diffusion with a noise
predictor; categorical dimensions follow an absorbing-free uniform-kernel
discrete diffusion whose reverse step plugs the predicted clean-category
distribution into the closed-form posterior.  Both share one variance
schedule, indexed so that step ``t`` runs 1..T with ``alpha_bar[0] == 1``.

Step formulas are written as scalar-coefficient arithmetic on the state, so
they work unchanged on numpy arrays and torch tensors; the reinforcement
fine-tuning path relies on this to recompute step means under autograd.

Sampling loops draw every random number from one per-scene generator seeded
by ``derive_seed(seed, scene_index)``, which makes each sampled scene a pure
function of ``(seed, scene_index)`` — independent of how many scenes share
the batch.  Denoiser callables receive whole batches and must be per-scene
deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from scenediff.rng import derive_seed, np_rng

DEFAULT_NUM_STEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule with cumulative products.

    ``betas[t]`` is the step-``t`` variance for t in 1..T (index 0 unused),
    ``alpha_bar[t]`` the cumulative signal fraction with ``alpha_bar[0] = 1``.
    """

    num_steps: int = DEFAULT_NUM_STEPS
    beta_start: float = DEFAULT_BETA_START
    beta_end: float = DEFAULT_BETA_END
    betas: np.ndarray = field(init=False, repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t_count = self.num_steps
        if t_count < 1:
            raise ValueError("schedule needs at least one step")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError("betas must satisfy 0 < start <= end < 1")
        betas = np.zeros(t_count + 1, dtype=np.float64)
        if t_count == 1:
            betas[1] = self.beta_start
        else:
            betas[1:] = np.linspace(self.beta_start, self.beta_end, t_count)
        alphas = 1.0 - betas
        alpha_bar = np.cumprod(alphas)
        alpha_bar[0] = 1.0
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def check_terminal(self, threshold: float = 5e-5) -> None:
        """Fail if the chain does not end close enough to pure noise."""
        if self.alpha_bar[self.num_steps] >= threshold:
            raise ValueError(
                f"terminal signal fraction {self.alpha_bar[self.num_steps]:.3g} "
                f"is not below {threshold:g}; increase the number of steps"
            )

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.num_steps:
            raise ValueError(f"step {t} outside 1..{self.num_steps}")


# ---------------------------------------------------------------------------
# Forward (corruption) processes
# ---------------------------------------------------------------------------


def q_sample_continuous(x0, t: int, noise, schedule: NoiseSchedule):
    """Draw x_t | x_0 given pre-sampled standard normal ``noise``."""
    schedule._check_t(t)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def q_sample_discrete(
    c0: np.ndarray, t: int, rng: np.random.Generator, num_categories: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Draw c_t | c_0 under the uniform-kernel corruption.

    A category survives with probability ``alpha_bar + (1 - alpha_bar)/K``
    and otherwise resamples uniformly among the other K-1 categories.
    """
    schedule._check_t(t)
    c0 = np.asarray(c0, dtype=np.int64)
    k_total = num_categories
    ab = float(schedule.alpha_bar[t])
    stay = ab + (1.0 - ab) / k_total
    keep = rng.random(c0.shape) < stay
    alt = rng.integers(0, k_total - 1, size=c0.shape)
    alt = np.where(alt >= c0, alt + 1, alt)  # uniform over categories != c0
    return np.where(keep, c0, alt)


def transition_row(j: np.ndarray, alpha_step: float, num_categories: int) -> np.ndarray:
    """Single (possibly strided) transition probabilities P(c_t = j | c_prev = k).

    Returns an array over k, shaped ``j.shape + (K,)``.
    """
    j = np.asarray(j, dtype=np.int64)
    k_total = num_categories
    out = np.full(j.shape + (k_total,), (1.0 - alpha_step) / k_total, dtype=np.float64)
    idx = np.indices(j.shape, sparse=True)
    out[(*idx, j)] += alpha_step
    return out


def discrete_posterior(
    p0: np.ndarray,
    c_t: np.ndarray,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Reverse-step category distribution q(c_{t_prev} | c_t, p0).

    ``p0`` is a distribution over clean categories (last axis K); plugging in
    a one-hot gives the exact forward posterior, plugging in a model's
    softmax gives the reverse sampling distribution.  Works for strided
    jumps t -> t_prev with 0 <= t_prev < t.
    """
    schedule._check_t(t)
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got {t_prev} >= {t}")
    p0 = np.asarray(p0, dtype=np.float64)
    k_total = p0.shape[-1]
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    alpha_step = ab_t / ab_prev
    like = transition_row(c_t, alpha_step, k_total)  # P(c_t | c_prev = k)
    prior = ab_prev * p0 + (1.0 - ab_prev) / k_total  # P(c_prev = k | p0)
    post = like * prior
    return post / post.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Reverse (denoising) steps — numpy/torch generic
# ---------------------------------------------------------------------------


def ancestral_mean(x_t, t: int, eps_hat, schedule: NoiseSchedule):
    """Posterior mean for the single-step reverse transition t -> t-1."""
    schedule._check_t(t)
    beta = float(schedule.betas[t])
    ab = float(schedule.alpha_bar[t])
    inv_sqrt_alpha = 1.0 / math.sqrt(float(schedule.alphas[t]))
    return inv_sqrt_alpha * (x_t - (beta / math.sqrt(1.0 - ab)) * eps_hat)


def ancestral_sigma(t: int, schedule: NoiseSchedule) -> float:
    """Posterior standard deviation for the reverse transition t -> t-1."""
    schedule._check_t(t)
    beta = float(schedule.betas[t])
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t - 1])
    return math.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t))


def ancestral_step(x_t, t: int, eps_hat, z, schedule: NoiseSchedule):
    """One reverse step t -> t-1; ``z`` must be zeros at t == 1."""
    mean = ancestral_mean(x_t, t, eps_hat, schedule)
    if t == 1:
        return mean
    return mean + ancestral_sigma(t, schedule) * z


def predict_x0(x_t, t: int, eps_hat, schedule: NoiseSchedule):
    """Invert the forward marginal to estimate the clean state."""
    schedule._check_t(t)
    ab = float(schedule.alpha_bar[t])
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_sigma(t: int, t_prev: int, eta: float, schedule: NoiseSchedule) -> float:
    """Noise scale of the (possibly strided) jump t -> t_prev."""
    schedule._check_t(t)
    ab_t = float(schedule.alpha_bar[t])
    ab_prev = float(schedule.alpha_bar[t_prev])
    return (
        eta
        * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t))
        * math.sqrt(1.0 - ab_t / ab_prev)
    )


def ddim_mean(x_t, t: int, t_prev: int, eps_hat, eta: float, schedule: NoiseSchedule):
    """Mean of the strided reverse jump t -> t_prev.

    At ``t_prev == 0`` the jump is deterministic (sigma is 0) and the mean is
    exactly the predicted clean state.
    """
    if not 0 <= t_prev < t:
        raise ValueError(f"need 0 <= t_prev < t, got {t_prev} >= {t}")
    ab_prev = float(schedule.alpha_bar[t_prev])
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    x0_hat = predict_x0(x_t, t, eps_hat, schedule)
    direction = math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0))
    return math.sqrt(ab_prev) * x0_hat + direction * eps_hat


def ddim_step(x_t, t: int, t_prev: int, eps_hat, eta: float, z, schedule: NoiseSchedule):
    """One strided reverse jump t -> t_prev with noise scale ``eta``."""
    mean = ddim_mean(x_t, t, t_prev, eps_hat, eta, schedule)
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    if sigma == 0.0:
        return mean
    return mean + sigma * z


def ddim_timesteps(num_steps: int, num_stride_steps: int) -> list[int]:
    """Ascending grid ``floor(i * T / S)`` for i = 0..S (0 and T included)."""
    if not 1 <= num_stride_steps <= num_steps:
        raise ValueError(f"need 1 <= stride steps <= {num_steps}")
    grid = sorted({(i * num_steps) // num_stride_steps for i in range(num_stride_steps + 1)})
    if grid[0] != 0 or grid[-1] != num_steps:
        raise ValueError("stride grid must span 0..T")
    return grid


def cfg_combine(cond, uncond, guidance_weight: float):
    """Classifier-free guidance: extrapolate conditional past unconditional.

    Weight 0 returns the conditional prediction unchanged and weight -1 the
    unconditional one, bit for bit.
    """
    if guidance_weight == 0.0:
        return cond
    if guidance_weight == -1.0:
        return uncond
    return (1.0 + guidance_weight) * cond - guidance_weight * uncond


# ---------------------------------------------------------------------------
# Sampling loops
# ---------------------------------------------------------------------------


def _categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """One draw per row of ``probs`` (N, K) using a single uniform each."""
    cdf = np.cumsum(probs, axis=-1)
    cdf /= cdf[..., -1:]
    u = rng.random(probs.shape[:-1] + (1,))
    return np.argmax(cdf >= u, axis=-1).astype(np.int64)


def _resolve_grid(schedule: NoiseSchedule, method: str, num_stride_steps: int | None) -> list[int]:
    if method == "ancestral":
        if num_stride_steps not in (None, schedule.num_steps):
            raise ValueError("ancestral sampling always uses every step")
        return list(range(schedule.num_steps + 1))
    if method == "ddim":
        steps = num_stride_steps if num_stride_steps is not None else schedule.num_steps
        return ddim_timesteps(schedule.num_steps, steps)
    raise ValueError(f"unknown sampling method {method!r}")


def _continuous_transition(x, t, t_prev, eps_hat, rng, method, eta, schedule):
    if method == "ancestral":
        z = rng.standard_normal(x.shape) if t > 1 else np.zeros_like(x)
        return ancestral_step(x, t, eps_hat, z, schedule)
    sigma = ddim_sigma(t, t_prev, eta, schedule)
    z = rng.standard_normal(x.shape) if sigma > 0.0 else np.zeros_like(x)
    return ddim_step(x, t, t_prev, eps_hat, eta, z, schedule)


def sample_mixed(
    denoise,
    schedule: NoiseSchedule,
    capacity: int,
    num_categories: int,
    seed: int,
    num_scenes: int = 1,
    method: str = "ancestral",
    num_stride_steps: int | None = None,
    eta: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generate scenes from pure noise under a mixed-state denoiser.

    ``denoise(categories (B,N) int64, pose (B,N,12), t) -> (logits (B,N,K),
    eps_hat (B,N,12))``.  Returns final ``(categories, pose)`` arrays.
    """
    grid = _resolve_grid(schedule, method, num_stride_steps)
    rngs = [np_rng(derive_seed(seed, i)) for i in range(num_scenes)]
    pose = np.stack([r.standard_normal((capacity, 12)) for r in rngs])
    cats = np.stack([r.integers(0, num_categories, size=capacity) for r in rngs])
    for idx in range(len(grid) - 1, 0, -1):
        t, t_prev = grid[idx], grid[idx - 1]
        logits, eps_hat = denoise(cats, pose, t)
        p0 = _softmax(logits)
        for b, rng in enumerate(rngs):
            pose[b] = _continuous_transition(pose[b], t, t_prev, eps_hat[b], rng, method, eta, schedule)
            post = discrete_posterior(p0[b], cats[b], t, t_prev, schedule)
            cats[b] = _categorical(rng, post)
    return cats, pose


def inpaint_mixed(
    denoise,
    schedule: NoiseSchedule,
    known_categories: np.ndarray,
    known_pose: np.ndarray,
    regen_category: np.ndarray,
    regen_pose: np.ndarray,
    num_categories: int,
    seed: int,
    num_scenes: int = 1,
    method: str = "ancestral",
    num_stride_steps: int | None = None,
    eta: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Regenerate only the masked slots, clamping the rest along the way.

    After every transition the non-regenerated dimensions are replaced by a
    freshly noised version of the known clean values at the new timestep, so
    the constrained dimensions stay exactly on the forward marginal; at the
    final step they equal the known values bit for bit.
    """
    known_categories = np.asarray(known_categories, dtype=np.int64)
    known_pose = np.asarray(known_pose, dtype=np.float64)
    regen_category = np.asarray(regen_category, dtype=bool)
    regen_pose = np.asarray(regen_pose, dtype=bool)
    capacity = known_categories.shape[0]
    grid = _resolve_grid(schedule, method, num_stride_steps)
    rngs = [np_rng(derive_seed(seed, i)) for i in range(num_scenes)]

    def clamp(b: int, rng: np.random.Generator, t: int):
        if t == 0:
            pose[b][~regen_pose] = known_pose[~regen_pose]
            cats[b][~regen_category] = known_categories[~regen_category]
            return
        noise = rng.standard_normal(known_pose.shape)
        noised_pose = q_sample_continuous(known_pose, t, noise, schedule)
        pose[b][~regen_pose] = noised_pose[~regen_pose]
        noised_cats = q_sample_discrete(known_categories, t, rng, num_categories, schedule)
        cats[b][~regen_category] = noised_cats[~regen_category]

    pose = np.stack([r.standard_normal((capacity, 12)) for r in rngs])
    cats = np.stack([r.integers(0, num_categories, size=capacity) for r in rngs])
    for b, rng in enumerate(rngs):
        clamp(b, rng, schedule.num_steps)
    for idx in range(len(grid) - 1, 0, -1):
        t, t_prev = grid[idx], grid[idx - 1]
        logits, eps_hat = denoise(cats, pose, t)
        p0 = _softmax(logits)
        for b, rng in enumerate(rngs):
            pose[b] = _continuous_transition(pose[b], t, t_prev, eps_hat[b], rng, method, eta, schedule)
            post = discrete_posterior(p0[b], cats[b], t, t_prev, schedule)
            cats[b] = _categorical(rng, post)
            clamp(b, rng, t_prev)
    return cats, pose


def sample_continuous(
    denoise,
    schedule: NoiseSchedule,
    capacity: int,
    state_dims: int,
    seed: int,
    num_scenes: int = 1,
    method: str = "ancestral",
    num_stride_steps: int | None = None,
    eta: float = 0.0,
) -> np.ndarray:
    """Generate flat continuous states; ``denoise(x (B,N,D), t) -> eps_hat``."""
    grid = _resolve_grid(schedule, method, num_stride_steps)
    rngs = [np_rng(derive_seed(seed, i)) for i in range(num_scenes)]
    x = np.stack([r.standard_normal((capacity, state_dims)) for r in rngs])
    for idx in range(len(grid) - 1, 0, -1):
        t, t_prev = grid[idx], grid[idx - 1]
        eps_hat = denoise(x, t)
        for b, rng in enumerate(rngs):
            x[b] = _continuous_transition(x[b], t, t_prev, eps_hat[b], rng, method, eta, schedule)
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)
