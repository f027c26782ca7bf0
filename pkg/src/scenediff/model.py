"""Transformer denoiser over object slots and prompt tokens.

The scene is a *set* of slot tokens: they carry no positional encoding, and
every operation on them (attention, per-token projections, normalization) is
permutation-equivariant, so relabeling slots permutes the outputs exactly.
Prompt tokens do carry learned positions.  Two double-stream blocks process
scene and prompt with separate weights but joint attention, then
single-stream blocks process the concatenated sequence.

Conditioning on the timestep uses modulation: each block applies
shift/scale/gate parameters computed from the timestep embedding, and the
projections producing them are zero-initialized, as are the output heads —
a freshly initialized model is the identity map with exactly zero outputs,
which keeps early training stable.

Unconditional generation uses a dedicated learned pseudo-prompt parameter
instead of embedding any tokens, so a fully prompt-dropped batch routes no
gradient at all into the vocabulary embedding.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from scenediff.assets import AssetLibrary, load_library
from scenediff.diffusion import NoiseSchedule
from scenediff.scene import POSE_DIMS

PAD_ID = 0
UNK_ID = 1

CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# Vocabulary and tokenizer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:2] != ("<pad>", "<unk>"):
            raise ValueError("vocabulary must start with <pad>, <unk>")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary has duplicate tokens")
        object.__setattr__(self, "_ids", {tok: i for i, tok in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, text: str, max_len: int) -> np.ndarray:
        """Token ids padded/truncated to ``max_len``; unknown words map to <unk>."""
        ids = [self._ids.get(w, UNK_ID) for w in split_words(text)]
        ids = ids[:max_len]
        ids += [PAD_ID] * (max_len - len(ids))
        return np.asarray(ids, dtype=np.int64)


def split_words(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is dropped."""
    return re.findall(r"[a-z0-9]+", text.lower())


_TEMPLATE_WORDS = (
    "a an and empty is left object objects of on scene the to top with inside".split()
)
_WORD_NUMBERS = "zero one two three four five six seven eight nine ten".split()
_ORDINAL_WORDS = (
    "first second third fourth fifth sixth seventh eighth ninth tenth "
    "eleventh twelfth thirteenth fourteenth fifteenth sixteenth".split()
)


def build_vocab(library: AssetLibrary, max_count: int = 32) -> Vocab:
    """Deterministic vocabulary covering every string the annotators emit."""
    words = set(_TEMPLATE_WORDS) | set(_WORD_NUMBERS) | set(_ORDINAL_WORDS)
    words |= {str(n) for n in range(max_count + 1)}
    for cat in range(1, library.num_categories):
        name = library.name_of(cat)
        words.update(split_words(name))
        from scenediff.grammar import pluralize

        words.update(split_words(pluralize(name)))
    return Vocab(tokens=("<pad>", "<unk>", *sorted(words)))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    mode: str  # "mixed" or "continuous"
    num_categories: int
    vocab_size: int
    d_model: int = 128
    num_heads: int = 4
    num_double_blocks: int = 2
    num_single_blocks: int = 4
    max_prompt_len: int = 32

    def __post_init__(self):
        if self.mode not in ("mixed", "continuous"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.d_model % self.num_heads != 0:
            raise ValueError("d_model must divide evenly into heads")
        if self.d_model % 2 != 0:
            raise ValueError("d_model must be even for the timestep embedding")
        if self.num_categories < 2:
            raise ValueError("need at least one real category")

    @property
    def state_dims(self) -> int:
        return self.num_categories + POSE_DIMS


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features with frequencies geometric from 1 down to 1e-4."""
    half = dim // 2
    exponents = torch.linspace(0.0, -4.0, half, dtype=torch.float64)
    freqs = torch.pow(10.0, exponents)
    angles = t.to(torch.float64)[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


# ---------------------------------------------------------------------------
# Blocks
# ---------------------------------------------------------------------------


def _attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Multi-head attention on (B, T, H, Dh) tensors, computed explicitly."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = torch.einsum("bqhd,bkhd->bhqk", q, k) * scale
    weights = torch.softmax(logits, dim=-1)
    return torch.einsum("bhqk,bkhd->bqhd", weights, v)


def _split_heads(x: torch.Tensor, num_heads: int) -> torch.Tensor:
    b, t, d = x.shape
    return x.view(b, t, num_heads, d // num_heads)


def _merge_heads(x: torch.Tensor) -> torch.Tensor:
    b, t, h, dh = x.shape
    return x.reshape(b, t, h * dh)


class _Stream(nn.Module):
    """Per-stream weights of a double block: modulation, attention, MLP."""

    def __init__(self, d_model: int):
        super().__init__()
        self.modulation = nn.Linear(d_model, 6 * d_model)
        self.norm_attn = nn.LayerNorm(d_model, elementwise_affine=False)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)
        self.norm_mlp = nn.LayerNorm(d_model, elementwise_affine=False)
        self.mlp = nn.Sequential(
            nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model)
        )


class DoubleStreamBlock(nn.Module):
    """Scene and prompt streams with separate weights and joint attention."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scene = _Stream(d_model)
        self.prompt = _Stream(d_model)

    def forward(self, x_scene, x_prompt, t_emb):
        mods = {}
        for name, stream, x in (("scene", self.scene, x_scene), ("prompt", self.prompt, x_prompt)):
            shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = stream.modulation(
                torch.nn.functional.silu(t_emb)
            ).chunk(6, dim=-1)
            h = stream.norm_attn(x) * (1.0 + scale_a[:, None]) + shift_a[:, None]
            qkv = stream.qkv(h).chunk(3, dim=-1)
            mods[name] = (qkv, gate_a[:, None], shift_m[:, None], scale_m[:, None], gate_m[:, None])

        n_scene = x_scene.shape[1]
        q = torch.cat(
            [_split_heads(mods["scene"][0][0], self.num_heads), _split_heads(mods["prompt"][0][0], self.num_heads)],
            dim=1,
        )
        k = torch.cat(
            [_split_heads(mods["scene"][0][1], self.num_heads), _split_heads(mods["prompt"][0][1], self.num_heads)],
            dim=1,
        )
        v = torch.cat(
            [_split_heads(mods["scene"][0][2], self.num_heads), _split_heads(mods["prompt"][0][2], self.num_heads)],
            dim=1,
        )
        joint = _merge_heads(_attention(q, k, v))
        attn_scene, attn_prompt = joint[:, :n_scene], joint[:, n_scene:]

        out = []
        for name, stream, x, attn in (
            ("scene", self.scene, x_scene, attn_scene),
            ("prompt", self.prompt, x_prompt, attn_prompt),
        ):
            _, gate_a, shift_m, scale_m, gate_m = mods[name]
            x = x + gate_a * stream.proj(attn)
            h = stream.norm_mlp(x) * (1.0 + scale_m) + shift_m
            x = x + gate_m * stream.mlp(h)
            out.append(x)
        return out[0], out[1]


class SingleStreamBlock(nn.Module):
    """One set of weights over the concatenated scene+prompt sequence."""

    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.stream = _Stream(d_model)

    def forward(self, x, t_emb):
        stream = self.stream
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = stream.modulation(
            torch.nn.functional.silu(t_emb)
        ).chunk(6, dim=-1)
        h = stream.norm_attn(x) * (1.0 + scale_a[:, None]) + shift_a[:, None]
        q, k, v = stream.qkv(h).chunk(3, dim=-1)
        attn = _merge_heads(
            _attention(
                _split_heads(q, self.num_heads),
                _split_heads(k, self.num_heads),
                _split_heads(v, self.num_heads),
            )
        )
        x = x + gate_a[:, None] * stream.proj(attn)
        h = stream.norm_mlp(x) * (1.0 + scale_m[:, None]) + shift_m[:, None]
        return x + gate_m[:, None] * stream.mlp(h)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------


class SceneDenoiser(nn.Module):
    """Predicts pose noise (and category logits in mixed mode) per slot."""

    def __init__(self, config: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        d = config.d_model
        self.scene_in = nn.Linear(config.state_dims, d)
        self.vocab_embed = nn.Embedding(config.vocab_size, d)
        self.prompt_pos = nn.Parameter(torch.zeros(config.max_prompt_len, d))
        self.null_prompt = nn.Parameter(torch.zeros(config.max_prompt_len, d))
        self.time_mlp = nn.Sequential(nn.Linear(d, d), nn.SiLU(), nn.Linear(d, d))
        self.double_blocks = nn.ModuleList(
            DoubleStreamBlock(d, config.num_heads) for _ in range(config.num_double_blocks)
        )
        self.single_blocks = nn.ModuleList(
            SingleStreamBlock(d, config.num_heads) for _ in range(config.num_single_blocks)
        )
        self.final_modulation = nn.Linear(d, 2 * d)
        self.final_norm = nn.LayerNorm(d, elementwise_affine=False)
        self.eps_head = nn.Linear(d, POSE_DIMS if config.mode == "mixed" else config.state_dims)
        if config.mode == "mixed":
            self.logits_head = nn.Linear(d, config.num_categories)
        self.double()
        self.reset_parameters(init_seed)

    # -- initialization ----------------------------------------------------

    _ZERO_INIT_SUFFIXES = ("modulation.weight", "modulation.bias")
    _ZERO_INIT_NAMES = (
        "final_modulation.weight",
        "final_modulation.bias",
        "eps_head.weight",
        "eps_head.bias",
        "logits_head.weight",
        "logits_head.bias",
    )

    def reset_parameters(self, seed: int) -> None:
        """Deterministic init: gates and heads zero, everything else N(0, 0.02)."""
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, param in self.named_parameters():
                if name in self._ZERO_INIT_NAMES or name.endswith(self._ZERO_INIT_SUFFIXES):
                    param.zero_()
                elif name.endswith(".bias"):
                    param.zero_()
                else:
                    param.copy_(torch.randn(param.shape, generator=gen, dtype=torch.float64) * 0.02)

    # -- forward -----------------------------------------------------------

    def _prompt_tokens(self, batch: int, prompt_ids, null_mask) -> torch.Tensor:
        null = self.null_prompt[None].expand(batch, -1, -1)
        if prompt_ids is None:
            return null
        if prompt_ids.shape[-1] != self.config.max_prompt_len:
            raise ValueError(
                f"prompts must be padded to length {self.config.max_prompt_len}, got {prompt_ids.shape[-1]}"
            )
        embedded = self.vocab_embed(prompt_ids) + self.prompt_pos[None]
        if null_mask is None:
            return embedded
        return torch.where(null_mask[:, None, None], null, embedded)

    def forward(
        self,
        scene_state: torch.Tensor,
        t,
        prompt_ids: torch.Tensor | None = None,
        null_mask: torch.Tensor | None = None,
    ):
        """Run the backbone on ``(B, N, K+12)`` states at timestep ``t``.

        ``prompt_ids=None`` (or a true entry in ``null_mask``) routes that
        sample through the learned unconditional pseudo-prompt.  Returns
        ``(logits, eps_hat)`` in mixed mode and ``eps_hat`` in continuous
        mode.
        """
        if scene_state.dtype != torch.float64:
            raise TypeError("scene_state must be float64")
        batch = scene_state.shape[0]
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.int64)
        t_emb = self.time_mlp(timestep_embedding(t, self.config.d_model))
        x_scene = self.scene_in(scene_state)
        x_prompt = self._prompt_tokens(batch, prompt_ids, null_mask)
        for block in self.double_blocks:
            x_scene, x_prompt = block(x_scene, x_prompt, t_emb)
        n_scene = x_scene.shape[1]
        x = torch.cat([x_scene, x_prompt], dim=1)
        for block in self.single_blocks:
            x = block(x, t_emb)
        x_scene = x[:, :n_scene]
        shift, scale = self.final_modulation(torch.nn.functional.silu(t_emb)).chunk(2, dim=-1)
        h = self.final_norm(x_scene) * (1.0 + scale[:, None]) + shift[:, None]
        eps_hat = self.eps_head(h)
        if self.config.mode == "mixed":
            return self.logits_head(h), eps_hat
        return eps_hat

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def mixed_state(categories: torch.Tensor, pose: torch.Tensor, num_categories: int) -> torch.Tensor:
    """Pack (B, N) categories and (B, N, 12) poses into (B, N, K+12) states."""
    onehot = torch.nn.functional.one_hot(categories.long(), num_categories).to(torch.float64)
    return torch.cat([onehot, pose.to(torch.float64)], dim=-1)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str,
    model: SceneDenoiser,
    vocab: Vocab,
    schedule: NoiseSchedule,
    library: AssetLibrary,
    extras: dict | None = None,
) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(model.config),
        "vocab": list(vocab.tokens),
        "library": library.name,
        "library_hash": library.content_hash(),
        "schedule": {
            "num_steps": schedule.num_steps,
            "beta_start": schedule.beta_start,
            "beta_end": schedule.beta_end,
        },
        "state_dict": model.state_dict(),
        "extras": extras or {},
    }
    torch.save(payload, path)


def load_checkpoint(path: str, library: AssetLibrary | None = None):
    """Rebuild (model, vocab, schedule, library, extras) from disk.

    Fails loudly when the stored library fingerprint disagrees with the one
    supplied, or when the payload structure does not match this version.
    """
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    config = ModelConfig(**payload["config"])
    vocab = Vocab(tuple(payload["vocab"]))
    if len(vocab) != config.vocab_size:
        raise ValueError("checkpoint vocabulary does not match its model config")
    schedule = NoiseSchedule(**payload["schedule"])
    lib = library if library is not None else load_library(payload["library"])
    if lib.content_hash() != payload["library_hash"]:
        raise ValueError(
            f"checkpoint was trained against library {payload['library']!r} "
            "with different contents"
        )
    model = SceneDenoiser(config)
    model.load_state_dict(payload["state_dict"])
    return model, vocab, schedule, lib, payload["extras"]
