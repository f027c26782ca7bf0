"""Distribution, instruction-following, and transport metrics over scene sets.

Four families:

* histogram divergences over object categories,
* physical-violation summaries (median total penetration),
* prompt parsing + the fraction of generated scenes that actually satisfy
  the prompt they were conditioned on,
* a two-sample test (real-vs-generated classifier) and an entropic
  optimal-transport distance between object sets with bias removal.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .feasibility import total_penetration
from .grammar import word_number, pluralize
from .scene import Scene

logger = logging.getLogger(__name__)

__all__ = [
    "category_histogram",
    "category_kl",
    "median_total_penetration",
    "parse_prompt",
    "prompt_satisfied",
    "annotation_follow_rate",
    "scene_features",
    "set_classifier_accuracy",
    "entropic_ot_cost",
    "scene_distance",
    "nearest_neighbor_distance",
]


# ---------------------------------------------------------------------------
# Category histograms
# ---------------------------------------------------------------------------


def category_histogram(scenes, num_categories: int) -> np.ndarray:
    """Counts of non-empty object categories pooled over ``scenes``.

    Bin ``i`` holds occurrences of category ``i + 1`` (the empty category is
    not a bin).
    """
    counts = np.zeros(num_categories - 1, dtype=np.int64)
    for scene in scenes:
        for slot in scene.slots:
            if not slot.is_empty:
                counts[slot.category - 1] += 1
    return counts


def category_kl(reference, generated, num_categories: int, eps: float = 1e-8) -> float:
    """KL(reference || generated) between category usage distributions (nats).

    Both histograms are smoothed by ``eps`` per bin before normalising so the
    divergence stays finite when a category never appears on one side.
    """
    p = category_histogram(reference, num_categories).astype(np.float64) + eps
    q = category_histogram(generated, num_categories).astype(np.float64) + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * (np.log(p) - np.log(q))))


def median_total_penetration(scenes) -> float:
    """Median over scenes of the summed pairwise penetration depth (meters)."""
    if not scenes:
        raise ValueError("no scenes given")
    return float(np.median([total_penetration(s) for s in scenes]))


# ---------------------------------------------------------------------------
# Prompt parsing and follow rate
# ---------------------------------------------------------------------------

_WORD_TO_NUMBER = {word_number(n): n for n in range(21)}
_ARTICLES = {"a": 1, "an": 1}


def _parse_quantity(token: str):
    if token in _ARTICLES:
        return _ARTICLES[token]
    if token in _WORD_TO_NUMBER:
        return _WORD_TO_NUMBER[token]
    if token.isdigit():
        return int(token)
    return None


def _name_map(library) -> dict[str, str]:
    table = {}
    for cat in range(1, library.num_categories):
        name = library.name_of(cat)
        table[name] = name
        table[pluralize(name)] = name
    return table


@dataclass(frozen=True)
class ParsedPrompt:
    """What a prompt demands: a total count, object names, or both absent."""

    count: int | None = None
    names: tuple[tuple[str, int], ...] = ()


def parse_prompt(prompt: str, library) -> ParsedPrompt | None:
    """Extract the checkable content of a scene description.

    Only the leading sentence is interpreted; trailing spatial-relation
    sentences are ignored here.  Returns ``None`` when the sentence does not
    follow any of the emitted shapes.
    """
    first = prompt.strip().split(".")[0].strip()
    if first.lower() == "an empty scene":
        return ParsedPrompt(count=0)
    prefix = "a scene with "
    if not first.lower().startswith(prefix):
        return None
    listing = first[len(prefix):]
    parts = []
    for chunk in listing.split(", "):
        parts.extend(chunk.split(" and "))
    names = _name_map(library)
    found: Counter = Counter()
    for part in parts:
        tokens = part.strip().split(" ", 1)
        if len(tokens) != 2:
            return None
        qty = _parse_quantity(tokens[0].lower())
        noun = tokens[1].strip().lower()
        if qty is None:
            return None
        if noun in ("object", "objects"):
            if len(parts) != 1:
                return None
            return ParsedPrompt(count=qty)
        if noun not in names:
            return None
        found[names[noun]] += qty
    if not found:
        return None
    return ParsedPrompt(names=tuple(sorted(found.items())))


def prompt_satisfied(scene: Scene, prompt: str) -> bool | None:
    """Whether ``scene`` fulfils ``prompt``; ``None`` if the prompt is opaque.

    Total-count prompts are exact; named-object prompts require the scene to
    contain at least the stated number of each named category (extra objects
    do not count against it).
    """
    parsed = parse_prompt(prompt, scene.library)
    if parsed is None:
        return None
    if parsed.count is not None:
        return scene.object_count() == parsed.count
    have: Counter = Counter()
    for slot in scene.slots:
        if not slot.is_empty:
            have[scene.library.name_of(slot.category)] += 1
    return all(have[name] >= qty for name, qty in parsed.names)


def annotation_follow_rate(scenes, prompts) -> float:
    """Fraction of (scene, prompt) pairs where the scene satisfies the prompt.

    Pairs whose prompt cannot be parsed are excluded from the denominator
    (and logged); an all-opaque input raises.
    """
    if len(scenes) != len(prompts):
        raise ValueError("scenes and prompts must pair up")
    hits, total = 0, 0
    for scene, prompt in zip(scenes, prompts):
        verdict = prompt_satisfied(scene, prompt)
        if verdict is None:
            logger.warning("skipping unparseable prompt: %r", prompt)
            continue
        total += 1
        hits += int(verdict)
    if total == 0:
        raise ValueError("no parseable prompts")
    return hits / total


# ---------------------------------------------------------------------------
# Real-vs-generated classifier
# ---------------------------------------------------------------------------

_WORKSPACE_XY = 0.6  # half-extent of the tabletop working volume (meters)
_WORKSPACE_Z = 1.2
_GRID = (4, 4, 2)


def scene_features(scene: Scene) -> np.ndarray:
    """Fixed-length summary: category counts, spread, height, occupancy."""
    k = scene.library.num_categories
    counts = np.zeros(k - 1)
    translations = []
    for slot in scene.slots:
        if slot.is_empty:
            continue
        counts[slot.category - 1] += 1
        translations.append(slot.translation)
    if len(translations) >= 2:
        pts = np.asarray(translations)
        diffs = pts[:, None, :] - pts[None, :, :]
        dists = np.sqrt((diffs**2).sum(-1))
        upper = dists[np.triu_indices(len(pts), k=1)]
        pair_mean, pair_std = float(upper.mean()), float(upper.std())
    else:
        pair_mean = pair_std = 0.0
    mean_height = float(np.mean([t[2] for t in translations])) if translations else 0.0
    occupancy = np.zeros(_GRID)
    for t in translations:
        ix = int(np.clip((t[0] + _WORKSPACE_XY) / (2 * _WORKSPACE_XY) * _GRID[0], 0, _GRID[0] - 1))
        iy = int(np.clip((t[1] + _WORKSPACE_XY) / (2 * _WORKSPACE_XY) * _GRID[1], 0, _GRID[1] - 1))
        iz = int(np.clip(t[2] / _WORKSPACE_Z * _GRID[2], 0, _GRID[2] - 1))
        occupancy[ix, iy, iz] += 1
    return np.concatenate([counts, [pair_mean, pair_std, mean_height], occupancy.reshape(-1)])


def set_classifier_accuracy(real_scenes, generated_scenes, seed: int = 0, num_splits: int = 10):
    """Test-set accuracy of a linear probe told to separate real from generated.

    Near 50% means the two populations are indistinguishable to these
    features.  Returns ``(mean_percent, std_percent)`` over ``num_splits``
    random half/half splits.
    """
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    if not real_scenes or not generated_scenes:
        raise ValueError("both scene sets must be non-empty")
    x = np.stack([scene_features(s) for s in list(real_scenes) + list(generated_scenes)])
    y = np.concatenate([np.ones(len(real_scenes)), np.zeros(len(generated_scenes))])
    accuracies = []
    for split in range(num_splits):
        x_tr, x_te, y_tr, y_te = train_test_split(
            x, y, test_size=0.5, random_state=seed * num_splits + split, stratify=y
        )
        probe = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        probe.fit(x_tr, y_tr)
        accuracies.append(probe.score(x_te, y_te) * 100.0)
    return float(np.mean(accuracies)), float(np.std(accuracies))


# ---------------------------------------------------------------------------
# Entropic optimal transport between object sets
# ---------------------------------------------------------------------------

_CATEGORY_MISMATCH_COST = 1.0


def _object_sets(scene: Scene):
    pts, cats = [], []
    for slot in scene.slots:
        if not slot.is_empty:
            pts.append(slot.translation)
            cats.append(slot.category)
    return np.asarray(pts), np.asarray(cats, dtype=np.int64)


def _pair_cost(pts_a, cats_a, pts_b, cats_b) -> np.ndarray:
    diff = pts_a[:, None, :] - pts_b[None, :, :]
    cost = (diff**2).sum(-1)
    cost = cost + _CATEGORY_MISMATCH_COST * (cats_a[:, None] != cats_b[None, :])
    return cost


def entropic_ot_cost(cost: np.ndarray, eps_reg: float = 0.01, max_iter: int = 2000, tol: float = 1e-12) -> float:
    """Transport cost ⟨C, P⟩ under entropic regularisation, uniform marginals.

    Log-domain Sinkhorn iterations, so small ``eps_reg`` stays stable.
    """
    n, m = cost.shape
    log_mu = np.full(n, -np.log(n))
    log_nu = np.full(m, -np.log(m))
    f = np.zeros(n)
    g = np.zeros(m)
    scaled = -cost / eps_reg
    for _ in range(max_iter):
        f_prev = f
        f = eps_reg * (log_mu - _logsumexp(scaled + g[None, :] / eps_reg, axis=1))
        g = eps_reg * (log_nu - _logsumexp(scaled + f[:, None] / eps_reg, axis=0))
        if np.max(np.abs(f - f_prev)) < tol:
            break
    log_plan = scaled + f[:, None] / eps_reg + g[None, :] / eps_reg
    plan = np.exp(log_plan)
    return float((plan * cost).sum())


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    peak = a.max(axis=axis, keepdims=True)
    out = peak + np.log(np.exp(a - peak).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def scene_distance(a: Scene, b: Scene, eps_reg: float = 0.01) -> float:
    """Debiased entropic transport distance between two object sets.

    The self-transport terms are subtracted so identical scenes score zero,
    and the result is clamped at zero since the correction can overshoot by
    a whisker.
    """
    pts_a, cats_a = _object_sets(a)
    pts_b, cats_b = _object_sets(b)
    if len(pts_a) == 0 and len(pts_b) == 0:
        return 0.0
    if len(pts_a) == 0 or len(pts_b) == 0:
        raise ValueError("transport distance between an empty and non-empty scene is undefined")
    ab = entropic_ot_cost(_pair_cost(pts_a, cats_a, pts_b, cats_b), eps_reg)
    aa = entropic_ot_cost(_pair_cost(pts_a, cats_a, pts_a, cats_a), eps_reg)
    bb = entropic_ot_cost(_pair_cost(pts_b, cats_b, pts_b, cats_b), eps_reg)
    return max(0.0, ab - 0.5 * aa - 0.5 * bb)


def exact_assignment_cost(a: Scene, b: Scene) -> float:
    """Brute-force matching cost between equal-size object sets (oracle).

    Minimum over all pairings of the mean matched cost; only intended for
    small scenes, the search is factorial.
    """
    pts_a, cats_a = _object_sets(a)
    pts_b, cats_b = _object_sets(b)
    if len(pts_a) != len(pts_b):
        raise ValueError("exact assignment needs equal object counts")
    if len(pts_a) == 0:
        return 0.0
    cost = _pair_cost(pts_a, cats_a, pts_b, cats_b)
    n = len(pts_a)
    best = min(sum(cost[i, perm[i]] for i in range(n)) for perm in permutations(range(n)))
    return float(best / n)


def nearest_neighbor_distance(generated, reference, eps_reg: float = 0.01) -> float:
    """Mean over generated scenes of the distance to their closest reference."""
    if not generated or not reference:
        raise ValueError("both scene sets must be non-empty")
    values = []
    for g in generated:
        values.append(min(scene_distance(g, r, eps_reg) for r in reference))
    return float(np.mean(values))
