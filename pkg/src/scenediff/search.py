"""Inference-time tree search over inpainting proposals.

The search treats the generative model as a proposal distribution: each
tree node is a concrete scene, and expanding a node means asking the model
to regenerate that scene's defective slots (flagged by the feasibility
report) plus its empty ones.  Rewards are computed from the physically
checked result, so the search climbs toward scenes with many feasible
objects without ever editing poses by hand.

The proposal callable is deliberately model-agnostic:
``propose(scene, mask, sample_seed) -> Scene`` — one candidate per call,
so a scene depends only on its own sample seed, never on batch layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .feasibility import (
    FeasibilityReport,
    ProjectionError,
    feasibility_report,
    project_nonpenetration,
)
from .rng import derive_seed, np_rng
from .scene import InpaintMask, ObjectSlot, Scene

__all__ = [
    "REWARDS",
    "SearchNode",
    "SearchResult",
    "scaffold_only",
    "mcts_search",
    "independent_resampling",
    "write_trace",
    "read_trace",
]

# Stream id for the backpropagation child pick; sample seeds use the plain
# counter path, which stays far below this.
_PICK_STREAM = 2**31


def _feasible_objects(scene: Scene, report: FeasibilityReport) -> float:
    return float(report.feasible_count(scene))


REWARDS = {
    "feasible_objects": _feasible_objects,
}


def _resolve_reward(reward):
    if callable(reward):
        return reward
    try:
        return REWARDS[reward]
    except KeyError:
        raise ValueError(f"unknown reward {reward!r}; registered: {sorted(REWARDS)}") from None


def scaffold_only(scene: Scene) -> Scene:
    """Strip a scene down to its welded slots (the fixed furniture)."""
    slots = tuple(s if s.welded else ObjectSlot.empty() for s in scene.slots)
    return Scene(capacity=scene.capacity, library=scene.library, slots=slots)


def _regen_mask(scene: Scene, report: FeasibilityReport) -> InpaintMask:
    """Slots worth redoing: flagged or empty, never welded."""
    flagged = report.flagged()
    empty = np.array([s.is_empty for s in scene.slots])
    welded = np.array([s.welded for s in scene.slots])
    regen = (flagged | empty) & ~welded
    return InpaintMask(regen, regen.copy())


@dataclass
class SearchNode:
    """One candidate scene in the tree."""

    node_id: int
    scene: Scene
    mask: InpaintMask
    reward: float
    parent: "SearchNode | None" = None
    children: list = field(default_factory=list)
    visits: int = 0
    mean_reward: float = 0.0

    @property
    def terminal(self) -> bool:
        """Nothing left to regenerate: the scene is full and feasible."""
        return not self.mask.any_regen()


@dataclass
class SearchResult:
    best_scene: Scene
    best_reward: float
    iterations: int
    num_samples: int
    trace: list

    def reached(self, target: float) -> bool:
        return self.best_reward >= target


def _uct(child: SearchNode, parent_visits: int, exploration: float) -> float:
    if child.visits == 0:
        return math.inf
    return child.mean_reward + exploration * math.sqrt(2.0 * math.log(parent_visits) / child.visits)


def _select_child(node: SearchNode, exploration: float) -> SearchNode:
    scores = [_uct(c, node.visits, exploration) for c in node.children]
    return node.children[int(np.argmax(scores))]  # argmax keeps the lowest index on ties


def _backpropagate(node: SearchNode, value: float) -> None:
    while node is not None:
        node.visits += 1
        node.mean_reward += (value - node.mean_reward) / node.visits
        node = node.parent


def _evaluate(candidate: Scene, reward_fn):
    """Project a proposal into the feasible set and score it."""
    try:
        projected = project_nonpenetration(candidate)
    except ProjectionError as err:
        projected = err.best_scene
    report = feasibility_report(projected)
    return projected, report, float(reward_fn(projected, report))


def mcts_search(
    propose,
    root_scene: Scene,
    seed: int,
    num_children: int | None = 3,
    max_iterations: int = 500,
    target_reward: float | None = None,
    exploration: float | None = None,
    reward="feasible_objects",
) -> SearchResult:
    """Best-first search for a high-reward scene under a proposal model.

    Each iteration walks the tree by upper confidence bounds to a leaf,
    draws ``num_children`` proposals for that leaf's regeneration mask, and
    scores each one after non-penetration projection.  Every proposal's
    reward updates the best-so-far trace; a single uniformly chosen child
    is backed up the path, keeping the value estimates unbiased.

    ``num_children=None`` removes the tree entirely — every iteration draws
    one fresh proposal at the root, which is exactly independent
    resampling and shares its seed layout with
    :func:`independent_resampling`.

    Proposal sample seeds are ``derive_seed(seed, k)`` for the global draw
    counter ``k``, so any single candidate can be reproduced in isolation.
    """
    reward_fn = _resolve_reward(reward)
    if num_children is not None and num_children < 1:
        raise ValueError("num_children must be at least 1 (or None for flat resampling)")
    if max_iterations < 1:
        raise ValueError("max_iterations must be positive")
    if exploration is None:
        exploration = math.sqrt(2.0) * root_scene.capacity

    root_report = feasibility_report(root_scene)
    root = SearchNode(
        node_id=0,
        scene=root_scene,
        mask=InpaintMask.all_free(root_scene),
        reward=float(reward_fn(root_scene, root_report)),
    )
    pick_rng = np_rng(derive_seed(seed, _PICK_STREAM))

    best_scene, best_reward = root.scene, -math.inf
    trace: list[dict] = []
    counter = 0
    next_id = 1
    iterations = 0

    for iteration in range(max_iterations):
        iterations = iteration + 1
        if num_children is None:
            leaf = root
        else:
            leaf = root
            while leaf.children:
                leaf = _select_child(leaf, exploration)
        if leaf.terminal:
            _backpropagate(leaf, leaf.reward)
            if best_reward < leaf.reward:
                best_scene, best_reward = leaf.scene, leaf.reward
            if target_reward is not None and best_reward >= target_reward:
                break
            continue

        width = 1 if num_children is None else num_children
        batch = []
        for _ in range(width):
            sample_seed = derive_seed(seed, counter)
            candidate = propose(leaf.scene, leaf.mask, sample_seed)
            projected, report, value = _evaluate(candidate, reward_fn)
            child = SearchNode(
                node_id=next_id,
                scene=projected,
                mask=_regen_mask(projected, report),
                reward=value,
                parent=leaf,
            )
            leaf.children.append(child)
            batch.append(child)
            if value > best_reward:
                best_scene, best_reward = projected, value
            trace.append(
                {
                    "iteration": iteration,
                    "node_id": next_id,
                    "parent_id": leaf.node_id,
                    "sample_index": counter,
                    "reward": value,
                    "best_reward": best_reward,
                    "mask_size": int(child.mask.masked_slots().size),
                }
            )
            next_id += 1
            counter += 1
        chosen = batch[0] if len(batch) == 1 else batch[int(pick_rng.integers(len(batch)))]
        chosen.visits = 1
        chosen.mean_reward = chosen.reward
        _backpropagate(leaf, chosen.reward)
        if target_reward is not None and best_reward >= target_reward:
            break

    return SearchResult(
        best_scene=best_scene,
        best_reward=best_reward,
        iterations=iterations,
        num_samples=counter,
        trace=trace,
    )


def independent_resampling(
    propose,
    root_scene: Scene,
    seed: int,
    num_samples: int,
    reward="feasible_objects",
    target_reward: float | None = None,
) -> SearchResult:
    """Best-of-N baseline: fresh proposals at the root, no tree.

    Sample ``k`` uses ``derive_seed(seed, k)``, the same layout as the
    search, so the two are directly comparable draw for draw.
    """
    reward_fn = _resolve_reward(reward)
    mask = InpaintMask.all_free(root_scene)
    best_scene, best_reward = root_scene, -math.inf
    trace = []
    draws = 0
    for k in range(num_samples):
        candidate = propose(root_scene, mask, derive_seed(seed, k))
        projected, report, value = _evaluate(candidate, reward_fn)
        draws += 1
        if value > best_reward:
            best_scene, best_reward = projected, value
        trace.append(
            {
                "iteration": k,
                "node_id": k + 1,
                "parent_id": 0,
                "sample_index": k,
                "reward": value,
                "best_reward": best_reward,
                "mask_size": int(_regen_mask(projected, report).masked_slots().size),
            }
        )
        if target_reward is not None and best_reward >= target_reward:
            break
    return SearchResult(
        best_scene=best_scene,
        best_reward=best_reward,
        iterations=draws,
        num_samples=draws,
        trace=trace,
    )


def write_trace(trace, path: str) -> None:
    with open(path, "w") as f:
        for entry in trace:
            f.write(json.dumps(entry) + "\n")


def read_trace(path: str) -> list:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
