"""Tree search mechanics with model-free proposal stubs."""

import math

import numpy as np
import pytest

from scenediff.assets import builtin_library
from scenediff.feasibility import feasibility_report, total_penetration
from scenediff.rng import np_rng
from scenediff.rotations import Rotation
from scenediff.scene import InpaintMask, ObjectSlot, Scene, scenes_equal
from scenediff.search import (
    REWARDS,
    SearchNode,
    _backpropagate,
    _select_child,
    _uct,
    independent_resampling,
    mcts_search,
    read_trace,
    scaffold_only,
    write_trace,
)

LIB = builtin_library("desk")
BOX = LIB.category_of("box")
BOX_R = 0.04
CAPACITY = 6

# Well-separated resting spots on the ground plane, one per slot.
_CELLS = [(0.25 * (i % 3) - 0.25, 0.25 * (i // 3) - 0.12, BOX_R) for i in range(CAPACITY)]


def _empty_scene():
    return Scene.empty(CAPACITY, LIB)


def _box_at(xyz):
    return ObjectSlot(category=BOX, translation=np.asarray(xyz, float), rotation=Rotation.identity(), welded=False)


def _stub_propose(scene, mask, sample_seed):
    """Fill masked slots with boxes; sometimes floating, sometimes skipped.

    Kept slots are copied verbatim, mimicking the inpainting contract.  The
    outcome depends only on ``sample_seed``, so reruns are reproducible.
    """
    rng = np_rng(sample_seed)
    slots = list(scene.slots)
    for i in mask.masked_slots():
        roll = rng.random()
        if roll < 0.25:
            slots[i] = ObjectSlot.empty()
        elif roll < 0.55:
            x, y, _ = _CELLS[i]
            slots[i] = _box_at((x, y, 0.30))  # floating: will be flagged unstable
        else:
            slots[i] = _box_at(_CELLS[i])
    return Scene(capacity=scene.capacity, library=scene.library, slots=tuple(slots))


def _perfect_propose(scene, mask, sample_seed):
    slots = list(scene.slots)
    for i in mask.masked_slots():
        slots[i] = _box_at(_CELLS[i])
    return Scene(capacity=scene.capacity, library=scene.library, slots=tuple(slots))


def _overlapping_propose(scene, mask, sample_seed):
    """Pairs of boxes interpenetrating by 0.065 m: projection must split them."""
    slots = list(scene.slots)
    for i in mask.masked_slots():
        x, y, z = _CELLS[i % 3]
        slots[i] = _box_at((x + 0.015 * (i // 3), y, z))
    return Scene(capacity=scene.capacity, library=scene.library, slots=tuple(slots))


# ---------------------------------------------------------------------------
# Local mechanics
# ---------------------------------------------------------------------------


def test_uct_hand_value():
    child = SearchNode(node_id=1, scene=_empty_scene(), mask=InpaintMask.none(CAPACITY), reward=0.5)
    child.visits = 2
    child.mean_reward = 0.5
    got = _uct(child, parent_visits=10, exploration=1.0)
    assert got == pytest.approx(0.5 + math.sqrt(2 * math.log(10) / 2), rel=1e-12)
    assert got == pytest.approx(2.0174, abs=5e-4)


def test_uct_unvisited_is_infinite():
    child = SearchNode(node_id=1, scene=_empty_scene(), mask=InpaintMask.none(CAPACITY), reward=0.0)
    assert _uct(child, parent_visits=3, exploration=1.0) == math.inf


def test_select_child_breaks_ties_toward_lowest_index():
    parent = SearchNode(node_id=0, scene=_empty_scene(), mask=InpaintMask.none(CAPACITY), reward=0.0)
    parent.visits = 4
    for i in range(3):
        c = SearchNode(node_id=i + 1, scene=_empty_scene(), mask=InpaintMask.none(CAPACITY), reward=1.0, parent=parent)
        c.visits = 2
        c.mean_reward = 1.0
        parent.children.append(c)
    assert _select_child(parent, exploration=1.0).node_id == 1
    parent.children[2].mean_reward = 1.5
    assert _select_child(parent, exploration=1.0).node_id == 3


def test_backpropagate_running_mean():
    root = SearchNode(node_id=0, scene=_empty_scene(), mask=InpaintMask.none(CAPACITY), reward=0.0)
    node = SearchNode(node_id=1, scene=_empty_scene(), mask=InpaintMask.none(CAPACITY), reward=0.0, parent=root)
    _backpropagate(node, 4.0)
    _backpropagate(node, 8.0)
    assert root.visits == 2 and node.visits == 2
    assert root.mean_reward == pytest.approx(6.0)
    assert node.mean_reward == pytest.approx(6.0)
    _backpropagate(node, 3.0)
    assert root.mean_reward == pytest.approx(5.0)


def test_scaffold_only_keeps_welded():
    slots = [_box_at(_CELLS[0])]
    welded = ObjectSlot(category=BOX, translation=np.array(_CELLS[1]), rotation=Rotation.identity(), welded=True)
    slots.append(welded)
    while len(slots) < CAPACITY:
        slots.append(ObjectSlot.empty())
    scene = Scene(capacity=CAPACITY, library=LIB, slots=tuple(slots))
    stripped = scaffold_only(scene)
    assert stripped.slots[0].is_empty
    assert stripped.slots[1].welded and stripped.slots[1].category == BOX
    assert stripped.object_count() == 1


def test_reward_registry():
    scene = _perfect_propose(_empty_scene(), InpaintMask.all_free(_empty_scene()), 0)
    report = feasibility_report(scene)
    assert REWARDS["feasible_objects"](scene, report) == CAPACITY
    with pytest.raises(ValueError):
        mcts_search(_perfect_propose, _empty_scene(), seed=0, reward="nope")


# ---------------------------------------------------------------------------
# End-to-end searches with stubs
# ---------------------------------------------------------------------------


def test_search_is_deterministic_and_monotone():
    result = mcts_search(_stub_propose, _empty_scene(), seed=3, num_children=3, max_iterations=12)
    again = mcts_search(_stub_propose, _empty_scene(), seed=3, num_children=3, max_iterations=12)
    assert result.trace == again.trace
    assert scenes_equal(result.best_scene, again.best_scene)
    bests = [e["best_reward"] for e in result.trace]
    assert all(a <= b for a, b in zip(bests, bests[1:]))
    assert result.best_reward == max(e["reward"] for e in result.trace)
    assert result.num_samples == len(result.trace)


def test_search_stops_at_target():
    result = mcts_search(
        _perfect_propose, _empty_scene(), seed=0, num_children=3, max_iterations=50, target_reward=CAPACITY
    )
    assert result.iterations == 1
    assert result.best_reward == CAPACITY
    assert result.best_scene.object_count() == CAPACITY
    report = feasibility_report(result.best_scene)
    assert not report.flagged().any()


def test_search_projects_overlapping_proposals():
    raw = _overlapping_propose(_empty_scene(), InpaintMask.all_free(_empty_scene()), 0)
    assert total_penetration(raw) > 0.1  # proposals really do interpenetrate
    result = mcts_search(
        _overlapping_propose, _empty_scene(), seed=1, num_children=2, max_iterations=4
    )
    assert total_penetration(result.best_scene) == 0.0
    assert result.best_reward == CAPACITY


def test_terminal_leaf_is_not_reexpanded():
    result = mcts_search(_perfect_propose, _empty_scene(), seed=0, num_children=2, max_iterations=6)
    # first iteration creates two perfect children; later iterations select a
    # terminal leaf and back its reward up without drawing samples
    assert result.num_samples == 2
    assert result.iterations == 6
    assert result.best_reward == CAPACITY


def test_flat_mode_equals_independent_resampling():
    for seed in range(4):
        flat = mcts_search(_stub_propose, _empty_scene(), seed=seed, num_children=None, max_iterations=15)
        base = independent_resampling(_stub_propose, _empty_scene(), seed=seed, num_samples=15)
        assert [(e["sample_index"], e["reward"], e["best_reward"]) for e in flat.trace] == [
            (e["sample_index"], e["reward"], e["best_reward"]) for e in base.trace
        ]
        assert flat.trace == base.trace
        assert scenes_equal(flat.best_scene, base.best_scene)
        assert flat.best_reward == base.best_reward


def test_search_improves_over_time():
    deep = mcts_search(_stub_propose, _empty_scene(), seed=7, num_children=3, max_iterations=40)
    early_best = deep.trace[2]["best_reward"]
    assert deep.best_reward >= early_best
    assert deep.best_reward >= 4  # stub leaves plenty of headroom below 6


def test_constant_reward_does_not_crash_or_drift():
    def flat_propose(scene, mask, sample_seed):
        slots = list(scene.slots)
        slots[0] = _box_at(_CELLS[0])
        return Scene(capacity=scene.capacity, library=scene.library, slots=tuple(slots))

    result = mcts_search(flat_propose, _empty_scene(), seed=5, num_children=2, max_iterations=8)
    rewards = {e["reward"] for e in result.trace}
    assert rewards == {1.0}
    assert result.best_reward == 1.0


def test_trace_round_trip(tmp_path):
    result = mcts_search(_stub_propose, _empty_scene(), seed=2, num_children=2, max_iterations=5)
    path = str(tmp_path / "trace.jsonl")
    write_trace(result.trace, path)
    assert read_trace(path) == result.trace


def test_parameter_validation():
    with pytest.raises(ValueError):
        mcts_search(_stub_propose, _empty_scene(), seed=0, num_children=0)
    with pytest.raises(ValueError):
        mcts_search(_stub_propose, _empty_scene(), seed=0, max_iterations=0)
