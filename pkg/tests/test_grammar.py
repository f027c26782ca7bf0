"""Grammar sampling, count distributions, and annotation strings."""

import numpy as np
import pytest

from scenediff.assets import AssetDef, AssetLibrary
from scenediff.feasibility import feasibility_report, total_penetration
from scenediff.grammar import (
    ChildRule,
    CountDist,
    Grammar,
    GrammarError,
    InfeasibleSampleError,
    PlacementDist,
    RotationDist,
    SymbolDef,
    annotate,
    build_toyshelf,
    build_toytable,
    builtin_grammar,
    count_distribution,
    grammar_from_dict,
    grammar_to_dict,
    load_grammar,
    pluralize,
    sample_feasible,
    sample_raw,
    save_grammar,
    word_number,
)
from scenediff.rotations import Rotation
from scenediff.scene import ObjectSlot, Scene, scenes_equal


# ---------------------------------------------------------------------------
# Helper libraries / grammars
# ---------------------------------------------------------------------------


def _balls_library():
    return AssetLibrary(
        name="testballs",
        assets=(
            AssetDef("anchor", np.array([[0.0, 0.0, 0.0, 1.0]]), mass=10.0, default_welded=True),
            AssetDef("pebble", np.array([[0.0, 0.0, 0.0, 0.05]]), mass=0.1),
        ),
    )


def _fruit_library():
    return AssetLibrary(
        name="fruitbowl",
        assets=(
            AssetDef("apple", np.array([[0.0, 0.0, 0.0, 0.04]]), mass=0.2),
            AssetDef("berry", np.array([[0.0, 0.0, 0.0, 0.01]]), mass=0.01),
            AssetDef("box", np.array([[0.0, 0.0, 0.0, 0.04]]), mass=0.5),
        ),
    )


def _pair_grammar(p_child=0.5):
    """Root emits one anchor; one optional pebble, always feasible."""
    lib = _balls_library()
    symbols = {
        "root": SymbolDef(
            name="root",
            asset="anchor",
            welded=True,
            children=(
                ChildRule(
                    symbol="pebble",
                    count=CountDist((0, 1), (1.0 - p_child, p_child)),
                    translation=PlacementDist.box([1.5, 0.0, 0.05], [2.0, 0.0, 0.05]),
                    rotation=RotationDist("fixed"),
                ),
            ),
        ),
        "pebble": SymbolDef(name="pebble", asset="pebble"),
    }
    return Grammar(name="pair", library=lib, root="root", symbols=symbols, capacity=4)


# ---------------------------------------------------------------------------
# Distribution primitives
# ---------------------------------------------------------------------------


def test_count_dist_validation():
    with pytest.raises(GrammarError):
        CountDist((0, 1), (0.5, 0.6))  # does not sum to 1
    with pytest.raises(GrammarError):
        CountDist((-1,), (1.0,))
    with pytest.raises(GrammarError):
        CountDist((), ())
    d = CountDist.uniform(1, 4)
    assert d.values == (1, 2, 3, 4)
    assert d.max() == 4
    assert CountDist((0, 5), (1.0, 0.0)).max() == 0  # zero-prob values ignored


def test_placement_dist_sampling_bounds():
    rng = np.random.default_rng(0)
    box = PlacementDist.box([-1.0, 0.0, 2.0], [1.0, 0.0, 3.0])
    draws = np.array([box.sample(rng) for _ in range(200)])
    assert np.all(draws[:, 0] >= -1.0) and np.all(draws[:, 0] <= 1.0)
    assert np.all(draws[:, 1] == 0.0)
    assert np.all((draws[:, 2] >= 2.0) & (draws[:, 2] <= 3.0))
    g = PlacementDist.gaussian([5.0, 0.0, 0.0], 0.0)
    assert np.allclose(g.sample(rng), [5.0, 0.0, 0.0])
    with pytest.raises(GrammarError):
        PlacementDist.box([1.0, 0.0, 0.0], [0.0, 0.0, 0.0])


def test_rotation_dist_kinds():
    rng = np.random.default_rng(0)
    assert np.array_equal(RotationDist("fixed").sample(rng), np.eye(3))
    yaw = RotationDist("uniform_yaw").sample(rng)
    assert np.allclose(yaw[2, 2], 1.0)
    assert np.allclose(yaw @ yaw.T, np.eye(3))
    full = RotationDist("uniform_so3").sample(rng)
    assert np.allclose(full @ full.T, np.eye(3), atol=1e-12)
    assert np.isclose(np.linalg.det(full), 1.0)
    with pytest.raises(GrammarError):
        RotationDist("euler")


# ---------------------------------------------------------------------------
# Grammar validation
# ---------------------------------------------------------------------------


def test_grammar_rejects_cycles():
    lib = _balls_library()
    symbols = {
        "a": SymbolDef(
            name="a",
            asset="pebble",
            children=(
                ChildRule("b", CountDist.fixed(1), PlacementDist.at([0, 0, 1]), RotationDist("fixed")),
            ),
        ),
        "b": SymbolDef(
            name="b",
            children=(
                ChildRule("a", CountDist.fixed(1), PlacementDist.at([0, 0, 1]), RotationDist("fixed")),
            ),
        ),
    }
    with pytest.raises(GrammarError, match="cycle"):
        Grammar(name="cyclic", library=lib, root="a", symbols=symbols, capacity=8)


def test_grammar_rejects_undefined_symbol_and_overflow():
    lib = _balls_library()
    with pytest.raises(GrammarError, match="undefined"):
        Grammar(
            name="bad",
            library=lib,
            root="root",
            symbols={
                "root": SymbolDef(
                    name="root",
                    asset="anchor",
                    children=(
                        ChildRule("ghost", CountDist.fixed(1), PlacementDist.at([0, 0, 0]), RotationDist("fixed")),
                    ),
                )
            },
            capacity=4,
        )
    # 1 anchor + up to 5 pebbles will not fit in capacity 3
    symbols = {
        "root": SymbolDef(
            name="root",
            asset="anchor",
            children=(
                ChildRule("p", CountDist.uniform(0, 5), PlacementDist.at([0, 0, 2]), RotationDist("fixed")),
            ),
        ),
        "p": SymbolDef(name="p", asset="pebble"),
    }
    with pytest.raises(GrammarError, match="capacity"):
        Grammar(name="overflow", library=lib, root="root", symbols=symbols, capacity=3)


# ---------------------------------------------------------------------------
# Count distribution (dynamic program) against hand-computed oracles
# ---------------------------------------------------------------------------


def test_count_distribution_two_symbol_oracle():
    dist = count_distribution(_pair_grammar(p_child=0.3))
    assert np.allclose(dist, [0.0, 0.7, 0.3])


def test_count_distribution_toytable_oracle():
    # table + (1..4 settings) x (plate + Bernoulli cup + Bernoulli fruit):
    # exact support [2, 13], mean 1 + 2.5 * 2.0 = 6.0, unit mass.
    dist = count_distribution(build_toytable())
    assert dist.shape == (14,)
    assert np.isclose(dist.sum(), 1.0, atol=1e-12)
    assert np.all(dist[:2] == 0.0) and dist[2] > 0 and dist[13] > 0
    mean = float(np.arange(14) @ dist)
    assert abs(mean - 6.0) < 1e-12
    # independent oracle: convolve the per-setting distribution directly
    setting = np.convolve([0.0, 1.0], np.convolve([0.5, 0.5], [0.5, 0.5]))
    mixture = np.zeros(13)
    for n in (1, 2, 3, 4):
        power = np.array([1.0])
        for _ in range(n):
            power = np.convolve(power, setting)
        mixture[: len(power)] += 0.25 * power
    oracle = np.convolve([0.0, 1.0], mixture)
    assert np.allclose(dist, oracle[:14], atol=1e-14)


def test_count_distribution_toyshelf_oracle():
    # per tier: P(0)=.25, P(1)=.75*.4, P(2)=.75*.6*.5, P(3)=.75*.6*.5
    tier = np.array([0.25, 0.3, 0.225, 0.225])
    oracle = np.convolve(np.convolve(tier, tier), tier)
    oracle = np.convolve([0.0, 1.0], oracle)  # the shelf itself
    dist = count_distribution(build_toyshelf())
    assert dist.shape == (11,)
    assert np.allclose(dist, oracle, atol=1e-14)
    assert abs(float(np.arange(11) @ dist) - 5.275) < 1e-12


def test_count_distribution_matches_sampled_counts():
    grammar = build_toytable()
    dist = count_distribution(grammar)
    n = 4000
    counts = np.zeros_like(dist)
    for i in range(n):
        counts[sample_raw(grammar, seed=900_000 + i).object_count()] += 1
    tv = 0.5 * np.abs(counts / n - dist).sum()
    assert tv <= 0.02, f"total variation {tv:.4f} exceeds 0.02"


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def test_sample_raw_deterministic():
    grammar = build_toytable()
    a = sample_raw(grammar, seed=7)
    b = sample_raw(grammar, seed=7)
    c = sample_raw(grammar, seed=8)
    assert scenes_equal(a, b)
    assert not scenes_equal(a, c)


def test_sample_raw_structure():
    grammar = build_toytable()
    for seed in range(30):
        scene = sample_raw(grammar, seed=seed)
        assert scene.capacity == 16
        assert 2 <= scene.object_count() <= 13
        table_slots = [s for s in scene.slots if s.category == scene.library.category_of("table")]
        assert len(table_slots) == 1 and table_slots[0].welded
        for s in scene.slots:
            if not s.is_empty and s.category != scene.library.category_of("table"):
                assert not s.welded


def test_sample_raw_drop_rests_on_supports():
    # dropped objects end up in contact rather than floating at spawn height
    grammar = build_toyshelf()
    scene = sample_raw(grammar, seed=3)
    lib = scene.library
    box_cat = lib.category_of("box")
    tier_rest = np.array([0.02, 0.32, 0.62]) + np.sqrt(0.06**2)  # tier top contact
    for s in scene.slots:
        if s.category != box_cat:
            continue
        z = s.translation[2]
        near_tier = np.any(np.abs(z - tier_rest) < 5e-3)
        # boxes stacked on boxes sit ~0.08 above another box
        others = [
            t.translation[2]
            for t in scene.slots
            if t.category == box_cat and t is not s
        ]
        near_stack = any(abs(z - (oz + np.sqrt(0.08**2 - 0.0))) < 5e-3 for oz in others)
        assert near_tier or near_stack, f"box at z={z} is floating"


def test_sample_feasible_reports_clean():
    for name in ("toytable", "toyshelf"):
        grammar = builtin_grammar(name)
        for seed in range(8):
            scene, attempts = sample_feasible(grammar, seed=seed)
            assert attempts >= 1
            report = feasibility_report(scene)
            assert not report.flagged().any()
            assert total_penetration(scene) == 0.0


def test_sample_feasible_deterministic():
    grammar = build_toytable()
    a, na = sample_feasible(grammar, seed=11)
    b, nb = sample_feasible(grammar, seed=11)
    assert scenes_equal(a, b) and na == nb


def test_sample_feasible_rejection_rate():
    # pebble at z=0.05 uniform in x over [-2, 2]; overlaps the welded unit
    # sphere iff x^2 + 0.05^2 < 1.05^2, so P(reject) = sqrt(1.1)/2 per draw.
    lib = _balls_library()
    symbols = {
        "root": SymbolDef(
            name="root",
            asset="anchor",
            welded=True,
            children=(
                ChildRule(
                    symbol="pebble",
                    count=CountDist.fixed(1),
                    translation=PlacementDist.box([-2.0, 0.0, 0.05], [2.0, 0.0, 0.05]),
                    rotation=RotationDist("fixed"),
                ),
            ),
        ),
        "pebble": SymbolDef(name="pebble", asset="pebble"),
    }
    grammar = Grammar(name="rej", library=lib, root="root", symbols=symbols, capacity=4)
    p_accept = 1.0 - np.sqrt(1.1) / 2.0
    trials = 300
    attempts = np.array([sample_feasible(grammar, seed=50_000 + k)[1] for k in range(trials)])
    mean, var = 1.0 / p_accept, (1.0 - p_accept) / p_accept**2
    assert abs(attempts.mean() - mean) < 3.0 * np.sqrt(var / trials)
    # accepted iff overlap depth <= the report tolerance 1e-4
    x_min = np.sqrt((1.05 - 1e-4) ** 2 - 0.05**2)
    for k in range(5):
        scene, _ = sample_feasible(grammar, seed=50_000 + k)
        x = [s.translation[0] for s in scene.slots if s.category == lib.category_of("pebble")][0]
        assert abs(x) >= x_min - 1e-9


def test_sample_feasible_gives_up():
    lib = _balls_library()
    symbols = {
        "root": SymbolDef(
            name="root",
            asset="pebble",
            children=(
                ChildRule(
                    symbol="other",
                    count=CountDist.fixed(1),
                    translation=PlacementDist.at([0.0, 0.0, 0.0]),  # always overlapping
                    rotation=RotationDist("fixed"),
                ),
            ),
        ),
        "other": SymbolDef(name="other", asset="pebble"),
    }
    grammar = Grammar(name="doomed", library=lib, root="root", symbols=symbols, capacity=4)
    with pytest.raises(InfeasibleSampleError) as exc:
        sample_feasible(grammar, seed=0, max_attempts=5)
    assert exc.value.attempts == 5


# ---------------------------------------------------------------------------
# Annotation
# ---------------------------------------------------------------------------


def test_word_number_and_pluralize():
    assert word_number(0) == "zero"
    assert word_number(2) == "two"
    assert word_number(10) == "ten"
    assert word_number(11) == "11"
    assert pluralize("cup") == "cups"
    assert pluralize("box") == "boxes"
    assert pluralize("dish") == "dishes"
    assert pluralize("berry") == "berries"
    assert pluralize("tray") == "trays"


def _desk_scene(specs, capacity=16):
    from scenediff.assets import builtin_library

    lib = builtin_library("desk")
    slots = tuple(
        ObjectSlot(
            category=lib.category_of(name),
            translation=np.asarray(t, dtype=np.float64),
            rotation=Rotation.identity(),
            welded=welded,
        )
        for name, t, welded in specs
    )
    return Scene(capacity=capacity, library=lib, slots=slots)


def test_annotate_count():
    scene = _desk_scene([("plate", [0, 0, 0.435], False), ("cup", [0.2, 0, 0.425], False)])
    assert annotate(scene, "count") == "A scene with 2 objects."
    single = _desk_scene([("plate", [0, 0, 0.435], False)])
    assert annotate(single, "count") == "A scene with 1 object."
    empty = Scene.empty(4, scene.library)
    assert annotate(empty, "count") == "A scene with 0 objects."


def test_annotate_names_grouping_and_articles():
    scene = _desk_scene(
        [
            ("cup", [0.2, 0.0, 0.425], False),
            ("plate", [0.0, 0.0, 0.435], False),
            ("cup", [0.3, 0.0, 0.425], False),
        ]
    )
    # library order puts plate before cup regardless of slot order
    assert annotate(scene, "names") == "A scene with a plate and two cups."
    lib = _fruit_library()
    slots = tuple(
        ObjectSlot(category=lib.category_of(n), translation=np.array([0.1 * i, 0.0, 0.04]), rotation=Rotation.identity())
        for i, n in enumerate(["apple", "berry", "berry", "box", "box", "box"])
    )
    scene2 = Scene(capacity=8, library=lib, slots=slots)
    assert annotate(scene2, "names") == "A scene with an apple, two berries and three boxes."


def test_annotate_names_numerals_beyond_ten():
    lib = _fruit_library()
    slots = tuple(
        ObjectSlot(category=lib.category_of("berry"), translation=np.array([0.1 * i, 0.0, 0.01]), rotation=Rotation.identity())
        for i in range(11)
    )
    scene = Scene(capacity=16, library=lib, slots=slots)
    assert annotate(scene, "names") == "A scene with 11 berries."


def test_annotate_relations_on_top():
    scene = _desk_scene(
        [
            ("table", [0.0, 0.0, 0.0], True),
            ("plate", [0.1, 0.0, 0.435], False),
        ]
    )
    text = annotate(scene, "relations", seed=0)
    assert text == "A scene with a table and a plate. The plate is on top of the table."


def test_annotate_relations_ordinals_for_stacks():
    scene = _desk_scene(
        [
            ("box", [0.0, 0.0, 0.04], False),
            ("box", [0.0, 0.0, 0.12], False),
        ]
    )
    text = annotate(scene, "relations", seed=0)
    assert text == "A scene with two boxes. The second box is on top of the first box."


def test_annotate_relations_inside_and_left():
    scene = _desk_scene(
        [
            ("shelf", [0.0, 0.0, 0.0], True),
            ("box", [0.0, 0.0, 0.38], False),
        ]
    )
    assert (
        annotate(scene, "relations", seed=0)
        == "A scene with a shelf and a box. The box is inside the shelf."
    )
    pair = _desk_scene(
        [
            ("cup", [-0.2, 0.0, 0.025], False),
            ("fruit", [-0.05, 0.0, 0.02], False),
        ]
    )
    assert (
        annotate(pair, "relations", seed=0)
        == "A scene with a cup and a fruit. The cup is to the left of the fruit."
    )


def test_annotate_relations_caps_sentence_count():
    # three stacked boxes produce two on-top relations plus nothing else
    scene = _desk_scene(
        [
            ("box", [0.0, 0.0, 0.04], False),
            ("box", [0.0, 0.0, 0.12], False),
            ("box", [0.0, 0.0, 0.20], False),
        ]
    )
    text = annotate(scene, "relations", seed=1, max_relations=2)
    assert text.count(".") == 3  # listing + exactly two relation sentences
    assert "on top of" in text


def test_annotate_relations_distance_gate():
    scene = _desk_scene(
        [
            ("cup", [-5.0, 0.0, 0.025], False),
            ("fruit", [5.0, 0.0, 0.02], False),
        ]
    )
    # too far apart for any relation: falls back to the names sentence
    assert annotate(scene, "relations", seed=0) == "A scene with a cup and a fruit."


def test_annotate_relations_empty_scene_and_bad_kind():
    from scenediff.assets import builtin_library

    empty = Scene.empty(4, builtin_library("desk"))
    assert annotate(empty, "names") == "An empty scene."
    with pytest.raises(ValueError):
        annotate(empty, "direction")


def test_annotations_on_sampled_scenes_parse_roundtrip():
    grammar = build_toytable()
    for seed in range(5):
        scene, _ = sample_feasible(grammar, seed=seed)
        count_text = annotate(scene, "count")
        assert str(scene.object_count()) in count_text
        names_text = annotate(scene, "names")
        assert names_text.startswith("A scene with")
        relations_text = annotate(scene, "relations", seed=seed)
        assert relations_text.startswith(names_text[:-1])


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def test_grammar_json_roundtrip(tmp_path):
    for build in (build_toytable, build_toyshelf):
        g = build()
        d = grammar_to_dict(g)
        g2 = grammar_from_dict(d)
        assert grammar_to_dict(g2) == d
        # sampling behavior survives the round trip
        assert scenes_equal(sample_raw(g, seed=42), sample_raw(g2, seed=42))
        path = tmp_path / f"{g.name}.json"
        save_grammar(g, str(path))
        g3 = load_grammar(str(path))
        assert grammar_to_dict(g3) == d


def test_builtin_grammar_lookup():
    assert builtin_grammar("toytable").name == "toytable"
    assert load_grammar("toyshelf").name == "toyshelf"
    with pytest.raises(GrammarError):
        builtin_grammar("warehouse")
