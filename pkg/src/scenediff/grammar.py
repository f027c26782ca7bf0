"""Probabilistic scene grammars and text annotation.

A grammar expands a root symbol into a set of posed objects.  Every symbol
optionally emits an asset and spawns children via rules that carry a bounded
child-count distribution plus placement distributions for the relative
translation (uniform box or isotropic Gaussian) and rotation (fixed, uniform
yaw, or uniform over SO(3)).  Rules may mark the emitted child object to be
dropped vertically onto whatever already lies below it, which makes support
relations (stacks, objects on tabletops) exact by construction; residual
infeasibility — mostly lateral overlap between independently placed objects —
is handled by per-attempt rejection in :func:`sample_feasible`.

Annotation turns scenes into prompt strings of three kinds: total object
counts, per-category name listings, and listings extended with spatial
relation sentences.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from scenediff.assets import AssetLibrary, builtin_library
from scenediff.feasibility import drop_delta, feasibility_report, signed_distance
from scenediff.rng import derive_seed, np_rng
from scenediff.rotations import Rotation, random_rotation
from scenediff.scene import ObjectSlot, Scene


class GrammarError(ValueError):
    """Invalid grammar definition or failed expansion."""


class InfeasibleSampleError(RuntimeError):
    """Rejection sampling hit the attempt budget without a feasible scene."""

    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


# --------------------------------------------------------------------------
# Distributions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CountDist:
    """Discrete bounded distribution over child instance counts."""

    values: tuple[int, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        ps = tuple(float(p) for p in self.probs)
        if len(vals) != len(ps) or not vals:
            raise GrammarError("count distribution needs matching values/probs")
        if any(v < 0 for v in vals):
            raise GrammarError("counts must be nonnegative")
        if any(p < 0 for p in ps) or abs(sum(ps) - 1.0) > 1e-9:
            raise GrammarError("count probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "probs", ps)

    @classmethod
    def fixed(cls, n: int) -> "CountDist":
        return cls((n,), (1.0,))

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "CountDist":
        vals = tuple(range(lo, hi + 1))
        return cls(vals, tuple(1.0 / len(vals) for _ in vals))

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.values, p=self.probs))

    def max(self) -> int:
        return max(v for v, p in zip(self.values, self.probs) if p > 0)


@dataclass(frozen=True)
class PlacementDist:
    """Relative-translation distribution: axis-aligned box or isotropic Gaussian."""

    kind: str  # "uniform_box" | "gaussian"
    a: np.ndarray  # low / mean
    b: np.ndarray  # high / [std]

    def __post_init__(self):
        if self.kind not in ("uniform_box", "gaussian"):
            raise GrammarError(f"unknown placement kind {self.kind!r}")
        a = np.asarray(self.a, dtype=np.float64).reshape(3)
        object.__setattr__(self, "a", a)
        if self.kind == "uniform_box":
            b = np.asarray(self.b, dtype=np.float64).reshape(3)
            if np.any(b < a):
                raise GrammarError("uniform box needs high >= low")
        else:
            b = np.asarray(self.b, dtype=np.float64).reshape(-1)[:1]
            if b[0] < 0:
                raise GrammarError("gaussian std must be nonnegative")
        object.__setattr__(self, "b", b)

    @classmethod
    def box(cls, low, high) -> "PlacementDist":
        return cls("uniform_box", np.asarray(low, float), np.asarray(high, float))

    @classmethod
    def at(cls, point) -> "PlacementDist":
        return cls.box(point, point)

    @classmethod
    def gaussian(cls, mean, std: float) -> "PlacementDist":
        return cls("gaussian", np.asarray(mean, float), np.array([std]))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "uniform_box":
            return rng.uniform(self.a, self.b)
        return self.a + self.b[0] * rng.standard_normal(3)


@dataclass(frozen=True)
class RotationDist:
    """Relative-rotation distribution: fixed, uniform yaw, or uniform SO(3)."""

    kind: str  # "fixed" | "uniform_yaw" | "uniform_so3"
    matrix: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform_yaw", "uniform_so3"):
            raise GrammarError(f"unknown rotation kind {self.kind!r}")
        object.__setattr__(self, "matrix", np.asarray(self.matrix, dtype=np.float64).reshape(3, 3))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "fixed":
            return self.matrix.copy()
        if self.kind == "uniform_yaw":
            return Rotation.yaw(rng.uniform(0.0, 2.0 * np.pi)).as_matrix()
        return random_rotation(rng).as_matrix()


# --------------------------------------------------------------------------
# Symbols and grammars
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ChildRule:
    symbol: str
    count: CountDist
    translation: PlacementDist
    rotation: RotationDist
    drop: bool = False


@dataclass(frozen=True)
class SymbolDef:
    name: str
    asset: str | None = None
    welded: bool | None = None  # None -> the asset's default
    children: tuple[ChildRule, ...] = ()


@dataclass(frozen=True)
class Grammar:
    name: str
    library: AssetLibrary
    root: str
    symbols: dict[str, SymbolDef]
    capacity: int

    def __post_init__(self):
        if self.root not in self.symbols:
            raise GrammarError(f"root symbol {self.root!r} undefined")
        for sym in self.symbols.values():
            if sym.asset is not None:
                self.library.category_of(sym.asset)  # raises on unknown
            for rule in sym.children:
                if rule.symbol not in self.symbols:
                    raise GrammarError(f"rule of {sym.name!r} references undefined symbol {rule.symbol!r}")
                if rule.drop and self.symbols[rule.symbol].asset is None:
                    raise GrammarError(f"drop placement requires an asset-emitting symbol ({rule.symbol!r})")
        self._check_acyclic()
        dist = count_distribution(self)
        max_count = int(np.max(np.nonzero(dist)[0]))
        if max_count > self.capacity:
            raise GrammarError(f"grammar can emit {max_count} objects, capacity is {self.capacity}")

    def _check_acyclic(self):
        state: dict[str, int] = {}

        def visit(name: str):
            if state.get(name) == 1:
                raise GrammarError(f"grammar has a cycle through {name!r}")
            if state.get(name) == 2:
                return
            state[name] = 1
            for rule in self.symbols[name].children:
                visit(rule.symbol)
            state[name] = 2

        visit(self.root)

    def symbol_welded(self, sym: SymbolDef) -> bool:
        if sym.asset is None:
            return False
        if sym.welded is not None:
            return sym.welded
        return self.library.asset_for(self.library.category_of(sym.asset)).default_welded


def count_distribution(grammar: Grammar) -> np.ndarray:
    """Exact distribution of the total object count, by dynamic programming.

    Index ``k`` of the returned vector is the probability of a scene with
    exactly ``k`` objects.  Subtree distributions compose by convolution;
    a rule contributes the count-mixture of iterated self-convolutions.
    """
    memo: dict[str, np.ndarray] = {}

    def sym_dist(name: str) -> np.ndarray:
        if name in memo:
            return memo[name]
        sym = grammar.symbols[name]
        base = np.zeros(2 if sym.asset else 1)
        base[1 if sym.asset else 0] = 1.0
        for rule in sym.children:
            child = sym_dist(rule.symbol)
            max_n = rule.count.max()
            powers = [np.array([1.0])]
            for _ in range(max_n):
                powers.append(np.convolve(powers[-1], child))
            width = max(len(powers[n]) for n, p in zip(rule.count.values, rule.count.probs) if p > 0)
            mix = np.zeros(width)
            for v, p in zip(rule.count.values, rule.count.probs):
                if p > 0:
                    mix[: len(powers[v])] += p * powers[v]
            base = np.convolve(base, mix)
        memo[name] = base
        return base

    d = sym_dist(grammar.root)
    return np.trim_zeros(d, "b") if d.any() else d


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------


def sample_raw(grammar: Grammar, seed: int) -> Scene:
    """One grammar expansion, without any feasibility check."""
    rng = np_rng(seed)
    lib = grammar.library
    placed: list[ObjectSlot] = []
    sup_centers: list[np.ndarray] = [np.zeros((0, 3))]
    sup_radii: list[np.ndarray] = [np.zeros(0)]

    def place_object(sym: SymbolDef, t: np.ndarray, r: np.ndarray, do_drop: bool) -> np.ndarray:
        cat = lib.category_of(sym.asset)
        asset = lib.asset_for(cat)
        centers = t[None, :] + asset.centers @ r.T
        if do_drop:
            delta = drop_delta(centers, asset.radii, np.concatenate(sup_centers), np.concatenate(sup_radii))
            t = t - np.array([0.0, 0.0, delta])
            centers = centers - np.array([0.0, 0.0, delta])[None, :]
        if len(placed) >= grammar.capacity:
            raise GrammarError(f"expansion exceeded capacity {grammar.capacity}")
        placed.append(
            ObjectSlot(
                category=cat,
                translation=t,
                rotation=Rotation.from_matrix(r),
                welded=grammar.symbol_welded(sym),
            )
        )
        sup_centers.append(centers)
        sup_radii.append(asset.radii.copy())
        return t

    def expand(name: str, t: np.ndarray, r: np.ndarray, drop: bool):
        sym = grammar.symbols[name]
        if sym.asset is not None:
            t = place_object(sym, t, r, drop)
        for rule in sym.children:
            n = rule.count.sample(rng)
            for _ in range(n):
                rel_t = rule.translation.sample(rng)
                rel_r = rule.rotation.sample(rng)
                expand(rule.symbol, t + r @ rel_t, r @ rel_r, rule.drop)

    expand(grammar.root, np.zeros(3), np.eye(3), drop=False)
    return Scene(capacity=grammar.capacity, library=lib, slots=tuple(placed))


def sample_feasible(grammar: Grammar, seed: int, max_attempts: int = 100) -> tuple[Scene, int]:
    """Rejection-sample until the feasibility report comes back clean.

    Re-seeds deterministically per attempt, so the result depends only on
    ``(grammar, seed)``.  Returns the scene and the number of attempts used.
    """
    for attempt in range(max_attempts):
        scene = sample_raw(grammar, derive_seed(seed, attempt))
        if not feasibility_report(scene).flagged().any():
            return scene, attempt + 1
    raise InfeasibleSampleError(
        f"no feasible sample from grammar {grammar.name!r} in {max_attempts} attempts",
        attempts=max_attempts,
    )


# --------------------------------------------------------------------------
# Annotation
# --------------------------------------------------------------------------

ANNOTATION_KINDS = ("count", "names", "relations")

_WORD_NUMBERS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"]
_ORDINALS = [
    "first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth",
    "ninth", "tenth", "eleventh", "twelfth", "thirteenth", "fourteenth", "fifteenth", "sixteenth",
]
RELATION_DISTANCE = 0.3  # max surface gap for a relation to be stated (meters)
ON_TOP_GAP = 0.02  # vertical alignment tolerance for "on top of" (meters)
LEFT_OF_MARGIN = 0.01  # minimum -x offset for "to the left of" (meters)


def word_number(n: int) -> str:
    """Word form up to ten, numerals beyond."""
    return _WORD_NUMBERS[n] if 0 <= n <= 10 else str(n)


def pluralize(name: str) -> str:
    if name.endswith(("s", "x", "z", "ch", "sh")):
        return name + "es"
    if name.endswith("y") and len(name) > 1 and name[-2] not in "aeiou":
        return name[:-1] + "ies"
    return name + "s"


def _article(name: str) -> str:
    return "an" if name[:1].lower() in "aeiou" else "a"


def _join_listing(parts: list[str]) -> str:
    if len(parts) == 1:
        return parts[0]
    return ", ".join(parts[:-1]) + " and " + parts[-1]


def _category_counts(scene: Scene) -> list[tuple[int, int]]:
    """(category, count) pairs in library order, non-empty categories only."""
    counts: dict[int, int] = {}
    for s in scene.slots:
        if not s.is_empty:
            counts[s.category] = counts.get(s.category, 0) + 1
    return sorted(counts.items())


def _names_sentence(scene: Scene) -> str:
    pairs = _category_counts(scene)
    if not pairs:
        return "An empty scene."
    parts = []
    for cat, n in pairs:
        name = scene.library.name_of(cat)
        if n == 1:
            parts.append(f"{_article(name)} {name}")
        else:
            parts.append(f"{word_number(n)} {pluralize(name)}")
    return f"A scene with {_join_listing(parts)}."


def _bounding_sphere(slot: ObjectSlot, library) -> tuple[np.ndarray, float]:
    asset = library.asset_for(slot.category)
    r = slot.rotation.as_matrix()
    centers = slot.translation[None, :] + asset.centers @ r.T
    centroid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - centroid, axis=1) + asset.radii))
    return centroid, radius


def _extent_z(slot: ObjectSlot, library) -> tuple[float, float]:
    asset = library.asset_for(slot.category)
    r = slot.rotation.as_matrix()
    centers = slot.translation[None, :] + asset.centers @ r.T
    return float(np.min(centers[:, 2] - asset.radii)), float(np.max(centers[:, 2] + asset.radii))


def _relation(scene: Scene, i: int, j: int) -> str | None:
    """The strongest relation of slot i relative to slot j, if any."""
    lib = scene.library
    a, b = scene.slots[i], scene.slots[j]
    if signed_distance(scene, i, j) > RELATION_DISTANCE:
        return None
    bottom_a, _ = _extent_z(a, lib)
    _, top_b = _extent_z(b, lib)
    if abs(bottom_a - top_b) < ON_TOP_GAP:
        off = np.linalg.norm(a.translation[:2] - b.translation[:2])
        asset_a = lib.asset_for(a.category)
        asset_b = lib.asset_for(b.category)
        if off < max(asset_a.bounding_radius(), asset_b.bounding_radius()):
            return "on top of"
    cb, rb = _bounding_sphere(b, lib)
    asset_a = lib.asset_for(a.category)
    ca = a.translation[None, :] + asset_a.centers @ a.rotation.as_matrix().T
    if np.all(np.linalg.norm(ca - cb[None], axis=1) + asset_a.radii <= rb):
        return "inside"
    if a.translation[0] <= b.translation[0] - LEFT_OF_MARGIN:
        return "to the left of"
    return None


def _instance_names(scene: Scene) -> dict[int, str]:
    """Slot index -> unambiguous phrase ("the plate", "the second box")."""
    pairs = _category_counts(scene)
    totals = dict(pairs)
    seen: dict[int, int] = {}
    out = {}
    for idx, s in enumerate(scene.slots):
        if s.is_empty:
            continue
        name = scene.library.name_of(s.category)
        k = seen.get(s.category, 0)
        seen[s.category] = k + 1
        if totals[s.category] == 1:
            out[idx] = f"the {name}"
        else:
            out[idx] = f"the {_ORDINALS[k]} {name}"
    return out


def annotate(scene: Scene, kind: str, seed: int = 0, max_relations: int = 2) -> str:
    """Render a prompt string describing the scene.

    ``count`` states the total object count; ``names`` lists categories with
    word-form numbers up to ten (numerals beyond); ``relations`` extends the
    listing with up to ``max_relations`` spatial relation sentences between
    nearby objects, using ordinals to disambiguate repeated categories.
    """
    if kind == "count":
        n = scene.object_count()
        noun = "object" if n == 1 else "objects"
        return f"A scene with {n} {noun}."
    if kind == "names":
        return _names_sentence(scene)
    if kind != "relations":
        raise ValueError(f"unknown annotation kind {kind!r}")

    base = _names_sentence(scene)
    occ = [i for i, s in enumerate(scene.slots) if not s.is_empty]
    found = []
    for i in occ:
        if scene.slots[i].welded:
            continue  # fixtures are scaffolding, not subjects worth describing
        for j in occ:
            if i == j:
                continue
            rel = _relation(scene, i, j)
            if rel is not None:
                found.append((i, rel, j))
    if not found:
        return base
    rng = np_rng(seed)
    take = min(max_relations, len(found))
    idx = sorted(rng.choice(len(found), size=take, replace=False).tolist())
    names = _instance_names(scene)
    sentences = []
    for k in idx:
        i, rel, j = found[k]
        sentences.append(f"{names[i].capitalize()} is {rel} {names[j]}.")
    return " ".join([base] + sentences)


# --------------------------------------------------------------------------
# JSON form
# --------------------------------------------------------------------------


def grammar_to_dict(g: Grammar) -> dict:
    def count_d(c: CountDist):
        return {"values": list(c.values), "probs": list(c.probs)}

    def placement_d(p: PlacementDist):
        if p.kind == "uniform_box":
            return {"kind": p.kind, "low": p.a.tolist(), "high": p.b.tolist()}
        return {"kind": p.kind, "mean": p.a.tolist(), "std": float(p.b[0])}

    def rotation_d(r: RotationDist):
        d = {"kind": r.kind}
        if r.kind == "fixed" and not np.array_equal(r.matrix, np.eye(3)):
            d["matrix"] = r.matrix.reshape(9).tolist()
        return d

    symbols = {}
    for name, sym in g.symbols.items():
        d: dict = {}
        if sym.asset is not None:
            d["asset"] = sym.asset
        if sym.welded is not None:
            d["welded"] = sym.welded
        if sym.children:
            d["children"] = [
                {
                    "symbol": rule.symbol,
                    "count": count_d(rule.count),
                    "translation": placement_d(rule.translation),
                    "rotation": rotation_d(rule.rotation),
                    "drop": rule.drop,
                }
                for rule in sym.children
            ]
        symbols[name] = d
    return {
        "name": g.name,
        "library": g.library.name,
        "capacity": g.capacity,
        "root": g.root,
        "symbols": symbols,
    }


def grammar_from_dict(d: dict, library: AssetLibrary | None = None) -> Grammar:
    lib = library if library is not None else builtin_library(d["library"])
    if lib.name != d["library"]:
        raise GrammarError(f'grammar expects library {d["library"]!r}, got {lib.name!r}')

    def count_d(c) -> CountDist:
        return CountDist(tuple(c["values"]), tuple(c["probs"]))

    def placement_d(p) -> PlacementDist:
        if p["kind"] == "uniform_box":
            return PlacementDist.box(p["low"], p["high"])
        if p["kind"] == "gaussian":
            return PlacementDist.gaussian(p["mean"], p["std"])
        raise GrammarError(f'unknown placement kind {p["kind"]!r}')

    def rotation_d(r) -> RotationDist:
        if r["kind"] == "fixed" and "matrix" in r:
            return RotationDist("fixed", np.asarray(r["matrix"], float).reshape(3, 3))
        return RotationDist(r["kind"])

    symbols = {}
    for name, sd in d["symbols"].items():
        children = tuple(
            ChildRule(
                symbol=c["symbol"],
                count=count_d(c["count"]),
                translation=placement_d(c["translation"]),
                rotation=rotation_d(c["rotation"]),
                drop=bool(c.get("drop", False)),
            )
            for c in sd.get("children", ())
        )
        symbols[name] = SymbolDef(
            name=name,
            asset=sd.get("asset"),
            welded=sd.get("welded"),
            children=children,
        )
    return Grammar(name=d["name"], library=lib, root=d["root"], symbols=symbols, capacity=int(d["capacity"]))


def save_grammar(g: Grammar, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(grammar_to_dict(g), f, indent=2)


def load_grammar(path_or_name: str, library: AssetLibrary | None = None) -> Grammar:
    if os.path.exists(path_or_name):
        with open(path_or_name, "r", encoding="utf-8") as f:
            return grammar_from_dict(json.load(f), library)
    return builtin_grammar(path_or_name)


# --------------------------------------------------------------------------
# Built-in grammars
# --------------------------------------------------------------------------

DEFAULT_CAPACITY = 16
_SHELF_TIER_TOPS = (0.12, 0.42, 0.72)  # nominal drop heights above each tier


def build_toytable(capacity: int = DEFAULT_CAPACITY) -> Grammar:
    """Welded table with 1-4 place settings of plates, cups, and fruit.

    Object counts span [2, 13].  Plates land on the tabletop, optional cups
    sit beside them, optional fruit rests on each plate with an unconstrained
    3D orientation.
    """
    lib = builtin_library("desk")
    symbols = {
        "table": SymbolDef(
            name="table",
            asset="table",
            welded=True,
            children=(
                ChildRule(
                    symbol="place_setting",
                    count=CountDist.uniform(1, 4),
                    translation=PlacementDist.box([-0.22, -0.22, 0.55], [0.22, 0.22, 0.55]),
                    rotation=RotationDist("uniform_yaw"),
                ),
            ),
        ),
        "place_setting": SymbolDef(
            name="place_setting",
            children=(
                ChildRule(
                    symbol="plate",
                    count=CountDist.fixed(1),
                    translation=PlacementDist.at([0.0, 0.0, 0.0]),
                    rotation=RotationDist("fixed"),
                    drop=True,
                ),
                ChildRule(
                    symbol="cup",
                    count=CountDist((0, 1), (0.5, 0.5)),
                    translation=PlacementDist.box([0.09, -0.03, 0.0], [0.13, 0.03, 0.0]),
                    rotation=RotationDist("uniform_yaw"),
                    drop=True,
                ),
            ),
        ),
        "plate": SymbolDef(
            name="plate",
            asset="plate",
            children=(
                ChildRule(
                    symbol="fruit",
                    count=CountDist((0, 1), (0.5, 0.5)),
                    translation=PlacementDist.box([-0.006, -0.006, 0.1], [0.006, 0.006, 0.1]),
                    rotation=RotationDist("uniform_so3"),
                    drop=True,
                ),
            ),
        ),
        "cup": SymbolDef(name="cup", asset="cup"),
        "fruit": SymbolDef(name="fruit", asset="fruit"),
    }
    return Grammar(name="toytable", library=lib, root="table", symbols=symbols, capacity=capacity)


def build_toyshelf(capacity: int = DEFAULT_CAPACITY) -> Grammar:
    """Welded three-tier shelf with a box stack of height <= 3 per tier.

    At most 1 + 3*3 = 10 objects; full stacks are rare under the grammar,
    which makes "fill every tier" a natural search target.
    """
    lib = builtin_library("desk")
    jitter = 0.003
    stack_step = [-jitter, -jitter, 0.1], [jitter, jitter, 0.1]
    symbols = {
        "shelf": SymbolDef(
            name="shelf",
            asset="shelf",
            welded=True,
            children=tuple(
                ChildRule(
                    symbol="stack_base",
                    count=CountDist((0, 1), (0.25, 0.75)),
                    translation=PlacementDist.box(
                        [-jitter, -jitter, top], [jitter, jitter, top]
                    ),
                    rotation=RotationDist("uniform_yaw"),
                    drop=True,
                )
                for top in _SHELF_TIER_TOPS
            ),
        ),
        "stack_base": SymbolDef(
            name="stack_base",
            asset="box",
            children=(
                ChildRule(
                    symbol="stack_mid",
                    count=CountDist((0, 1), (0.4, 0.6)),
                    translation=PlacementDist.box(*stack_step),
                    rotation=RotationDist("uniform_yaw"),
                    drop=True,
                ),
            ),
        ),
        "stack_mid": SymbolDef(
            name="stack_mid",
            asset="box",
            children=(
                ChildRule(
                    symbol="stack_top",
                    count=CountDist((0, 1), (0.5, 0.5)),
                    translation=PlacementDist.box(*stack_step),
                    rotation=RotationDist("uniform_yaw"),
                    drop=True,
                ),
            ),
        ),
        "stack_top": SymbolDef(name="stack_top", asset="box"),
    }
    return Grammar(name="toyshelf", library=lib, root="shelf", symbols=symbols, capacity=capacity)


_BUILTIN_GRAMMARS = {"toytable": build_toytable, "toyshelf": build_toyshelf}


def builtin_grammar(name: str, capacity: int = DEFAULT_CAPACITY) -> Grammar:
    try:
        return _BUILTIN_GRAMMARS[name](capacity)
    except KeyError:
        raise GrammarError(f"unknown grammar: {name!r}") from None
