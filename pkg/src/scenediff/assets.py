"""Asset definitions: rigid bodies approximated by unions of spheres.

Every placeable object type is an :class:`AssetDef` holding a sphere
decomposition (local-frame centers and radii) plus a mass and a default
welded flag.  An :class:`AssetLibrary` is an ordered collection of assets;
category index 0 is reserved for the empty slot and asset ``i`` occupies
category ``i + 1``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class AssetDef:
    """A rigid object approximated by a union of spheres.

    ``spheres`` is an (S, 4) array of rows ``[cx, cy, cz, radius]`` in the
    asset's local frame.  ``mass`` is informational for the quasi-static
    checks (only the volume-weighted centroid matters).  ``default_welded``
    marks assets that are fixed scaffolding (tables, shelves) unless a
    grammar overrides it.
    """

    name: str
    spheres: np.ndarray
    mass: float = 1.0
    default_welded: bool = False

    def __post_init__(self):
        arr = np.asarray(self.spheres, dtype=np.float64).reshape(-1, 4)
        if arr.shape[0] == 0:
            raise ValueError(f"asset {self.name!r} needs at least one sphere")
        if np.any(arr[:, 3] <= 0):
            raise ValueError(f"asset {self.name!r} has a nonpositive sphere radius")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"asset {self.name!r} has nonfinite sphere data")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "spheres", arr)

    @property
    def centers(self) -> np.ndarray:
        return self.spheres[:, :3]

    @property
    def radii(self) -> np.ndarray:
        return self.spheres[:, 3]

    def local_com(self) -> np.ndarray:
        """Volume-weighted centroid of the sphere decomposition."""
        w = self.radii**3
        return (self.centers * w[:, None]).sum(axis=0) / w.sum()

    def bounding_radius(self) -> float:
        """Radius of the smallest origin-centered sphere containing the asset."""
        return float(np.max(np.linalg.norm(self.centers, axis=1) + self.radii))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "spheres": [[float(v) for v in row] for row in self.spheres],
            "mass": float(self.mass),
            "default_welded": bool(self.default_welded),
        }


@dataclass(frozen=True)
class AssetLibrary:
    """Ordered asset collection defining the category vocabulary.

    Category 0 is the empty slot; asset ``assets[i]`` has category ``i + 1``.
    """

    name: str
    assets: tuple[AssetDef, ...] = field(default_factory=tuple)

    def __post_init__(self):
        names = [a.name for a in self.assets]
        if len(set(names)) != len(names):
            raise ValueError("duplicate asset names in library")
        if "empty" in names:
            raise ValueError('"empty" is reserved for category 0')
        object.__setattr__(self, "assets", tuple(self.assets))

    @property
    def num_categories(self) -> int:
        """Number of categories including the empty category."""
        return len(self.assets) + 1

    def category_of(self, name: str) -> int:
        if name == "empty":
            return 0
        for i, a in enumerate(self.assets):
            if a.name == name:
                return i + 1
        raise KeyError(f"unknown asset name: {name!r}")

    def name_of(self, category: int) -> str:
        if category == 0:
            return "empty"
        if 1 <= category <= len(self.assets):
            return self.assets[category - 1].name
        raise KeyError(f"category out of range: {category}")

    def asset_for(self, category: int) -> AssetDef:
        if not 1 <= category <= len(self.assets):
            raise KeyError(f"no asset for category {category}")
        return self.assets[category - 1]

    def to_dict(self) -> dict:
        return {"name": self.name, "assets": [a.to_dict() for a in self.assets]}

    def content_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "AssetLibrary":
        assets = tuple(
            AssetDef(
                name=a["name"],
                spheres=np.asarray(a["spheres"], dtype=np.float64),
                mass=float(a.get("mass", 1.0)),
                default_welded=bool(a.get("default_welded", False)),
            )
            for a in d["assets"]
        )
        return cls(name=d["name"], assets=assets)


# --------------------------------------------------------------------------
# Built-in desk-scale library shared by the shipped grammars.
#
# Flat supports are approximated by large-radius spheres whose top caps are
# locally plane-like; small items are single spheres so their translation
# coincides with their center of mass.
# --------------------------------------------------------------------------

_TABLE_TOP_Z = 0.4
_SLAB_R = 50.0
_SHELF_TIER_Z = (0.02, 0.32, 0.62)


def _desk_assets() -> tuple[AssetDef, ...]:
    table = AssetDef(
        name="table",
        spheres=np.array([[0.0, 0.0, _TABLE_TOP_Z - _SLAB_R, _SLAB_R]]),
        mass=20.0,
        default_welded=True,
    )
    plate = AssetDef("plate", np.array([[0.0, 0.0, 0.0, 0.035]]), mass=0.3)
    cup = AssetDef("cup", np.array([[0.0, 0.0, 0.0, 0.025]]), mass=0.2)
    fruit = AssetDef("fruit", np.array([[0.0, 0.0, 0.0, 0.02]]), mass=0.1)
    shelf = AssetDef(
        name="shelf",
        spheres=np.array([[0.0, 0.0, z, 0.02] for z in _SHELF_TIER_Z]),
        mass=30.0,
        default_welded=True,
    )
    box = AssetDef("box", np.array([[0.0, 0.0, 0.0, 0.04]]), mass=0.5)
    return (table, plate, cup, fruit, shelf, box)


_BUILTIN: dict[str, AssetLibrary] = {}


def builtin_library(name: str = "desk") -> AssetLibrary:
    """Return a shipped asset library by name."""
    if not _BUILTIN:
        _BUILTIN["desk"] = AssetLibrary(name="desk", assets=_desk_assets())
    try:
        return _BUILTIN[name]
    except KeyError:
        raise KeyError(f"unknown builtin library: {name!r}") from None


def load_library(path_or_name: str) -> AssetLibrary:
    """Load a library from a JSON file path, or by builtin name."""
    import os

    if os.path.exists(path_or_name):
        with open(path_or_name, "r", encoding="utf-8") as f:
            return AssetLibrary.from_dict(json.load(f))
    return builtin_library(path_or_name)
