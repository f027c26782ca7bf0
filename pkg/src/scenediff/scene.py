"""Scene types and the codec between scenes and flat tensors.

A :class:`Scene` is a fixed-capacity set of object slots.  Each slot holds a
category (0 = empty), a translation, a rotation, and a welded flag.  Scenes
encode to an ``(N, K + 12)`` float array per slot: one-hot category block,
translation, then the row-major rotation matrix.  The codec is exact for
clean scenes and tolerant of continuous-valued category blocks (argmax with
lowest-index tie-breaking) so the same decoder serves both the mixed and the
fully continuous generative modes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from scenediff.assets import AssetLibrary
from scenediff.rotations import Rotation, project_rotation_9d

TRANSLATION_DIMS = 3
ROTATION_DIMS = 9
POSE_DIMS = TRANSLATION_DIMS + ROTATION_DIMS


class DecodeError(ValueError):
    """Raised when a tensor cannot be decoded into a valid scene."""


def _readonly_vec(v, n) -> np.ndarray:
    arr = np.array(v, dtype=np.float64).reshape(n)
    if not np.all(np.isfinite(arr)):
        raise ValueError("nonfinite values in slot data")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ObjectSlot:
    """One slot of a scene: either empty or a posed object instance."""

    category: int
    translation: np.ndarray
    rotation: Rotation
    welded: bool = False

    def __post_init__(self):
        object.__setattr__(self, "category", int(self.category))
        if self.category < 0:
            raise ValueError("category must be nonnegative")
        object.__setattr__(self, "translation", _readonly_vec(self.translation, 3))
        if self.category == 0 and self.welded:
            raise ValueError("empty slots cannot be welded")

    @classmethod
    def empty(cls) -> "ObjectSlot":
        return cls(category=0, translation=np.zeros(3), rotation=Rotation.identity(), welded=False)

    @property
    def is_empty(self) -> bool:
        return self.category == 0


@dataclass(frozen=True, eq=False)
class Scene:
    """A fixed-capacity multiset of posed objects over an asset library."""

    capacity: int
    library: AssetLibrary
    slots: tuple[ObjectSlot, ...] = field(default_factory=tuple)

    def __post_init__(self):
        slots = tuple(self.slots)
        if len(slots) > self.capacity:
            raise ValueError(f"{len(slots)} slots exceed capacity {self.capacity}")
        if len(slots) < self.capacity:
            slots = slots + tuple(ObjectSlot.empty() for _ in range(self.capacity - len(slots)))
        for s in slots:
            if s.category >= self.library.num_categories:
                raise ValueError(f"slot category {s.category} out of range for library {self.library.name!r}")
        object.__setattr__(self, "slots", slots)

    @classmethod
    def empty(cls, capacity: int, library: AssetLibrary) -> "Scene":
        return cls(capacity=capacity, library=library, slots=())

    def object_count(self) -> int:
        """Number of non-empty slots."""
        return sum(1 for s in self.slots if not s.is_empty)

    def categories(self) -> np.ndarray:
        return np.array([s.category for s in self.slots], dtype=np.int64)

    def replace_slot(self, index: int, slot: ObjectSlot) -> "Scene":
        slots = list(self.slots)
        slots[index] = slot
        return Scene(capacity=self.capacity, library=self.library, slots=tuple(slots))

    def with_capacity(self, capacity: int) -> "Scene":
        if capacity < self.capacity:
            raise ValueError("cannot shrink a scene")
        return Scene(capacity=capacity, library=self.library, slots=self.slots)


def permute(scene: Scene, perm) -> Scene:
    """Reorder slots: result slot ``i`` is input slot ``perm[i]``."""
    perm = np.asarray(perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(scene.capacity)):
        raise ValueError("perm must be a permutation of range(capacity)")
    return Scene(
        capacity=scene.capacity,
        library=scene.library,
        slots=tuple(scene.slots[int(j)] for j in perm),
    )


# --------------------------------------------------------------------------
# Tensor codec
# --------------------------------------------------------------------------


def tensor_width(library: AssetLibrary) -> int:
    return library.num_categories + POSE_DIMS


def encode(scene: Scene) -> np.ndarray:
    """Encode a scene as an ``(N, K + 12)`` float64 array.

    Row layout: one-hot category over K classes, then translation (3), then
    the row-major rotation matrix (9).  Empty slots carry the canonical pose
    (zero translation, identity rotation).
    """
    k = scene.library.num_categories
    out = np.zeros((scene.capacity, k + POSE_DIMS), dtype=np.float64)
    for i, s in enumerate(scene.slots):
        out[i, s.category] = 1.0
        out[i, k : k + 3] = s.translation
        out[i, k + 3 :] = s.rotation.as_nine()
    return out


def encode_split(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Encode as (categories ``(N,)`` int64, pose ``(N, 12)`` float64)."""
    cats = scene.categories()
    k = scene.library.num_categories
    full = encode(scene)
    return cats, full[:, k:]


def decode(
    values: np.ndarray,
    library: AssetLibrary,
    welded=None,
    finalize_rotations: bool = False,
) -> Scene:
    """Decode an ``(N, K + 12)`` array back into a scene.

    Categories are taken by argmax over the one-hot block with ties broken
    toward the lowest index.  Empty slots are normalised to the canonical
    pose.  With ``finalize_rotations`` the 9D rotation block is projected to
    the nearest rotation matrix first; otherwise it is taken as-is.
    """
    arr = np.asarray(values, dtype=np.float64)
    k = library.num_categories
    if arr.ndim != 2 or arr.shape[1] != k + POSE_DIMS:
        raise DecodeError(f"expected (N, {k + POSE_DIMS}) array, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DecodeError("nonfinite values in scene tensor")
    cats = np.argmax(arr[:, :k], axis=1)
    return decode_mixed(cats, arr[:, k:], library, welded=welded, finalize_rotations=finalize_rotations)


def decode_mixed(
    categories: np.ndarray,
    pose: np.ndarray,
    library: AssetLibrary,
    welded=None,
    finalize_rotations: bool = False,
) -> Scene:
    """Decode from (categories, pose block) pairs; see :func:`decode`."""
    cats = np.asarray(categories, dtype=np.int64)
    pose = np.asarray(pose, dtype=np.float64)
    n = cats.shape[0]
    if pose.shape != (n, POSE_DIMS):
        raise DecodeError(f"expected ({n}, {POSE_DIMS}) pose block, got {pose.shape}")
    if not np.all(np.isfinite(pose)):
        raise DecodeError("nonfinite values in pose block")
    if np.any(cats < 0) or np.any(cats >= library.num_categories):
        raise DecodeError("category index out of range")
    if welded is None:
        welded = [False] * n
    slots = []
    for i in range(n):
        if cats[i] == 0:
            slots.append(ObjectSlot.empty())
            continue
        nine = pose[i, 3:]
        if finalize_rotations:
            nine = project_rotation_9d(nine).reshape(9)
        slots.append(
            ObjectSlot(
                category=int(cats[i]),
                translation=pose[i, :3],
                rotation=Rotation(  # bypass normalisation: values taken as-is
                    "nine", nine
                ),
                welded=bool(welded[i]),
            )
        )
    return Scene(capacity=n, library=library, slots=tuple(slots))


def scenes_equal(a: Scene, b: Scene) -> bool:
    """Exact equality of capacity, library name, and every slot."""
    if a.capacity != b.capacity or a.library.name != b.library.name:
        return False
    for sa, sb in zip(a.slots, b.slots):
        if sa.category != sb.category or sa.welded != sb.welded:
            return False
        if not np.array_equal(sa.translation, sb.translation):
            return False
        if not np.array_equal(sa.rotation.as_nine(), sb.rotation.as_nine()):
            return False
    return True


# --------------------------------------------------------------------------
# Inpainting masks
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class InpaintMask:
    """Per-slot regeneration flags for category and pose components."""

    regen_category: np.ndarray
    regen_pose: np.ndarray

    def __post_init__(self):
        rc = np.array(self.regen_category, dtype=bool).reshape(-1)
        rp = np.array(self.regen_pose, dtype=bool).reshape(-1)
        if rc.shape != rp.shape:
            raise ValueError("mask component lengths differ")
        rc.flags.writeable = False
        rp.flags.writeable = False
        object.__setattr__(self, "regen_category", rc)
        object.__setattr__(self, "regen_pose", rp)

    @property
    def capacity(self) -> int:
        return self.regen_category.shape[0]

    def any_regen(self) -> bool:
        return bool(self.regen_category.any() or self.regen_pose.any())

    def masked_slots(self) -> np.ndarray:
        """Indices of slots with any regeneration flag set."""
        return np.nonzero(self.regen_category | self.regen_pose)[0]

    @classmethod
    def none(cls, capacity: int) -> "InpaintMask":
        z = np.zeros(capacity, dtype=bool)
        return cls(z, z.copy())

    @classmethod
    def all_free(cls, scene: Scene) -> "InpaintMask":
        """Regenerate everything except welded slots."""
        keep = np.array([s.welded for s in scene.slots])
        return cls(~keep, ~keep)

    @classmethod
    def pose_only(cls, scene: Scene) -> "InpaintMask":
        """Regenerate poses of existing non-welded objects; categories fixed."""
        movable = np.array([(not s.is_empty) and (not s.welded) for s in scene.slots])
        return cls(np.zeros(scene.capacity, dtype=bool), movable)

    @classmethod
    def completion(cls, scene: Scene) -> "InpaintMask":
        """Regenerate only the empty slots (scene completion)."""
        empty = np.array([s.is_empty for s in scene.slots])
        return cls(empty, empty.copy())

    @classmethod
    def for_slots(cls, scene: Scene, indices) -> "InpaintMask":
        """Regenerate both components of the given slots, skipping welded ones."""
        rc = np.zeros(scene.capacity, dtype=bool)
        for i in indices:
            if not scene.slots[int(i)].welded:
                rc[int(i)] = True
        return cls(rc, rc.copy())


# --------------------------------------------------------------------------
# Scene JSON files
# --------------------------------------------------------------------------


def _fmt_float(v: float) -> str:
    return format(float(v), ".17g")


def scene_to_json(scene: Scene) -> str:
    """Serialise a scene with floats at 17 significant digits (lossless)."""
    obj_strs = []
    for s in scene.slots:
        name = scene.library.name_of(s.category)
        t = ", ".join(_fmt_float(v) for v in s.translation)
        r = ", ".join(_fmt_float(v) for v in s.rotation.as_nine())
        obj_strs.append(
            f'{{"category": {json.dumps(name)}, "translation": [{t}], '
            f'"rotation": [{r}], "welded": {"true" if s.welded else "false"}}}'
        )
    objects = ", ".join(obj_strs)
    return (
        f'{{"capacity": {scene.capacity}, "library": {json.dumps(scene.library.name)}, '
        f'"objects": [{objects}]}}'
    )


def write_scene(scene: Scene, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(scene_to_json(scene))
        f.write("\n")


def scene_from_dict(d: dict, library: AssetLibrary) -> Scene:
    if d["library"] != library.name:
        raise ValueError(f'scene references library {d["library"]!r}, got {library.name!r}')
    slots = []
    for o in d["objects"]:
        cat = library.category_of(o["category"])
        if cat == 0:
            slots.append(ObjectSlot.empty())
        else:
            slots.append(
                ObjectSlot(
                    category=cat,
                    translation=np.asarray(o["translation"], dtype=np.float64),
                    rotation=Rotation("nine", np.asarray(o["rotation"], dtype=np.float64)),
                    welded=bool(o["welded"]),
                )
            )
    return Scene(capacity=int(d["capacity"]), library=library, slots=tuple(slots))


def read_scene(path: str, library: AssetLibrary) -> Scene:
    with open(path, "r", encoding="utf-8") as f:
        return scene_from_dict(json.load(f), library)
