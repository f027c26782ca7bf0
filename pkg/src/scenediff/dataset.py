"""Dataset generation and JSONL persistence for scene-prompt pairs.

Each record pairs one feasible scene with one prompt string.  Generation
draws scenes from a grammar by rejection sampling and emits one record per
annotation kind per scene, so a scene typically appears under a count
prompt, a name-listing prompt, and a relation prompt.  Records serialize to
JSON Lines with floats at 17 significant digits, which round-trips float64
exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from scenediff.assets import AssetLibrary, load_library
from scenediff.grammar import ANNOTATION_KINDS, Grammar, annotate, sample_feasible
from scenediff.rng import derive_seed
from scenediff.scene import Scene, scene_from_dict, scene_to_json


@dataclass(frozen=True)
class SceneRecord:
    """One (scene, prompt) supervision pair."""

    scene: Scene
    prompt: str
    kind: str  # annotation kind that produced the prompt
    scene_id: int  # index of the underlying scene within its dataset

    def to_json(self) -> str:
        return (
            f'{{"scene_id": {self.scene_id}, "kind": {json.dumps(self.kind)}, '
            f'"prompt": {json.dumps(self.prompt)}, "scene": {scene_to_json(self.scene)}}}'
        )


def generate_dataset(
    grammar: Grammar,
    num_scenes: int,
    seed: int,
    kinds: tuple[str, ...] = ANNOTATION_KINDS,
) -> list[SceneRecord]:
    """Sample ``num_scenes`` feasible scenes and annotate each with every kind."""
    for kind in kinds:
        if kind not in ANNOTATION_KINDS:
            raise ValueError(f"unknown annotation kind {kind!r}")
    records: list[SceneRecord] = []
    for i in range(num_scenes):
        scene, _ = sample_feasible(grammar, derive_seed(seed, 0, i))
        for k, kind in enumerate(kinds):
            prompt = annotate(scene, kind, seed=derive_seed(seed, 1, i, k))
            records.append(SceneRecord(scene=scene, prompt=prompt, kind=kind, scene_id=i))
    return records


def write_records(records: list[SceneRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(rec.to_json())
            f.write("\n")


def read_records(path: str, library: AssetLibrary) -> list[SceneRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            records.append(
                SceneRecord(
                    scene=scene_from_dict(d["scene"], library),
                    prompt=d["prompt"],
                    kind=d["kind"],
                    scene_id=int(d["scene_id"]),
                )
            )
    return records


def unique_scenes(records: list[SceneRecord]) -> list[Scene]:
    """The underlying scenes in scene_id order, one per id."""
    seen: dict[int, Scene] = {}
    for rec in records:
        seen.setdefault(rec.scene_id, rec.scene)
    return [seen[i] for i in sorted(seen)]


def dataset_stats(records: list[SceneRecord]) -> dict:
    """Summary statistics for a manifest: sizes, count and category histograms."""
    scenes = unique_scenes(records)
    if not scenes:
        return {"num_records": 0, "num_scenes": 0}
    library = scenes[0].library
    capacity = max(s.capacity for s in scenes)
    count_hist = np.zeros(capacity + 1, dtype=np.int64)
    cat_hist = np.zeros(library.num_categories, dtype=np.int64)
    for s in scenes:
        count_hist[s.object_count()] += 1
        for slot in s.slots:
            if not slot.is_empty:
                cat_hist[slot.category] += 1
    kinds: dict[str, int] = {}
    for rec in records:
        kinds[rec.kind] = kinds.get(rec.kind, 0) + 1
    return {
        "num_records": len(records),
        "num_scenes": len(scenes),
        "capacity": capacity,
        "library": library.name,
        "records_per_kind": kinds,
        "mean_objects": float(np.arange(capacity + 1) @ count_hist / len(scenes)),
        "count_histogram": count_hist.tolist(),
        "category_histogram": {library.name_of(c): int(cat_hist[c]) for c in range(1, library.num_categories)},
    }


def write_manifest(path: str, grammar: Grammar, seed: int, records: list[SceneRecord]) -> dict:
    manifest = {
        "grammar": grammar.name,
        "library": grammar.library.name,
        "library_hash": grammar.library.content_hash(),
        "seed": seed,
        **dataset_stats(records),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return manifest


def load_dataset(jsonl_path: str, library_name_or_path: str) -> list[SceneRecord]:
    return read_records(jsonl_path, load_library(library_name_or_path))
