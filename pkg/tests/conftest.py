"""Shared fixtures for the acceptance suite.

The trained models and sample sets that the acceptance criteria need are
expensive on one CPU, so they are built once and cached under ``.cache/``
at the repository root.  Cache keys hash the full recipe plus the source
of every module whose behaviour feeds the artifact, so editing the
implementation invalidates stale artifacts automatically.
"""

import hashlib
import json
import os

import pytest

import scenediff
from scenediff.assets import builtin_library
from scenediff.dataset import generate_dataset, load_dataset, write_manifest, write_records
from scenediff.diffusion import NoiseSchedule
from scenediff.grammar import builtin_grammar
from scenediff.model import ModelConfig, SceneDenoiser, build_vocab, load_checkpoint
from scenediff.scene import scene_from_dict, scene_to_json
from scenediff.training import TrainConfig, train

_PKG_DIR = os.path.dirname(scenediff.__file__)
_REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CACHE_ROOT = os.path.join(_REPO_ROOT, ".cache", "acceptance")


def _source_hash(*module_files: str) -> str:
    h = hashlib.sha256()
    for name in sorted(module_files):
        with open(os.path.join(_PKG_DIR, name), "rb") as f:
            h.update(name.encode())
            h.update(f.read())
    return h.hexdigest()


def cache_dir(name: str, key: dict) -> str:
    digest = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    path = os.path.join(CACHE_ROOT, f"{name}-{digest}")
    os.makedirs(path, exist_ok=True)
    meta = os.path.join(path, "meta.json")
    if not os.path.exists(meta):
        with open(meta, "w", encoding="utf-8") as f:
            json.dump(key, f, indent=2, sort_keys=True)
    return path


def write_scene_set(path: str, scenes) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in scenes:
            f.write(scene_to_json(s) + "\n")


def read_scene_set(path: str, library):
    with open(path, encoding="utf-8") as f:
        return [scene_from_dict(json.loads(line), library) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Cached training runs
# ---------------------------------------------------------------------------

_TRAIN_SOURCES = ("model.py", "training.py", "diffusion.py", "grammar.py",
                  "assets.py", "scene.py", "feasibility.py", "rng.py", "rotations.py")


def trained_run(name: str, grammar_name: str, mode: str, steps: int,
                num_scenes: int = 128, data_seed: int = 11, train_seed: int = 0,
                d_model: int = 64, num_double: int = 1, num_single: int = 2,
                max_prompt_len: int = 16, batch_size: int = 16,
                warmup_steps: int = 1000):
    """Train (or load) a model overfit to a small procedural dataset.

    Returns ``(model, vocab, schedule, library, records, run_dir)``.
    """
    key = {
        "grammar": grammar_name, "mode": mode, "steps": steps,
        "num_scenes": num_scenes, "data_seed": data_seed, "train_seed": train_seed,
        "d_model": d_model, "double": num_double, "single": num_single,
        "prompt_len": max_prompt_len, "batch": batch_size, "warmup": warmup_steps,
        "sources": _source_hash(*_TRAIN_SOURCES),
    }
    run_dir = cache_dir(name, key)
    grammar = builtin_grammar(grammar_name)
    scenes_path = os.path.join(run_dir, "scenes.jsonl")
    if not os.path.exists(scenes_path):
        records = generate_dataset(grammar, num_scenes, data_seed)
        write_records(records, scenes_path)
        write_manifest(os.path.join(run_dir, "manifest.json"), grammar, data_seed, records)
    records = load_dataset(scenes_path, grammar.library.name)

    checkpoint_path = os.path.join(run_dir, "checkpoint.pt")
    done_path = os.path.join(run_dir, "done")
    if os.path.exists(checkpoint_path) and os.path.exists(done_path):
        model, vocab, schedule, library, _ = load_checkpoint(checkpoint_path)
        return model, vocab, schedule, library, records, run_dir

    library = grammar.library
    vocab = build_vocab(library)
    schedule = NoiseSchedule()
    config = ModelConfig(
        mode=mode, num_categories=library.num_categories, vocab_size=len(vocab),
        d_model=d_model, num_heads=4, num_double_blocks=num_double,
        num_single_blocks=num_single, max_prompt_len=max_prompt_len,
    )
    model = SceneDenoiser(config, init_seed=train_seed)
    train_config = TrainConfig(steps=steps, batch_size=batch_size,
                               warmup_steps=warmup_steps, seed=train_seed)
    train(model, [records], vocab, schedule, library, train_config, run_dir)
    with open(done_path, "w") as f:
        f.write("ok\n")
    model, vocab, schedule, library, _ = load_checkpoint(checkpoint_path)
    return model, vocab, schedule, library, records, run_dir


def experiment_cache(name: str, key: dict):
    """(path, cached_payload_or_None) for a JSON-valued experiment result."""
    path = os.path.join(cache_dir(name, key), "result.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as f:
            return path, json.load(f)
    return path, None


# ---------------------------------------------------------------------------
# Session fixtures for the heavy runs
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def toytable_overfit():
    """Mixed-mode model overfit to 128 table scenes (the sample-quality rig)."""
    return trained_run("toytable-mixed", "toytable", "mixed", steps=20000)


@pytest.fixture(scope="session")
def toyshelf_overfit():
    """Mixed-mode model overfit to 128 shelf scenes (the search rig)."""
    return trained_run("toyshelf-mixed", "toyshelf", "mixed", steps=12000)


@pytest.fixture(scope="session")
def toytable_continuous():
    """Continuous-mode model for reward post-training."""
    return trained_run("toytable-cont", "toytable", "continuous", steps=12000)


@pytest.fixture(scope="session")
def overfit_samples(toytable_overfit):
    """200 unconditional draws from the overfit mixed model (cached)."""
    from scenediff.sampling import generate_scenes

    model, vocab, schedule, library, records, run_dir = toytable_overfit
    key = {
        "checkpoint": os.path.basename(run_dir), "seed": 2024, "num": 200,
        "sources": _source_hash("sampling.py", "diffusion.py", "model.py"),
    }
    path = os.path.join(cache_dir("toytable-samples", key), "scenes.jsonl")
    if not os.path.exists(path):
        scenes = generate_scenes(model, vocab, schedule, library, capacity=16,
                                 num_scenes=200, seed=2024)
        write_scene_set(path, scenes)
    return read_scene_set(path, library)


@pytest.fixture(scope="session")
def overfit_prompted(toytable_overfit):
    """Guided draws for every distinct count prompt in the training set.

    Returns ``(scenes, prompts)`` with four samples per prompt (cached).
    """
    from scenediff.rng import derive_seed
    from scenediff.sampling import generate_scenes

    model, vocab, schedule, library, records, run_dir = toytable_overfit
    guidance, per_prompt = 2.0, 4
    count_prompts = sorted({r.prompt for r in records if r.kind == "count"})
    key = {
        "checkpoint": os.path.basename(run_dir), "seed": 505, "guidance": guidance,
        "per_prompt": per_prompt, "prompts": count_prompts,
        "sources": _source_hash("sampling.py", "diffusion.py", "model.py"),
    }
    path = os.path.join(cache_dir("toytable-prompted", key), "scenes.jsonl")
    if not os.path.exists(path):
        with open(path + ".tmp", "w", encoding="utf-8") as f:
            for i, prompt in enumerate(count_prompts):
                batch = generate_scenes(
                    model, vocab, schedule, library, capacity=16, prompt=prompt,
                    guidance=guidance, num_scenes=per_prompt, seed=derive_seed(505, i),
                )
                for s in batch:
                    f.write(json.dumps({"prompt": prompt,
                                        "scene": json.loads(scene_to_json(s))}) + "\n")
        os.replace(path + ".tmp", path)
    scenes, prompts = [], []
    with open(path, encoding="utf-8") as f:
        for line in f:
            row = json.loads(line)
            scenes.append(scene_from_dict(row["scene"], library))
            prompts.append(row["prompt"])
    return scenes, prompts


# ---------------------------------------------------------------------------
# Acceptance reporting: one visible pass/fail line per criterion
# ---------------------------------------------------------------------------

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def check():
    """``check(tag, ok, detail)`` — record the criterion outcome, then assert."""

    def _check(tag: str, ok: bool, detail: str) -> None:
        line = f"{tag}: {'PASS' if ok else 'FAIL'} — {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line, flush=True)
        assert ok, line

    return _check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
