"""Command-line interface.

Verbs cover the whole workflow: procedural data generation, training,
sampling, inpainting, tree search, reward post-training, evaluation, and
scene inspection.  Every verb that produces an output directory drops a
``config.json`` snapshot of its resolved settings next to the results, and
report-style verbs render figures alongside their delimited outputs.

Exit codes: 0 on success, 2 for configuration problems (bad flags, missing
or mismatched inputs), 3 for failures during execution.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import dataset as dataset_mod
from . import metrics as metrics_mod
from .assets import builtin_library
from .diffusion import NoiseSchedule
from .feasibility import feasibility_report, post_process, total_penetration
from .grammar import ANNOTATION_KINDS, load_grammar, sample_raw
from .model import ModelConfig, SceneDenoiser, build_vocab, load_checkpoint
from .posttrain import PostTrainConfig, posttrain
from .rng import derive_seed
from .sampling import generate_scenes, generate_scenes_continuous, inpaint_scene
from .scene import InpaintMask, read_scene, scene_to_json
from .search import mcts_search, scaffold_only, write_trace
from .training import EncodedDataset, TrainConfig, train

__all__ = ["main"]


class ConfigError(Exception):
    """User-facing setup problem: wrong flags, missing files, bad combos."""


# ---------------------------------------------------------------------------
# Small helpers
# ---------------------------------------------------------------------------


def _ensure_out(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _write_config(out_dir: str, args: argparse.Namespace, **extra) -> None:
    payload = {k: v for k, v in vars(args).items() if k not in ("handler",)}
    payload.update(extra)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _write_scenes_jsonl(path: str, scenes, prompts=None) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for i, scene in enumerate(scenes):
            row = {"scene_id": i, "scene": json.loads(scene_to_json(scene))}
            if prompts is not None:
                row["prompt"] = prompts[i]
            f.write(json.dumps(row) + "\n")


def _load_checkpoint(path: str):
    if not os.path.exists(path):
        raise ConfigError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, RuntimeError) as err:
        raise ConfigError(f"cannot load checkpoint {path}: {err}") from err


def _load_data_dir(data_dir: str):
    """A dataset directory as written by gen-data: scenes.jsonl + manifest."""
    manifest_path = os.path.join(data_dir, "manifest.json")
    scenes_path = os.path.join(data_dir, "scenes.jsonl")
    if not os.path.exists(manifest_path) or not os.path.exists(scenes_path):
        raise ConfigError(f"{data_dir} is not a dataset directory (need manifest.json and scenes.jsonl)")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    records = dataset_mod.load_dataset(scenes_path, manifest["library"])
    return manifest, records


def _resolve_grammar(name_or_path: str):
    try:
        return load_grammar(name_or_path)
    except (ValueError, OSError, KeyError) as err:
        raise ConfigError(f"cannot load grammar {name_or_path!r}: {err}") from err


def _checkpoint_ema(extras: dict):
    ema = extras.get("ema")
    if ema is None:
        return None
    return ema


def _scene_counts(scenes):
    return [s.object_count() for s in scenes]


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------


def _cmd_gen_data(args) -> int:
    from .plots import count_histogram_png

    grammar = _resolve_grammar(args.grammar)
    kinds = tuple(args.kinds.split(","))
    for kind in kinds:
        if kind not in ANNOTATION_KINDS:
            raise ConfigError(f"unknown annotation kind {kind!r}; options: {ANNOTATION_KINDS}")
    if args.num_scenes < 1:
        raise ConfigError("--num-scenes must be positive")
    out = _ensure_out(args.out)

    records = dataset_mod.generate_dataset(grammar, args.num_scenes, args.seed, kinds=kinds)
    scenes_path = os.path.join(out, "scenes.jsonl")
    dataset_mod.write_records(records, scenes_path)
    manifest = dataset_mod.write_manifest(os.path.join(out, "manifest.json"), grammar, args.seed, records)
    count_histogram_png(
        {grammar.name: _scene_counts(dataset_mod.unique_scenes(records))},
        os.path.join(out, "count_histogram.png"),
    )
    _write_config(out, args, grammar_name=grammar.name, library=grammar.library.name)
    print(f"wrote {len(records)} records over {manifest['num_scenes']} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _cmd_train(args) -> int:
    from .plots import loss_curve_png

    data_dirs = args.data.split(",")
    manifests, datasets = [], []
    for d in data_dirs:
        manifest, records = _load_data_dir(d)
        manifests.append(manifest)
        datasets.append(records)
    library_names = {m["library"] for m in manifests}
    if len(library_names) != 1:
        raise ConfigError(f"datasets use different libraries: {sorted(library_names)}")
    library = builtin_library(library_names.pop())
    vocab = build_vocab(library)
    schedule = NoiseSchedule(num_steps=args.diffusion_steps)
    out = _ensure_out(args.out)

    resume_extras = None
    checkpoint_path = os.path.join(out, "checkpoint.pt")
    if args.resume:
        if not os.path.exists(checkpoint_path):
            raise ConfigError(f"--resume set but {checkpoint_path} does not exist")
        model, vocab, schedule, library, resume_extras = _load_checkpoint(checkpoint_path)
        config = TrainConfig(**{**resume_extras["train_config"], "steps": args.steps})
    else:
        try:
            model_config = ModelConfig(
                mode=args.mode,
                num_categories=library.num_categories,
                vocab_size=len(vocab),
                d_model=args.d_model,
                num_heads=args.heads,
                num_double_blocks=args.double_blocks,
                num_single_blocks=args.single_blocks,
                max_prompt_len=args.max_prompt_len,
            )
            config = TrainConfig(
                steps=args.steps,
                batch_size=args.batch_size,
                lr=args.lr,
                warmup_steps=args.warmup,
                weight_decay=args.weight_decay,
                ema_decay=args.ema_decay,
                cond_drop=args.cond_drop,
                seed=args.seed,
                log_interval=args.log_interval,
                checkpoint_interval=args.checkpoint_interval,
            )
        except ValueError as err:
            raise ConfigError(str(err)) from err
        model = SceneDenoiser(model_config, init_seed=args.seed)

    _write_config(out, args, library=library.name, vocab_size=len(vocab),
                  parameter_count=model.parameter_count())
    summary = train(model, datasets, vocab, schedule, library, config, out, resume_extras=resume_extras)
    with open(summary["metrics"], encoding="utf-8") as f:
        rows = [json.loads(line) for line in f if line.strip()]
    if rows:
        loss_curve_png(rows, os.path.join(out, "loss_curve.png"))
    print(f"trained {summary['steps']} steps; final loss {summary['final_loss']:.6f}; "
          f"checkpoint at {summary['checkpoint']}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------


def _sampling_kwargs(args) -> dict:
    if args.method not in ("ancestral", "ddim"):
        raise ConfigError(f"unknown method {args.method!r}")
    if args.method == "ancestral" and args.stride is not None:
        raise ConfigError("--stride only applies to --method ddim")
    return {
        "method": args.method,
        "num_stride_steps": args.stride,
        "eta": args.eta,
    }


def _cmd_sample(args) -> int:
    from .plots import category_histogram_png, count_histogram_png

    model, vocab, schedule, library, extras = _load_checkpoint(args.checkpoint)
    kwargs = _sampling_kwargs(args)
    if args.num_scenes < 1:
        raise ConfigError("--num-scenes must be positive")
    ema_shadow = None if args.no_ema else _checkpoint_ema(extras)
    capacity = args.capacity
    out = _ensure_out(args.out)
    _write_config(out, args, mode=model.config.mode, used_ema=ema_shadow is not None,
                  library=library.name)

    sampler = generate_scenes if model.config.mode == "mixed" else generate_scenes_continuous
    scenes = sampler(
        model,
        vocab,
        schedule,
        library,
        capacity=capacity,
        prompt=args.prompt,
        guidance=args.guidance,
        num_scenes=args.num_scenes,
        seed=args.seed,
        ema_shadow=ema_shadow,
        **kwargs,
    )
    if args.post:
        scenes = [post_process(s).scene for s in scenes]
    prompts = [args.prompt] * len(scenes) if args.prompt else None
    _write_scenes_jsonl(os.path.join(out, "scenes.jsonl"), scenes, prompts)
    count_histogram_png({"samples": _scene_counts(scenes)}, os.path.join(out, "count_histogram.png"))
    category_histogram_png({"samples": scenes}, library, os.path.join(out, "category_histogram.png"))
    print(f"sampled {len(scenes)} scenes to {out}")
    return 0


# ---------------------------------------------------------------------------
# inpaint
# ---------------------------------------------------------------------------

_MASK_KINDS = ("completion", "pose-only", "all-free", "slots")


def _build_mask(args, scene) -> InpaintMask:
    if args.mask == "completion":
        return InpaintMask.completion(scene)
    if args.mask == "pose-only":
        return InpaintMask.pose_only(scene)
    if args.mask == "all-free":
        return InpaintMask.all_free(scene)
    if args.mask == "slots":
        if not args.slots:
            raise ConfigError("--mask slots requires --slots i,j,...")
        try:
            indices = [int(tok) for tok in args.slots.split(",")]
        except ValueError as err:
            raise ConfigError(f"bad --slots list: {args.slots!r}") from err
        if any(not 0 <= i < scene.capacity for i in indices):
            raise ConfigError(f"--slots indices must lie in [0, {scene.capacity})")
        return InpaintMask.for_slots(scene, indices)
    raise ConfigError(f"unknown mask kind {args.mask!r}; options: {_MASK_KINDS}")


def _cmd_inpaint(args) -> int:
    model, vocab, schedule, library, extras = _load_checkpoint(args.checkpoint)
    if model.config.mode != "mixed":
        raise ConfigError("inpainting needs a mixed-mode checkpoint")
    if not os.path.exists(args.scene):
        raise ConfigError(f"scene file not found: {args.scene}")
    scene = read_scene(args.scene, library)
    mask = _build_mask(args, scene)
    kwargs = _sampling_kwargs(args)
    ema_shadow = None if args.no_ema else _checkpoint_ema(extras)
    out = _ensure_out(args.out)
    _write_config(out, args, library=library.name, used_ema=ema_shadow is not None,
                  masked_slots=mask.masked_slots().tolist())

    scenes = inpaint_scene(
        model,
        vocab,
        schedule,
        scene,
        mask,
        prompt=args.prompt,
        guidance=args.guidance,
        num_scenes=args.num_scenes,
        seed=args.seed,
        ema_shadow=ema_shadow,
        **kwargs,
    )
    if args.post:
        scenes = [post_process(s).scene for s in scenes]
    prompts = [args.prompt] * len(scenes) if args.prompt else None
    _write_scenes_jsonl(os.path.join(out, "scenes.jsonl"), scenes, prompts)
    print(f"inpainted {len(scenes)} variants to {out}")
    return 0


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


def _cmd_search(args) -> int:
    from .plots import reward_curve_png, scene_png

    model, vocab, schedule, library, extras = _load_checkpoint(args.checkpoint)
    if model.config.mode != "mixed":
        raise ConfigError("search needs a mixed-mode checkpoint (it inpaints slots)")
    if (args.scaffold is None) == (args.grammar is None):
        raise ConfigError("give exactly one of --scaffold FILE or --grammar NAME")
    if args.scaffold is not None:
        if not os.path.exists(args.scaffold):
            raise ConfigError(f"scaffold file not found: {args.scaffold}")
        root = scaffold_only(read_scene(args.scaffold, library))
    else:
        grammar = _resolve_grammar(args.grammar)
        root = scaffold_only(sample_raw(grammar, seed=0))
    if args.children is not None and args.children < 1:
        raise ConfigError("--children must be >= 1, or omit it for flat resampling")
    kwargs = _sampling_kwargs(args)
    ema_shadow = None if args.no_ema else _checkpoint_ema(extras)
    out = _ensure_out(args.out)
    _write_config(out, args, library=library.name, used_ema=ema_shadow is not None,
                  flat_mode=args.children is None)

    def propose(scene, mask, sample_seed):
        return inpaint_scene(
            model,
            vocab,
            schedule,
            scene,
            mask,
            prompt=args.prompt,
            guidance=args.guidance,
            num_scenes=1,
            seed=sample_seed,
            ema_shadow=ema_shadow,
            **kwargs,
        )[0]

    result = mcts_search(
        propose,
        root,
        seed=args.seed,
        num_children=args.children,
        max_iterations=args.iterations,
        target_reward=args.target,
        exploration=args.exploration,
    )
    write_trace(result.trace, os.path.join(out, "trace.jsonl"))
    with open(os.path.join(out, "reward_curve.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_index", "iteration", "reward", "best_reward"])
        for e in result.trace:
            writer.writerow([e["sample_index"], e["iteration"], e["reward"], e["best_reward"]])
    reward_curve_png(
        [e["reward"] for e in result.trace],
        [e["best_reward"] for e in result.trace],
        os.path.join(out, "reward_curve.png"),
    )
    with open(os.path.join(out, "best_scene.json"), "w", encoding="utf-8") as f:
        f.write(scene_to_json(result.best_scene) + "\n")
    scene_png(result.best_scene, os.path.join(out, "best_scene.png"))
    print(f"best reward {result.best_reward:g} after {result.num_samples} samples "
          f"({result.iterations} iterations); results in {out}")
    return 0


# ---------------------------------------------------------------------------
# posttrain
# ---------------------------------------------------------------------------


def _cmd_posttrain(args) -> int:
    from .plots import reward_curve_png

    model, vocab, schedule, library, extras = _load_checkpoint(args.checkpoint)
    if model.config.mode != "continuous":
        raise ConfigError("post-training needs a continuous-mode checkpoint")
    manifest, records = _load_data_dir(args.data)
    if manifest["library"] != library.name:
        raise ConfigError("anchor dataset library does not match the checkpoint")
    anchor = EncodedDataset.from_records(records, vocab, model.config.max_prompt_len)
    try:
        config = PostTrainConfig(
            steps=args.steps,
            capacity=args.capacity,
            group_size=args.group_size,
            num_stride_steps=args.stride,
            eta=args.eta,
            anchor_weight=args.anchor_weight,
            anchor_batch_size=args.anchor_batch_size,
            lr=args.lr,
            seed=args.seed,
            log_interval=args.log_interval,
            checkpoint_interval=args.checkpoint_interval,
        )
    except ValueError as err:
        raise ConfigError(str(err)) from err
    out = _ensure_out(args.out)
    _write_config(out, args, library=library.name)

    summary = posttrain(model, schedule, library, anchor, config, out, vocab)
    best = np.maximum.accumulate(summary["reward_max_history"])
    reward_curve_png(summary["reward_mean_history"], best,
                     os.path.join(out, "reward_curve.png"), xlabel="update")
    print(f"post-trained {summary['steps']} updates; mean reward "
          f"{summary['reward_mean_history'][-1]:.3f}; checkpoint at {summary['checkpoint']}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _cmd_eval(args) -> int:
    from .plots import category_histogram_png, count_histogram_png

    model, vocab, schedule, library, extras = _load_checkpoint(args.checkpoint)
    manifest, records = _load_data_dir(args.reference)
    if manifest["library"] != library.name:
        raise ConfigError("reference dataset library does not match the checkpoint")
    if args.num_scenes < 2:
        raise ConfigError("--num-scenes must be at least 2")
    if args.prompt_kind not in ("none",) + ANNOTATION_KINDS:
        raise ConfigError(f"--prompt-kind must be one of none,{','.join(ANNOTATION_KINDS)}")
    kwargs = _sampling_kwargs(args)
    ema_shadow = None if args.no_ema else _checkpoint_ema(extras)
    reference = dataset_mod.unique_scenes(records)
    capacity = args.capacity if args.capacity else reference[0].capacity
    out = _ensure_out(args.out)
    _write_config(out, args, library=library.name, capacity=capacity,
                  used_ema=ema_shadow is not None)

    sampler = generate_scenes if model.config.mode == "mixed" else generate_scenes_continuous
    prompts: list | None = None
    if args.prompt_kind != "none":
        pool = [r.prompt for r in records if r.kind == args.prompt_kind]
        if not pool:
            raise ConfigError(f"reference dataset has no {args.prompt_kind!r} prompts")
        prompts = [pool[i % len(pool)] for i in range(args.num_scenes)]
        scenes = []
        for i, prompt in enumerate(prompts):
            scenes.extend(sampler(
                model, vocab, schedule, library,
                capacity=capacity, prompt=prompt, guidance=args.guidance,
                num_scenes=1, seed=derive_seed(args.seed, i), ema_shadow=ema_shadow,
                **kwargs,
            ))
    else:
        scenes = sampler(
            model, vocab, schedule, library,
            capacity=capacity, num_scenes=args.num_scenes, seed=args.seed,
            ema_shadow=ema_shadow, **kwargs,
        )
    if args.post:
        scenes = [post_process(s).scene for s in scenes]

    report = {
        "num_generated": len(scenes),
        "num_reference": len(reference),
        "category_kl_nats_x1e4": metrics_mod.category_kl(reference, scenes, library.num_categories) * 1e4,
        "median_total_penetration_cm": metrics_mod.median_total_penetration(scenes) * 100.0,
        "mean_objects_generated": float(np.mean(_scene_counts(scenes))),
        "mean_objects_reference": float(np.mean(_scene_counts(reference))),
        "feasible_fraction": float(np.mean([
            not feasibility_report(s).flagged().any() for s in scenes
        ])),
    }
    acc_mean, acc_std = metrics_mod.set_classifier_accuracy(reference, scenes, seed=args.seed)
    report["classifier_accuracy_pct_mean"] = acc_mean
    report["classifier_accuracy_pct_std"] = acc_std
    if prompts is not None:
        report["annotation_follow_rate"] = metrics_mod.annotation_follow_rate(scenes, prompts)
        report["prompt_kind"] = args.prompt_kind

    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out, "report.csv"), "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for key in sorted(report):
            writer.writerow([key, report[key]])
    _write_scenes_jsonl(os.path.join(out, "scenes.jsonl"), scenes, prompts)
    count_histogram_png(
        {"reference": _scene_counts(reference), "generated": _scene_counts(scenes)},
        os.path.join(out, "count_histogram.png"),
    )
    category_histogram_png(
        {"reference": reference, "generated": scenes}, library,
        os.path.join(out, "category_histogram.png"),
    )
    for key in sorted(report):
        print(f"{key}: {report[key]}")
    print(f"report written to {out}")
    return 0


# ---------------------------------------------------------------------------
# show
# ---------------------------------------------------------------------------


def _cmd_show(args) -> int:
    if not os.path.exists(args.scene):
        raise ConfigError(f"scene file not found: {args.scene}")
    library = builtin_library(args.library)
    scene = read_scene(args.scene, library)
    report = feasibility_report(scene)
    flagged = report.flagged()
    print(f"capacity {scene.capacity}, {scene.object_count()} objects, "
          f"library {library.name}")
    print("slot\tcategory\tname\tx\ty\tz\twelded\tflag")
    for i, slot in enumerate(scene.slots):
        if slot.is_empty:
            continue
        t = slot.translation
        flag = "penetrating" if report.penetrating[i] else ("unstable" if report.unstable[i] else "-")
        print(f"{i}\t{slot.category}\t{library.name_of(slot.category)}"
              f"\t{t[0]:.4f}\t{t[1]:.4f}\t{t[2]:.4f}\t{int(slot.welded)}\t{flag}")
    print(f"total penetration: {total_penetration(scene):.6f} m; "
          f"flagged objects: {int(flagged.sum())}")
    if args.png:
        from .plots import scene_png

        scene_png(scene, args.png)
        print(f"figure written to {args.png}")
    if args.obj:
        from .plots import export_obj

        n = export_obj(scene, args.obj)
        print(f"wrote {n} spheres to {args.obj}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_sampling_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", default="ancestral", help="ancestral or ddim")
    p.add_argument("--stride", type=int, default=None, help="number of strided steps (ddim only)")
    p.add_argument("--eta", type=float, default=0.0, help="noise scale for strided jumps")
    p.add_argument("--prompt", default=None, help="text condition")
    p.add_argument("--guidance", type=float, default=0.0, help="guidance weight")
    p.add_argument("--no-ema", action="store_true", help="sample with raw weights instead of the average")
    p.add_argument("--post", action="store_true", help="project and settle the results")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scenediff", description=__doc__)
    sub = parser.add_subparsers(dest="verb")

    p = sub.add_parser("gen-data", help="sample a procedural dataset with prompts")
    p.add_argument("--grammar", required=True, help="builtin grammar name or JSON path")
    p.add_argument("--num-scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kinds", default=",".join(ANNOTATION_KINDS))
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_gen_data)

    p = sub.add_parser("train", help="train a denoiser on datasets")
    p.add_argument("--data", required=True, help="dataset directory (comma-separate for a mixture)")
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="mixed", choices=("mixed", "continuous"))
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--double-blocks", type=int, default=2)
    p.add_argument("--single-blocks", type=int, default=4)
    p.add_argument("--max-prompt-len", type=int, default=32)
    p.add_argument("--diffusion-steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--warmup", type=int, default=5000)
    p.add_argument("--weight-decay", type=float, default=1e-3)
    p.add_argument("--ema-decay", type=float, default=0.9999)
    p.add_argument("--cond-drop", type=float, default=0.10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-interval", type=int, default=50)
    p.add_argument("--checkpoint-interval", type=int, default=2000)
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("sample", help="generate scenes from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--num-scenes", type=int, default=1)
    p.add_argument("--capacity", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_sample)

    p = sub.add_parser("inpaint", help="regenerate masked slots of a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--mask", default="completion", help=f"one of {_MASK_KINDS}")
    p.add_argument("--slots", default=None, help="comma list of slot indices for --mask slots")
    p.add_argument("--num-scenes", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_inpaint)

    p = sub.add_parser("search", help="tree search for a high-reward scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scaffold", default=None, help="scene JSON whose welded slots seed the search")
    p.add_argument("--grammar", default=None, help="builtin grammar whose fixture seeds the search")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--children", type=int, default=3, help="proposals per tree expansion")
    p.add_argument("--flat", action="store_true",
                   help="no tree: independent resampling from the scaffold")
    p.add_argument("--target", type=float, default=None, help="stop once the best reward reaches this")
    p.add_argument("--exploration", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_search)

    p = sub.add_parser("posttrain", help="reward post-training of a continuous checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="anchor dataset directory")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--capacity", type=int, required=True)
    p.add_argument("--group-size", type=int, default=8)
    p.add_argument("--stride", type=int, default=120)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--anchor-weight", type=float, default=150.0)
    p.add_argument("--anchor-batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-interval", type=int, default=10)
    p.add_argument("--checkpoint-interval", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=_cmd_posttrain)

    p = sub.add_parser("eval", help="score samples against a reference dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--reference", required=True, help="dataset directory to compare against")
    p.add_argument("--num-scenes", type=int, default=100)
    p.add_argument("--capacity", type=int, default=None, help="defaults to the reference capacity")
    p.add_argument("--prompt-kind", default="none", help="none, count, names, or relations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _add_sampling_flags(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("show", help="print a scene and optionally render it")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--library", default="desk")
    p.add_argument("--png", default=None, help="write a figure here")
    p.add_argument("--obj", default=None, help="write a Wavefront mesh here")
    p.set_defaults(handler=_cmd_show)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "handler"):
        parser.print_help()
        return 2
    if getattr(args, "flat", False):
        args.children = None
    try:
        return args.handler(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
