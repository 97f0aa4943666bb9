"""Command-line entry point: dataset generation, training, inference,
evaluation, and the ablation sweeps, each writing a run manifest next to
its outputs for reproducibility.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
Config precedence: flags > --config JSON file > defaults.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (ablate_ensemble, ablate_noise, ablate_selection,
                         evaluate_dataset, predict_dataset, report_to_csv,
                         report_to_json, report_to_markdown, rows_to_csv,
                         rows_to_markdown)
from .inference import InferenceConfig, infer, read_bundle, write_bundle
from .scene import (SceneSpec, dataset_digest, generate_scene, read_dataset,
                    read_manifest, write_dataset)
from .training import TrainConfig, train
from .unet import DenoiserConfig, load_checkpoint


class ValidationError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_run_manifest(out_dir, command, config: dict, digests: dict,
                       seeds: dict, wall_s: float, outputs: list):
    manifest = {
        "command": command,
        "config": config,
        "digests": digests,
        "seeds": seeds,
        "code_version": __version__,
        "wall_clock_s": round(wall_s, 3),
        "outputs": [str(p) for p in outputs],
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _load_config_file(args) -> dict:
    if getattr(args, "config", None):
        return json.loads(Path(args.config).read_text())
    return {}


def _resolve(args, file_cfg: dict, key: str, default):
    """flags > config file > default; argparse defaults are None markers."""
    v = getattr(args, key.replace("-", "_"), None)
    if v is not None:
        return v
    if key in file_cfg:
        return file_cfg[key]
    return default


# ---------------------------------------------------------------------------
# gen

def cmd_gen(args) -> int:
    cfg = _load_config_file(args)
    num_scenes = _resolve(args, cfg, "num_scenes", 100)
    size = _resolve(args, cfg, "size", 32)
    max_objects = _resolve(args, cfg, "max_objects", 4)
    min_objects = _resolve(args, cfg, "min_objects", 1)
    seed = _resolve(args, cfg, "seed", 0)
    out = Path(_resolve(args, cfg, "out", "dataset"))
    if min_objects < 1 or max_objects < min_objects:
        raise ValidationError("need 1 <= min-objects <= max-objects")

    t0 = time.time()
    master = np.random.default_rng(seed)
    scenes = []
    for i in range(num_scenes):
        n_obj = int(master.integers(min_objects, max_objects + 1))
        scene_seed = int(master.integers(0, 2 ** 63 - 1))
        spec = SceneSpec(width=size, height=size, num_objects=n_obj, seed=scene_seed)
        scenes.append(generate_scene(spec, scene_id=f"scene_{i:05d}"))
    manifest = write_dataset(scenes, out)
    write_run_manifest(
        out, "gen",
        {"num_scenes": num_scenes, "size": size, "max_objects": max_objects,
         "min_objects": min_objects, "seed": seed, "out": str(out)},
        {"dataset": dataset_digest_excluding_manifest(out)},
        {"seed": seed}, time.time() - t0, [out / "manifest.json"],
    )
    print(f"wrote {manifest['num_scenes']} scenes to {out}")
    print(f"N_max={manifest['n_max']} Area_min={manifest['area_min']}")
    return 0


def dataset_digest_excluding_manifest(root) -> str:
    """Digest over scene files only, so writing run_manifest.json afterwards
    does not change the recorded dataset digest."""
    root = Path(root)
    h = hashlib.sha256()
    for path in sorted(p for p in (root / "scenes").rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    h.update((root / "manifest.json").read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    cfg = _load_config_file(args)
    preset = {}
    if _resolve(args, cfg, "preset", ""):
        from .training import REFERENCE_PRESET
        preset = dict(REFERENCE_PRESET)
    data = _resolve(args, cfg, "data", None)
    if not data:
        raise ValidationError("--data is required")
    if not Path(data).exists():
        raise ValidationError(f"dataset path does not exist: {data}")
    out = Path(_resolve(args, cfg, "out", "train_run"))
    size = _dataset_size(data)
    model_cfg = DenoiserConfig(
        image_size=size,
        base_width=_resolve(args, cfg, "base_width", 32),
        depth=_resolve(args, cfg, "depth", 2),
        time_embed_dim=_resolve(args, cfg, "time_embed_dim", 128),
        parameter_seed=_resolve(args, cfg, "seed", 0),
    )
    tc = TrainConfig(
        dataset_path=str(data),
        total_steps=_resolve(args, cfg, "steps", 1000),
        learning_rate=_resolve(args, cfg, "lr", preset.get("learning_rate", 1e-4)),
        batch_size=_resolve(args, cfg, "batch", preset.get("batch_size", 32)),
        weight_decay=_resolve(args, cfg, "weight_decay", 0.0),
        noise_level_ratio=_resolve(args, cfg, "noise_ratio", 0.0),
        T=_resolve(args, cfg, "T", preset.get("T", 1000)),
        beta_start=_resolve(args, cfg, "beta_start", 1e-4),
        beta_end=_resolve(args, cfg, "beta_end", 0.02),
        rng_seed=_resolve(args, cfg, "seed", 0),
        checkpoint_every=_resolve(args, cfg, "checkpoint_every", 1000),
        model=model_cfg,
        resume_from=_resolve(args, cfg, "resume", ""),
    )
    tc.validate()  # fail before any compute
    t0 = time.time()
    _, rows = train(tc, out)
    manifest = read_manifest(data)
    write_run_manifest(
        out, "train", tc.to_json(),
        {"dataset": dataset_digest_excluding_manifest(data),
         "checkpoint": file_digest(out / "checkpoint.ckpt")},
        {"seed": tc.rng_seed}, time.time() - t0,
        [out / "checkpoint.ckpt", out / "training_log.csv"],
    )
    # stash dataset stats for inference-time defaults
    stats = {"n_max": manifest["n_max"], "area_min": manifest["area_min"]}
    (out / "dataset_stats.json").write_text(json.dumps(stats, sort_keys=True))
    print(f"trained {tc.total_steps} steps; final loss {rows[-1]['loss']:.5f}")
    print(f"checkpoint: {out / 'checkpoint.ckpt'}")
    return 0


def _dataset_size(data) -> int:
    scenes = read_dataset(data)
    return scenes[0].image.shape[0]


# ---------------------------------------------------------------------------
# infer

def _schedule_from_train_config(ckpt_path):
    run_dir = Path(ckpt_path).parent
    cfg_file = run_dir / "train_config.json"
    if not cfg_file.exists():
        raise ValidationError(
            f"no train_config.json next to checkpoint {ckpt_path}; "
            "cannot reconstruct the noise schedule"
        )
    d = json.loads(cfg_file.read_text())
    tc = TrainConfig(T=d["T"], beta_start=d["beta_start"], beta_end=d["beta_end"],
                     sigma_mode=d.get("sigma_mode", "beta"))
    return tc.schedule()


def _default_stats(ckpt_path):
    stats_file = Path(ckpt_path).parent / "dataset_stats.json"
    if stats_file.exists():
        d = json.loads(stats_file.read_text())
        return d["n_max"], d["area_min"]
    return None, None


def cmd_infer(args) -> int:
    cfg = _load_config_file(args)
    ckpt = _resolve(args, cfg, "ckpt", None)
    if not ckpt:
        raise ValidationError("--ckpt is required")
    data = _resolve(args, cfg, "data", None)
    image_path = _resolve(args, cfg, "image", None)
    if bool(data) == bool(image_path):
        raise ValidationError("exactly one of --data or --image is required")
    out = Path(_resolve(args, cfg, "out", "infer_out"))

    n_max, area_min = _default_stats(ckpt)
    n_max = _resolve(args, cfg, "n_max", n_max)
    area_min = _resolve(args, cfg, "area_min", area_min)
    if n_max is None or area_min is None:
        raise ValidationError(
            "no dataset_stats.json found next to the checkpoint; "
            "pass --n-max and --area-min explicitly"
        )
    icfg = InferenceConfig(
        K=_resolve(args, cfg, "k", 3),
        N_max=int(n_max), Area_min=int(area_min),
        selection_mode={"select": "select_mask", "mean": "mean_mask"}[
            _resolve(args, cfg, "selection", "select")],
        rng_seed=_resolve(args, cfg, "seed", 0),
    )
    icfg.validate()

    t0 = time.time()
    model, header, _ = load_checkpoint(ckpt)
    schedule = _schedule_from_train_config(ckpt)
    if header["schedule_digest"] and header["schedule_digest"] != schedule.digest():
        print("warning: checkpoint schedule digest mismatch", file=sys.stderr)

    outputs = []
    digests = {"checkpoint": file_digest(ckpt)}
    if data:
        scenes = read_dataset(data)
        digests["dataset"] = dataset_digest_excluding_manifest(data)
        for j, scene in enumerate(scenes):
            seq = infer(model, schedule, scene.image,
                        replace(icfg, rng_seed=icfg.rng_seed + 7919 * j))
            bdir = out / scene.scene_id
            write_bundle(seq, bdir, icfg)
            outputs.append(bdir / "tau.json")
            if getattr(args, "emit_plots", False):
                _plot_sequence(scene.image, seq, bdir / "layers.png")
    else:
        from PIL import Image as PILImage
        img = np.array(PILImage.open(image_path).convert("RGB"), dtype=np.uint8)
        seq = infer(model, schedule, img, icfg)
        write_bundle(seq, out / "image", icfg)
        outputs.append(out / "image" / "tau.json")
        if getattr(args, "emit_plots", False):
            _plot_sequence(img, seq, out / "image" / "layers.png")

    write_run_manifest(out, "infer", icfg.to_json(), digests,
                       {"seed": icfg.rng_seed}, time.time() - t0, outputs)
    print(f"wrote {len(outputs)} prediction bundle(s) to {out}")
    return 0


def _plot_sequence(image, seq, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(seq.tau)
    fig, axes = plt.subplots(1, n + 1, figsize=(2 * (n + 1), 2.2))
    axes = np.atleast_1d(axes)
    axes[0].imshow(image)
    axes[0].set_title("input")
    for j, p in enumerate(seq.tau):
        axes[j + 1].imshow(p.selected, cmap="gray")
        axes[j + 1].set_title(f"L{p.layer_index}" + ("*" if p.reassigned else ""))
    for ax in axes:
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    cfg = _load_config_file(args)
    pred = _resolve(args, cfg, "pred", None)
    data = _resolve(args, cfg, "data", None)
    if not pred or not data:
        raise ValidationError("--pred and --data are required")
    out = Path(_resolve(args, cfg, "out", "eval_out"))
    force = bool(getattr(args, "force", False))

    t0 = time.time()
    ds_digest = dataset_digest_excluding_manifest(data)
    pred_manifest_file = Path(pred) / "run_manifest.json"
    if pred_manifest_file.exists():
        pm = json.loads(pred_manifest_file.read_text())
        recorded = pm.get("digests", {}).get("dataset")
        if recorded and recorded != ds_digest and not force:
            raise ValidationError(
                "prediction bundle was produced from a different dataset "
                "(digest mismatch); pass --force to evaluate anyway"
            )

    scenes = read_dataset(data)
    from .evaluation import aggregate, evaluate_with_layer, evaluate_without_layer
    per_w, per_wo = [], []
    for scene in scenes:
        bdir = Path(pred) / scene.scene_id
        if not bdir.exists():
            raise ValidationError(f"missing prediction bundle for scene {scene.scene_id}")
        seq = read_bundle(bdir)
        per_w.append(evaluate_with_layer(seq, scene))
        per_wo.append(evaluate_without_layer(seq, scene))
    report = aggregate(per_w, per_wo, config_digest=ds_digest[:16])

    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(report))
    (out / "report.md").write_text(report_to_markdown(report))
    (out / "report.json").write_text(report_to_json(report))
    if getattr(args, "emit_plots", False):
        _plot_report(report, out / "per_layer.png")
    write_run_manifest(out, "eval", {"pred": str(pred), "data": str(data)},
                       {"dataset": ds_digest}, {}, time.time() - t0,
                       [out / "report.csv", out / "report.md"])
    print(report_to_markdown(report))
    return 0


def _plot_report(report, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    layers = [pl["layer"] for pl in report.per_layer]
    fig, ax = plt.subplots(figsize=(5, 3))
    width = 0.4
    ax.bar([l - width / 2 for l in layers], [pl["mean_iou"] for pl in report.per_layer],
           width, label="IoU")
    ax.bar([l + width / 2 for l in layers], [pl["ap"] for pl in report.per_layer],
           width, label="AP@0.5")
    ax.set_xlabel("layer")
    ax.set_xticks(layers)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# ablate

def cmd_ablate(args) -> int:
    cfg = _load_config_file(args)
    data = _resolve(args, cfg, "data", None)
    if not data:
        raise ValidationError("--data is required")
    out = Path(_resolve(args, cfg, "out", "ablate_out"))
    out.mkdir(parents=True, exist_ok=True)
    scenes = read_dataset(data)
    t0 = time.time()

    if args.ablation == "noise":
        levels = [float(x) for x in _resolve(args, cfg, "levels", "0,0.1,0.2").split(",")]
        steps = _resolve(args, cfg, "steps", 1000)
        seed = _resolve(args, cfg, "seed", 0)
        train_data = _resolve(args, cfg, "train_data", None)
        if not train_data:
            raise ValidationError("ablate noise needs --train-data to train against")
        base = TrainConfig(
            dataset_path=str(train_data), total_steps=steps, rng_seed=seed,
            T=_resolve(args, cfg, "T", 1000),
            batch_size=_resolve(args, cfg, "batch", 32),
            model=DenoiserConfig(image_size=_dataset_size(train_data),
                                 base_width=_resolve(args, cfg, "base_width", 32),
                                 depth=_resolve(args, cfg, "depth", 2),
                                 parameter_seed=seed),
        )
        manifest = read_manifest(train_data)
        icfg = InferenceConfig(K=int(_resolve(args, cfg, "k", 3)),
                               N_max=manifest["n_max"], Area_min=manifest["area_min"],
                               rng_seed=seed)

        def train_fn(level):
            run_dir = out / f"train_noise_{level:g}"
            tc = replace(base, noise_level_ratio=level)
            model, _ = train(tc, run_dir)
            return model

        rows = ablate_noise(train_fn, levels,
                            lambda m: evaluate_dataset(m, base.schedule(), scenes, icfg))
        fields = ["noise_level", "layer", "mean_iou", "ap"]
    else:
        ckpt = _resolve(args, cfg, "ckpt", None)
        if not ckpt:
            raise ValidationError("--ckpt is required")
        model, _, _ = load_checkpoint(ckpt)
        schedule = _schedule_from_train_config(ckpt)
        n_max, area_min = _default_stats(ckpt)
        n_max = _resolve(args, cfg, "n_max", n_max)
        area_min = _resolve(args, cfg, "area_min", area_min)
        if n_max is None or area_min is None:
            raise ValidationError("pass --n-max and --area-min or provide dataset_stats.json")
        icfg = InferenceConfig(K=_resolve(args, cfg, "k_base", 3), N_max=int(n_max),
                               Area_min=int(area_min),
                               rng_seed=_resolve(args, cfg, "seed", 0))
        if args.ablation == "ensemble":
            k_values = [int(x) for x in _resolve(args, cfg, "k", "3,5,7,9").split(",")]
            rows = ablate_ensemble(model, schedule, scenes, k_values, icfg)
            fields = ["K", "layer", "mean_iou", "ap"]
        else:
            rows = ablate_selection(model, schedule, scenes, icfg)
            fields = ["layer", "ap_select", "ap_mean", "delta"]

    (out / f"{args.ablation}.csv").write_text(rows_to_csv(rows, fields))
    (out / f"{args.ablation}.md").write_text(rows_to_markdown(rows, fields))
    write_run_manifest(out, f"ablate {args.ablation}", {"data": str(data)},
                       {"dataset": dataset_digest_excluding_manifest(data)},
                       {}, time.time() - t0,
                       [out / f"{args.ablation}.csv"])
    print(rows_to_markdown(rows, fields))
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="seqamodal",
                description="Sequential amodal segmentation via cumulative-guided mask diffusion")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic layered-scene dataset")
    g.add_argument("--num-scenes", type=int)
    g.add_argument("--size", type=int)
    g.add_argument("--max-objects", type=int)
    g.add_argument("--min-objects", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out")
    g.add_argument("--config")
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train the mask denoiser")
    t.add_argument("--data")
    t.add_argument("--steps", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--noise-ratio", type=float)
    t.add_argument("--T", type=int, dest="T")
    t.add_argument("--beta-start", type=float)
    t.add_argument("--beta-end", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--base-width", type=int)
    t.add_argument("--depth", type=int)
    t.add_argument("--time-embed-dim", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume")
    t.add_argument("--preset", choices=["reference"])
    t.add_argument("--out")
    t.add_argument("--config")
    t.set_defaults(fn=cmd_train)

    i = sub.add_parser("infer", help="layer-by-layer amodal inference")
    i.add_argument("--ckpt")
    i.add_argument("--data")
    i.add_argument("--image")
    i.add_argument("--k", type=int)
    i.add_argument("--n-max", type=int)
    i.add_argument("--area-min", type=int)
    i.add_argument("--selection", choices=["select", "mean"])
    i.add_argument("--seed", type=int)
    i.add_argument("--emit-plots", action="store_true")
    i.add_argument("--out")
    i.add_argument("--config")
    i.set_defaults(fn=cmd_infer)

    e = sub.add_parser("eval", help="score prediction bundles against ground truth")
    e.add_argument("--pred")
    e.add_argument("--data")
    e.add_argument("--force", action="store_true")
    e.add_argument("--emit-plots", action="store_true")
    e.add_argument("--out")
    e.add_argument("--config")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="ablation sweeps")
    asub = a.add_subparsers(dest="ablation", required=True)
    for name in ("ensemble", "selection", "noise"):
        ap = asub.add_parser(name)
        ap.add_argument("--data")
        ap.add_argument("--ckpt")
        ap.add_argument("--k")
        ap.add_argument("--k-base", type=int)
        ap.add_argument("--n-max", type=int)
        ap.add_argument("--area-min", type=int)
        ap.add_argument("--seed", type=int)
        ap.add_argument("--out")
        ap.add_argument("--config")
        if name == "noise":
            ap.add_argument("--levels")
            ap.add_argument("--steps", type=int)
            ap.add_argument("--train-data")
            ap.add_argument("--T", type=int, dest="T")
            ap.add_argument("--batch", type=int)
            ap.add_argument("--base-width", type=int)
            ap.add_argument("--depth", type=int)
        ap.set_defaults(fn=cmd_ablate)

    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure
        print(f"failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
