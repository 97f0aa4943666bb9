"""Layer-ordered training: every scene yields one example per occlusion
layer (ground-truth cumulative mask in, layer-union mask out) plus a final
blank-target example one layer past the deepest, so the model learns when
to stop. Optionally a fraction of cumulative-mask inputs is perturbed by
dropping one occluded layer, simulating inference-time ordering errors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .diffusion import NoiseSchedule, linear_schedule, training_loss
from .occlusion import layer_union_masks
from .scene import read_dataset, read_manifest
from .unet import DenoiserConfig, init_denoiser, save_checkpoint, load_checkpoint

# hyperparameters of the original large-scale recipe, kept as a named preset
REFERENCE_PRESET = {"learning_rate": 1e-4, "batch_size": 256, "T": 1000}


@dataclass(frozen=True)
class TrainConfig:
    dataset_path: str = ""
    total_steps: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.0
    noise_level_ratio: float = 0.0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"
    rng_seed: int = 0
    checkpoint_every: int = 1000
    log_every: int = 10
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    resume_from: str = ""

    def validate(self):
        if not 0.0 <= self.noise_level_ratio <= 1.0:
            raise ValueError(f"noise_level_ratio must be in [0, 1], got {self.noise_level_ratio}")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ValueError("total_steps and batch_size must be positive")
        self.model.validate()

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end, self.sigma_mode)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "dataset_path", "total_steps", "learning_rate", "batch_size",
            "weight_decay", "noise_level_ratio", "T", "beta_start", "beta_end",
            "sigma_mode", "rng_seed", "checkpoint_every", "log_every", "resume_from")}
        d["model"] = self.model.to_json()
        return d


@dataclass
class TrainExample:
    image: np.ndarray        # uint8 (H, W, 3)
    cm_input: np.ndarray     # bool (H, W), ground-truth cumulative mask
    target_mask: np.ndarray  # bool (H, W); all-zero for the past-the-end example
    layer_index: int
    scene_id: str


class TrainingAborted(RuntimeError):
    def __init__(self, step, batch_digest):
        self.step = step
        self.batch_digest = batch_digest
        super().__init__(
            f"non-finite loss at step {step} (batch digest {batch_digest})"
        )


def build_examples(scene) -> list:
    """All training examples for one scene: N per-layer examples plus the
    blank-target example with the full cumulative mask as input."""
    if not scene.objects:
        raise ValueError(f"scene {scene.scene_id} has no objects")
    unions = layer_union_masks(scene)
    h, w = unions[0].shape
    examples = []
    cm = np.zeros((h, w), dtype=bool)
    for i, union in enumerate(unions, start=1):
        examples.append(TrainExample(
            image=scene.image, cm_input=cm.copy(), target_mask=union.copy(),
            layer_index=i, scene_id=scene.scene_id,
        ))
        cm = cm | union
    examples.append(TrainExample(
        image=scene.image, cm_input=cm, target_mask=np.zeros((h, w), dtype=bool),
        layer_index=len(unions) + 1, scene_id=scene.scene_id,
    ))
    return examples


def perturb_cumulative_mask(scene, cm: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Drop one randomly chosen occluded layer (index 2..n) from the
    cumulative mask; layer 1 content is never removed."""
    n = scene.num_layers
    if n < 2:
        raise ValueError(
            f"scene {scene.scene_id} has {n} layer(s); perturbation needs >= 2"
        )
    i_rand = int(rng.integers(2, n + 1))
    dropped = layer_union_masks(scene)[i_rand - 1]
    return cm & ~dropped


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 HWC -> float CHW scaled to [-1, 1]."""
    x = torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1)
    return x / 127.5 - 1.0


def mask_to_tensor(mask: np.ndarray) -> torch.Tensor:
    """bool HW -> signed float (1, H, W)."""
    return torch.from_numpy(np.where(mask, 1.0, -1.0).astype(np.float32))[None]


class _ExampleBank:
    """Examples stacked into tensors, with per-scene data kept around for
    cumulative-mask perturbation."""

    def __init__(self, scenes):
        examples = []
        self.scenes_by_id = {s.scene_id: s for s in scenes}
        for scene in scenes:
            examples.extend(build_examples(scene))
        self.examples = examples
        self.images = torch.stack([image_to_tensor(e.image) for e in examples])
        self.cms = np.stack([e.cm_input for e in examples])
        self.targets = torch.stack([mask_to_tensor(e.target_mask) for e in examples])
        self.scene_layers = np.array(
            [self.scenes_by_id[e.scene_id].num_layers for e in examples]
        )

    def __len__(self):
        return len(self.examples)

    def batch(self, idx, rng, noise_level_ratio):
        """Assemble a batch; returns (image, cm, target, n_perturbed)."""
        cm_batch = []
        n_perturbed = 0
        for i in idx:
            cm = self.cms[i]
            if noise_level_ratio > 0 and self.scene_layers[i] >= 2 \
                    and rng.random() < noise_level_ratio:
                scene = self.scenes_by_id[self.examples[i].scene_id]
                cm = perturb_cumulative_mask(scene, cm, rng)
                n_perturbed += 1
            cm_batch.append(mask_to_tensor(cm))
        return self.images[idx], torch.stack(cm_batch), self.targets[idx], n_perturbed


def train(config: TrainConfig, out_dir) -> tuple:
    """Run the optimization loop; writes training_log.csv, periodic and
    final checkpoints, and a run config JSON under out_dir.

    Returns (model, log_rows)."""
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schedule = config.schedule()

    scenes = read_dataset(config.dataset_path)
    bank = _ExampleBank(scenes)

    start_step = 0
    if config.resume_from:
        model, header, opt_state = load_checkpoint(config.resume_from)
        start_step = header["step"]
        if header["schedule_digest"] and header["schedule_digest"] != schedule.digest():
            print("warning: checkpoint schedule digest differs from configured schedule")
    else:
        model, opt_state = init_denoiser(config.model), None
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                                  weight_decay=config.weight_decay)
    if opt_state is not None:
        optimizer.load_state_dict(opt_state)

    rng = np.random.default_rng(config.rng_seed)
    g = torch.Generator().manual_seed(config.rng_seed)
    denoiser = lambda cond: model(cond.stacked(), cond.t)

    (out / "train_config.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))

    rows = []
    seen = perturbed = 0
    h = w = config.model.image_size
    for step in range(start_step + 1, start_step + config.total_steps + 1):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(bank), size=config.batch_size)
        image, cm, target, n_pert = bank.batch(idx, rng, config.noise_level_ratio)
        seen += config.batch_size
        perturbed += n_pert
        t = torch.randint(1, config.T + 1, (config.batch_size,), generator=g)
        eps = torch.randn(config.batch_size, 1, h, w, generator=g)
        try:
            loss = training_loss(schedule, denoiser, image, cm, target, t, eps)
        except FloatingPointError:
            digest = hashlib.sha256(np.ascontiguousarray(idx).tobytes()).hexdigest()[:16]
            raise TrainingAborted(step, digest) from None
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        wall_ms = (time.perf_counter() - t0) * 1e3
        if step % config.log_every == 0 or step == start_step + config.total_steps:
            rows.append({
                "step": step, "loss": float(loss.item()),
                "lr": config.learning_rate, "wall_ms": round(wall_ms, 3),
                "perturbed_fraction": perturbed / seen,
            })
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(model, out / f"step_{step:07d}.ckpt", optimizer,
                            step=step, schedule_digest=schedule.digest())

    model.eval()
    save_checkpoint(model, out / "checkpoint.ckpt", optimizer,
                    step=start_step + config.total_steps,
                    schedule_digest=schedule.digest())
    write_training_log(rows, out / "training_log.csv")
    return model, rows


def write_training_log(rows, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["step", "loss", "lr", "wall_ms", "perturbed_fraction"]
        )
        writer.writeheader()
        writer.writerows(rows)


def loss_curve(rows) -> list:
    """The reproducible part of the log: (step, loss) pairs."""
    return [(r["step"], r["loss"]) for r in rows]


def dataset_manifest_digest(dataset_path) -> str:
    manifest = read_manifest(dataset_path)
    return hashlib.sha256(
        json.dumps(manifest, sort_keys=True).encode()
    ).hexdigest()
