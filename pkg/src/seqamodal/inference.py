"""Layer-by-layer amodal inference: per layer, draw K full reverse-diffusion
samples conditioned on (image, cumulative mask), pick the sample closest to
the ensemble mean, enforce spatial continuity with the previous layer, stop
on null/too-small predictions or the layer cap, and fold the pick into the
cumulative mask for the next layer.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .diffusion import ConditionedInput, NoiseSchedule, reverse_step
from .maskops import from_signed, mask_area
from .training import image_to_tensor, mask_to_tensor

SELECTION_MODES = ("select_mask", "mean_mask")
STOP_REASONS = ("max_layers", "null_prediction", "area_below_min")


@dataclass(frozen=True)
class InferenceConfig:
    K: int = 3
    N_max: int = 5
    Area_min: int = 0
    selection_mode: str = "select_mask"
    distance: str = "l1"  # or "l2", for sensitivity checks
    rng_seed: int = 0

    def validate(self):
        if self.K < 1 or self.N_max < 1 or self.Area_min < 0:
            raise ValueError("need K >= 1, N_max >= 1, Area_min >= 0")
        if self.selection_mode not in SELECTION_MODES:
            raise ValueError(f"selection_mode must be one of {SELECTION_MODES}")
        if self.distance not in ("l1", "l2"):
            raise ValueError("distance must be 'l1' or 'l2'")

    def to_json(self) -> dict:
        return {"K": self.K, "N_max": self.N_max, "Area_min": self.Area_min,
                "selection_mode": self.selection_mode, "distance": self.distance,
                "rng_seed": self.rng_seed}


@dataclass
class LayerPrediction:
    samples: list            # K boolean masks (fewer if some were dropped)
    mean_map: np.ndarray     # float (H, W) over non-null samples
    selected: np.ndarray     # bool (H, W)
    selected_index: int      # -1 when all samples are null
    layer_index: int         # recorded layer (may repeat after reassignment)
    reassigned: bool = False


@dataclass
class MaskSequence:
    tau: list = field(default_factory=list)        # of LayerPrediction
    cumulative_trace: list = field(default_factory=list)  # CM after each layer
    stop_reason: str = ""
    denoiser_evals: int = 0

    def layer_masks(self) -> dict:
        """Recorded layer index -> union of selected masks at that index."""
        out: dict = {}
        for p in self.tau:
            if p.layer_index in out:
                out[p.layer_index] = out[p.layer_index] | p.selected
            else:
                out[p.layer_index] = p.selected.copy()
        return out


class _EvalCounter:
    def __init__(self):
        self.count = 0


def generate_masks(model, schedule: NoiseSchedule, image: np.ndarray,
                   cm: np.ndarray, K: int, generator: torch.Generator,
                   counter: _EvalCounter | None = None) -> list:
    """Draw K mask samples by full reverse diffusion from pure noise,
    conditioned on the clean image and cumulative mask. Returns binarized
    boolean masks; non-finite trajectories are dropped with a warning."""
    h, w = cm.shape
    img_t = image_to_tensor(image)[None].expand(K, -1, -1, -1)
    cm_t = mask_to_tensor(cm)[None].expand(K, -1, -1, -1)
    x = torch.randn(K, 1, h, w, generator=generator)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            z = torch.randn(K, 1, h, w, generator=generator) if t > 1 \
                else torch.zeros(K, 1, h, w)
            cond = ConditionedInput(
                image=img_t, cm=cm_t, noisy_mask=x,
                t=torch.full((K,), t, dtype=torch.long),
            )
            x = reverse_step(schedule, lambda c: model(c.stacked(), c.t), cond, z,
                             clip_x0=True)
            if counter is not None:
                counter.count += 1
    samples = []
    for k in range(K):
        xk = x[k, 0].numpy()
        if not np.all(np.isfinite(xk)):
            warnings.warn(f"sample {k} produced non-finite values; dropped")
            continue
        samples.append(from_signed(xk))
    return samples


def select_mask(samples: list, distance: str = "l1") -> tuple:
    """Pick the sample closest to the mean of the non-null samples.

    Returns (selected, mean_map, selected_index); ties go to the lowest
    index. With no non-null samples, selected is the null mask and
    selected_index is -1."""
    if not samples:
        raise ValueError("select_mask needs at least one sample")
    shape = samples[0].shape
    non_null = [(k, s) for k, s in enumerate(samples) if mask_area(s) > 0]
    if not non_null:
        return np.zeros(shape, dtype=bool), np.zeros(shape, dtype=np.float64), -1
    mean_map = np.mean([s.astype(np.float64) for _, s in non_null], axis=0)
    best_k, best_d = -1, np.inf
    for k, s in non_null:
        diff = s.astype(np.float64) - mean_map
        d = np.abs(diff).sum() if distance == "l1" else float((diff ** 2).sum())
        if d < best_d:
            best_k, best_d = k, d
    return samples[best_k].copy(), mean_map, best_k


def enforce_spatial_integrity(selected: np.ndarray, selected_prev: np.ndarray,
                              index: int, prev_index: int) -> tuple:
    """If the current pick shares no pixel with the previous layer's pick,
    record it at the previous layer's index. Returns (layer_index, reassigned)."""
    if np.any(selected & selected_prev):
        return index, False
    return prev_index, True


def infer(model, schedule: NoiseSchedule, image: np.ndarray,
          config: InferenceConfig) -> MaskSequence:
    """Run the full layer loop on one image."""
    config.validate()
    size = model.config.image_size
    if image.shape[:2] != (size, size):
        raise ValueError(
            f"image size {image.shape[:2]} does not match model image_size {size}"
        )
    g = torch.Generator().manual_seed(config.rng_seed)
    counter = _EvalCounter()
    cm = np.zeros((size, size), dtype=bool)
    seq = MaskSequence()
    i = 1
    while i <= config.N_max:
        samples = generate_masks(model, schedule, image, cm, config.K, g, counter)
        selected, mean_map, sel_idx = select_mask(samples, config.distance)
        layer_index, reassigned = i, False
        if seq.tau and sel_idx >= 0:
            layer_index, reassigned = enforce_spatial_integrity(
                selected, seq.tau[-1].selected, i, seq.tau[-1].layer_index
            )
        if sel_idx < 0:
            seq.stop_reason = "null_prediction"
            break
        if mask_area(selected) < config.Area_min:
            seq.stop_reason = "area_below_min"
            break
        # CM update is unconditional after the integrity step; in mean_mask
        # mode the binarized mean map feeds the cumulative mask instead
        update = selected if config.selection_mode == "select_mask" \
            else mean_map >= 0.5
        cm = cm | update
        seq.tau.append(LayerPrediction(
            samples=samples, mean_map=mean_map, selected=selected,
            selected_index=sel_idx, layer_index=layer_index, reassigned=reassigned,
        ))
        seq.cumulative_trace.append(cm.copy())
        i += 1
    else:
        seq.stop_reason = "max_layers"
    seq.denoiser_evals = counter.count
    return seq


# ---------------------------------------------------------------------------
# output bundle: tau.json + per-layer PNGs

def write_bundle(seq: MaskSequence, out_dir, config: InferenceConfig | None = None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for pos, p in enumerate(seq.tau, start=1):
        ldir = out / f"layer_{pos:02d}"
        ldir.mkdir(exist_ok=True)
        for k, s in enumerate(p.samples):
            Image.fromarray(s.astype(np.uint8) * 255).convert("1").save(
                ldir / f"sample_{k}.png")
        Image.fromarray((p.mean_map * 255).astype(np.uint8), mode="L").save(
            ldir / "mean_map.png")
        Image.fromarray(p.selected.astype(np.uint8) * 255).convert("1").save(
            ldir / "selected.png")
        entries.append({
            "position": pos,
            "layer_index": p.layer_index,
            "area": mask_area(p.selected),
            "selected_index": p.selected_index,
            "reassigned": p.reassigned,
            "num_samples": len(p.samples),
        })
    tau = {
        "layers": entries,
        "stop_reason": seq.stop_reason,
        "denoiser_evals": seq.denoiser_evals,
        "config": config.to_json() if config else None,
    }
    (out / "tau.json").write_text(json.dumps(tau, indent=2, sort_keys=True))


def read_bundle(bundle_dir) -> MaskSequence:
    """Reload a prediction bundle written by write_bundle (selected masks,
    mean maps, and metadata; enough for evaluation)."""
    bdir = Path(bundle_dir)
    tau = json.loads((bdir / "tau.json").read_text())
    seq = MaskSequence(stop_reason=tau["stop_reason"],
                       denoiser_evals=tau.get("denoiser_evals", 0))
    for entry in tau["layers"]:
        ldir = bdir / f"layer_{entry['position']:02d}"
        selected = np.array(Image.open(ldir / "selected.png").convert("1"), dtype=bool)
        mean_map = np.array(Image.open(ldir / "mean_map.png"), dtype=np.float64) / 255.0
        samples = []
        for k in range(entry["num_samples"]):
            samples.append(np.array(
                Image.open(ldir / f"sample_{k}.png").convert("1"), dtype=bool))
        seq.tau.append(LayerPrediction(
            samples=samples, mean_map=mean_map, selected=selected,
            selected_index=entry["selected_index"],
            layer_index=entry["layer_index"], reassigned=entry["reassigned"],
        ))
    return seq
