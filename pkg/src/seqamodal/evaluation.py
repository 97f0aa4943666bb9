"""Metrics and ablation harnesses: per-layer IoU and AP@0.5 with and
without layer agreement, plus sweeps over ensemble size, selection mode,
and training-time cumulative-mask noise.

AP@0.5 here is the fraction of (image, layer) pairs whose mask IoU against
ground truth reaches 0.5; a single-threshold precision, not COCO AP.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .inference import InferenceConfig, MaskSequence, infer
from .maskops import check_same_shape
from .occlusion import layer_union_masks

AP_IOU_THRESHOLD = 0.5


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty, 0.0 when
    exactly one is."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    check_same_shape(a, b)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def evaluate_with_layer(pred: MaskSequence, gt) -> list:
    """Per-GT-layer IoU with layer agreement: GT layer-union mask vs the
    union of predicted masks recorded at the same layer index. A missing
    predicted layer scores 0 against a nonempty GT layer."""
    gt_unions = layer_union_masks(gt)
    pred_layers = pred.layer_masks()
    scores = []
    for k, gt_mask in enumerate(gt_unions, start=1):
        if k in pred_layers:
            scores.append(iou(pred_layers[k], gt_mask))
        else:
            scores.append(1.0 if gt_mask.sum() == 0 else 0.0)
    return scores


def evaluate_without_layer(pred: MaskSequence, gt) -> list:
    """Layer-agnostic scores: greedy one-to-one matching of predicted layer
    masks to GT layer masks in descending IoU order. Returns, per GT layer,
    the IoU of its match (0 when unmatched)."""
    gt_unions = layer_union_masks(gt)
    pred_layers = list(pred.layer_masks().values())
    pairs = []
    for gi, gm in enumerate(gt_unions):
        for pi, pm in enumerate(pred_layers):
            pairs.append((iou(pm, gm), gi, pi))
    pairs.sort(key=lambda x: (-x[0], x[1], x[2]))
    scores = [0.0] * len(gt_unions)
    used_g, used_p = set(), set()
    for v, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
        scores[gi] = v
    return scores


@dataclass
class EvalReport:
    per_layer: list = field(default_factory=list)  # dicts: layer, mean_iou, ap, n
    ap_with_layer: float = 0.0
    ap_without_layer: float = 0.0
    num_images: int = 0
    config_digest: str = ""


def aggregate(per_image_with: list, per_image_without: list,
              config_digest: str = "") -> EvalReport:
    """Fold per-image per-layer IoU lists into the report."""
    n_layers = max((len(s) for s in per_image_with), default=0)
    per_layer = []
    for k in range(n_layers):
        ious = [s[k] for s in per_image_with if len(s) > k]
        hits = [v >= AP_IOU_THRESHOLD for v in ious]
        per_layer.append({
            "layer": k + 1,
            "mean_iou": float(np.mean(ious)),
            "ap": float(np.mean(hits)),
            "n": len(ious),
        })
    all_w = [v for s in per_image_with for v in s]
    all_wo = [v for s in per_image_without for v in s]
    return EvalReport(
        per_layer=per_layer,
        ap_with_layer=float(np.mean([v >= AP_IOU_THRESHOLD for v in all_w])) if all_w else 0.0,
        ap_without_layer=float(np.mean([v >= AP_IOU_THRESHOLD for v in all_wo])) if all_wo else 0.0,
        num_images=len(per_image_with),
        config_digest=config_digest,
    )


def evaluate_dataset(model, schedule, scenes, config: InferenceConfig,
                     config_digest: str = "", predictions: list | None = None) -> EvalReport:
    """Run inference (unless predictions are supplied) and aggregate metrics.

    Per-image seeds are derived from config.rng_seed so reruns are
    reproducible and images are independent."""
    if predictions is None:
        predictions = predict_dataset(model, schedule, scenes, config)
    per_w, per_wo = [], []
    for scene, seq in zip(scenes, predictions):
        per_w.append(evaluate_with_layer(seq, scene))
        per_wo.append(evaluate_without_layer(seq, scene))
    return aggregate(per_w, per_wo, config_digest)


def predict_dataset(model, schedule, scenes, config: InferenceConfig) -> list:
    preds = []
    for j, scene in enumerate(scenes):
        cfg = replace(config, rng_seed=config.rng_seed + 7919 * j)
        preds.append(infer(model, schedule, scene.image, cfg))
    return preds


# ---------------------------------------------------------------------------
# ablation harnesses

def ablate_ensemble(model, schedule, scenes, K_values, base_config: InferenceConfig) -> list:
    """Per-layer IoU/AP at each ensemble size, shared seed discipline.

    Returns rows: {K, layer, mean_iou, ap}."""
    rows = []
    for K in K_values:
        report = evaluate_dataset(model, schedule, scenes, replace(base_config, K=K))
        for pl in report.per_layer:
            rows.append({"K": K, "layer": pl["layer"],
                         "mean_iou": pl["mean_iou"], "ap": pl["ap"]})
    return rows


def ablate_selection(model, schedule, scenes, base_config: InferenceConfig) -> list:
    """Paired runs with identical seeds, select_mask vs mean_mask; returns
    rows {layer, ap_select, ap_mean, delta}."""
    rep_sel = evaluate_dataset(model, schedule, scenes,
                               replace(base_config, selection_mode="select_mask"))
    rep_mean = evaluate_dataset(model, schedule, scenes,
                                replace(base_config, selection_mode="mean_mask"))
    by_layer_mean = {pl["layer"]: pl for pl in rep_mean.per_layer}
    rows = []
    for pl in rep_sel.per_layer:
        m = by_layer_mean.get(pl["layer"], {"ap": 0.0})
        rows.append({"layer": pl["layer"], "ap_select": pl["ap"],
                     "ap_mean": m["ap"], "delta": pl["ap"] - m["ap"]})
    return rows


def ablate_noise(train_fn, noise_levels, eval_fn) -> list:
    """Train one model per cumulative-mask noise level and evaluate each.

    train_fn(noise_level) -> model; eval_fn(model) -> EvalReport. Returns
    rows {noise_level, layer, mean_iou, ap}."""
    rows = []
    for level in noise_levels:
        model = train_fn(level)
        report = eval_fn(model)
        for pl in report.per_layer:
            rows.append({"noise_level": level, "layer": pl["layer"],
                         "mean_iou": pl["mean_iou"], "ap": pl["ap"]})
    return rows


# ---------------------------------------------------------------------------
# report rendering

def report_to_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "mean_iou", "ap"])
    for pl in report.per_layer:
        writer.writerow([pl["layer"], f"{pl['mean_iou']:.6f}", f"{pl['ap']:.6f}"])
    writer.writerow(["ap_with_layer", f"{report.ap_with_layer:.6f}", ""])
    writer.writerow(["ap_without_layer", f"{report.ap_without_layer:.6f}", ""])
    return buf.getvalue()


def report_to_markdown(report: EvalReport) -> str:
    lines = ["| Layer | IoU | AP@0.5 |", "|---|---|---|"]
    for pl in report.per_layer:
        lines.append(f"| {pl['layer']} | {100 * pl['mean_iou']:.1f} | {100 * pl['ap']:.1f} |")
    lines.append("")
    lines.append(f"AP@0.5 w/ layer: {100 * report.ap_with_layer:.1f}  ")
    lines.append(f"AP@0.5 w/o layer: {100 * report.ap_without_layer:.1f}")
    return "\n".join(lines)


def rows_to_csv(rows: list, fieldnames: list) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v)
                         for k, v in r.items()})
    return buf.getvalue()


def rows_to_markdown(rows: list, fieldnames: list) -> str:
    lines = ["| " + " | ".join(fieldnames) + " |",
             "|" + "---|" * len(fieldnames)]
    for r in rows:
        cells = [f"{r[k]:.3f}" if isinstance(r[k], float) else str(r[k])
                 for k in fieldnames]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def report_to_json(report: EvalReport) -> str:
    return json.dumps({
        "per_layer": report.per_layer,
        "ap_with_layer": report.ap_with_layer,
        "ap_without_layer": report.ap_without_layer,
        "num_images": report.num_images,
        "config_digest": report.config_digest,
    }, indent=2, sort_keys=True)
