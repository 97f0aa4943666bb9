"""Procedural layered scenes with exact amodal masks and occlusion ground truth.

Each scene stacks a handful of flat-colored convex shapes (ellipse,
rectangle, triangle, capsule) on a plain background. Stacking order gives a
strict total depth order, from which the occlusion graph and layer indices
are derived geometrically. Rasterization is pure numpy with no
anti-aliasing, so every mask is exactly binary.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .occlusion import OcclusionGraph, layer_assignment

GENERATOR_VERSION = "scene-synth-1"

DEFAULT_PALETTE = (
    (230, 70, 60),
    (60, 140, 230),
    (70, 190, 90),
    (240, 200, 60),
    (180, 90, 220),
    (240, 140, 50),
    (90, 210, 200),
    (230, 120, 170),
)

SHAPE_FAMILIES = ("ellipse", "rectangle", "triangle", "capsule")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 32
    height: int = 32
    num_objects: int = 3
    shape_families: tuple = SHAPE_FAMILIES
    size_range: tuple = (0.3, 0.6)  # fraction of image dimension
    color_palette: tuple = DEFAULT_PALETTE
    background: tuple = (24, 24, 24)
    seed: int = 0
    min_object_area: int = 16
    min_visible_pixels: int = 10

    def validate(self):
        if self.width != self.height:
            raise ValueError("scenes are square: width must equal height")
        if self.num_objects < 1:
            raise ValueError("num_objects must be >= 1")
        unknown = set(self.shape_families) - set(SHAPE_FAMILIES)
        if unknown:
            raise ValueError(f"unknown shape families: {sorted(unknown)}")
        lo, hi = self.size_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"bad size_range: {self.size_range}")


@dataclass(frozen=True)
class SceneObject:
    object_id: str
    amodal_mask: np.ndarray  # bool (H, W)
    stack_rank: int  # larger = closer to the viewer


@dataclass
class LayeredScene:
    scene_id: str
    image: np.ndarray  # uint8 (H, W, 3)
    objects: list  # of SceneObject, in stack_rank order
    occlusion: OcclusionGraph
    layers: dict  # object_id -> layer index
    spec: SceneSpec | None = None

    @property
    def num_layers(self) -> int:
        return max(self.layers.values())

    def visible_mask(self, object_id: str) -> np.ndarray:
        by_id = {o.object_id: o for o in self.objects}
        obj = by_id[object_id]
        vis = obj.amodal_mask.copy()
        for other in self.objects:
            if other.stack_rank > obj.stack_rank:
                vis &= ~other.amodal_mask
        return vis


class SceneGenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# rasterization

def _grid(size):
    ys, xs = np.mgrid[0:size, 0:size]
    return xs.astype(np.float64) + 0.5, ys.astype(np.float64) + 0.5


def _rot(xs, ys, cx, cy, theta):
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(theta), np.sin(theta)
    return c * dx + s * dy, -s * dx + c * dy


def _raster_ellipse(size, cx, cy, a, b, theta):
    xs, ys = _grid(size)
    u, v = _rot(xs, ys, cx, cy, theta)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _raster_rectangle(size, cx, cy, a, b, theta):
    xs, ys = _grid(size)
    u, v = _rot(xs, ys, cx, cy, theta)
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def _raster_triangle(size, cx, cy, r, theta):
    xs, ys = _grid(size)
    angles = theta + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
    px = cx + r * np.cos(angles)
    py = cy + r * np.sin(angles)
    inside = np.ones((size, size), dtype=bool)
    for k in range(3):
        x1, y1 = px[k], py[k]
        x2, y2 = px[(k + 1) % 3], py[(k + 1) % 3]
        # vertices are CCW, keep the left half-plane of each edge
        inside &= (x2 - x1) * (ys - y1) - (y2 - y1) * (xs - x1) >= 0
    return inside


def _raster_capsule(size, cx, cy, half_len, radius, theta):
    xs, ys = _grid(size)
    u, v = _rot(xs, ys, cx, cy, theta)
    t = np.clip(u, -half_len, half_len)
    return (u - t) ** 2 + v ** 2 <= radius ** 2


def _sample_shape_mask(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    size = spec.width
    lo, hi = spec.size_range
    family = spec.shape_families[rng.integers(len(spec.shape_families))]
    cx = rng.uniform(0.15 * size, 0.85 * size)
    cy = rng.uniform(0.15 * size, 0.85 * size)
    theta = rng.uniform(0, 2 * np.pi)
    s = rng.uniform(lo, hi) * size
    if family == "ellipse":
        return _raster_ellipse(size, cx, cy, s / 2, rng.uniform(0.5, 1.0) * s / 2, theta)
    if family == "rectangle":
        return _raster_rectangle(size, cx, cy, s / 2, rng.uniform(0.4, 1.0) * s / 2, theta)
    if family == "triangle":
        return _raster_triangle(size, cx, cy, s / 1.6, theta)
    return _raster_capsule(size, cx, cy, s / 2.5, rng.uniform(0.25, 0.45) * s, theta)


# ---------------------------------------------------------------------------
# generation

def generate_scene(spec: SceneSpec, scene_id: str = "scene", max_retries: int = 200) -> LayeredScene:
    """Generate one layered scene, deterministic in spec.seed.

    Objects are placed back-to-front; a placement is rejected when it would
    starve any already-placed object below min_visible_pixels. Fails after
    max_retries rejected placements.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    placed: list[np.ndarray] = []
    retries = 0
    while len(placed) < spec.num_objects:
        mask = _sample_shape_mask(rng, spec)
        ok = mask.sum() >= spec.min_object_area
        if ok:
            # candidate goes on top of everything placed so far
            for k, prev in enumerate(placed):
                vis = prev & ~mask
                for later in placed[k + 1:]:
                    vis &= ~later
                if vis.sum() < spec.min_visible_pixels:
                    ok = False
                    break
        if ok:
            placed.append(mask)
        else:
            retries += 1
            if retries > max_retries:
                raise SceneGenerationError(
                    f"could not place {spec.num_objects} objects within "
                    f"{max_retries} retries (seed={spec.seed})"
                )

    objects = [
        SceneObject(object_id=f"obj{k}", amodal_mask=m, stack_rank=k)
        for k, m in enumerate(placed)
    ]

    # occlusion purely from geometry + stack order: i occluded by any
    # intersecting object above it
    edges = set()
    for a in objects:
        for b in objects:
            if b.stack_rank > a.stack_rank and np.any(a.amodal_mask & b.amodal_mask):
                edges.add((a.object_id, b.object_id))
    graph = OcclusionGraph(
        nodes=frozenset(o.object_id for o in objects), edges=frozenset(edges)
    )
    layers = layer_assignment(graph)

    image = np.empty((spec.height, spec.width, 3), dtype=np.uint8)
    image[:] = np.array(spec.background, dtype=np.uint8)
    palette = spec.color_palette
    for obj in objects:  # ascending stack_rank: topmost paints last
        color = palette[int(rng.integers(len(palette)))]
        image[obj.amodal_mask] = np.array(color, dtype=np.uint8)

    return LayeredScene(
        scene_id=scene_id, image=image, objects=objects,
        occlusion=graph, layers=layers, spec=spec,
    )


def dataset_stats(scenes) -> tuple:
    """(N_max, Area_min) over a scene collection: deepest layer index and
    smallest amodal mask area."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("dataset_stats needs a nonempty scene collection")
    n_max = max(s.num_layers for s in scenes)
    area_min = min(int(o.amodal_mask.sum()) for s in scenes for o in s.objects)
    return n_max, area_min


# ---------------------------------------------------------------------------
# on-disk layout:
#   root/manifest.json
#   root/scenes/<id>/image.png
#   root/scenes/<id>/objects/<object_id>.png   (1-bit amodal masks)
#   root/scenes/<id>/annotation.json

def _save_mask_png(mask: np.ndarray, path: Path):
    Image.fromarray(mask.astype(np.uint8) * 255).convert("1").save(path)


def _load_mask_png(path: Path) -> np.ndarray:
    return np.array(Image.open(path).convert("1"), dtype=bool)


def _spec_to_json(spec: SceneSpec) -> dict:
    return {
        "width": spec.width, "height": spec.height,
        "num_objects": spec.num_objects,
        "shape_families": list(spec.shape_families),
        "size_range": list(spec.size_range),
        "color_palette": [list(c) for c in spec.color_palette],
        "background": list(spec.background),
        "seed": int(spec.seed),
        "min_object_area": spec.min_object_area,
        "min_visible_pixels": spec.min_visible_pixels,
    }


def _spec_from_json(d: dict) -> SceneSpec:
    return SceneSpec(
        width=d["width"], height=d["height"], num_objects=d["num_objects"],
        shape_families=tuple(d["shape_families"]),
        size_range=tuple(d["size_range"]),
        color_palette=tuple(tuple(c) for c in d["color_palette"]),
        background=tuple(d["background"]), seed=d["seed"],
        min_object_area=d["min_object_area"],
        min_visible_pixels=d["min_visible_pixels"],
    )


def write_dataset(scenes, root_path) -> dict:
    """Write scenes under root_path and return the manifest dict."""
    root = Path(root_path)
    scenes = list(scenes)
    n_max, area_min = dataset_stats(scenes)
    scenes_dir = root / "scenes"
    if scenes_dir.exists():
        shutil.rmtree(scenes_dir)
    entries = []
    for scene in scenes:
        sdir = scenes_dir / scene.scene_id
        (sdir / "objects").mkdir(parents=True)
        Image.fromarray(scene.image).save(sdir / "image.png")
        for obj in scene.objects:
            _save_mask_png(obj.amodal_mask, sdir / "objects" / f"{obj.object_id}.png")
        ann = {
            "objects": [
                {
                    "object_id": o.object_id,
                    "stack_rank": o.stack_rank,
                    "layer": scene.layers[o.object_id],
                    "area": int(o.amodal_mask.sum()),
                }
                for o in scene.objects
            ],
            "occlusion": sorted([list(e) for e in scene.occlusion.edges]),
            "spec": _spec_to_json(scene.spec) if scene.spec else None,
        }
        (sdir / "annotation.json").write_text(json.dumps(ann, indent=2, sort_keys=True))
        entries.append({
            "scene_id": scene.scene_id,
            "num_objects": len(scene.objects),
            "num_layers": scene.num_layers,
        })
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "num_scenes": len(scenes),
        "n_max": n_max,
        "area_min": area_min,
        "scenes": entries,
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def read_manifest(root_path) -> dict:
    path = Path(root_path) / "manifest.json"
    if not path.exists():
        raise DatasetFormatError(f"missing manifest: {path}")
    return json.loads(path.read_text())


def read_dataset(root_path) -> list:
    """Load a dataset written by write_dataset; validates referential integrity."""
    root = Path(root_path)
    manifest = read_manifest(root)
    scenes = []
    for entry in manifest["scenes"]:
        sid = entry["scene_id"]
        sdir = root / "scenes" / sid
        try:
            ann = json.loads((sdir / "annotation.json").read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetFormatError(f"bad annotation for scene {sid}: {e}") from e
        image = np.array(Image.open(sdir / "image.png").convert("RGB"), dtype=np.uint8)
        known_ids = {o["object_id"] for o in ann["objects"]}
        objects = []
        for o in ann["objects"]:
            mask = _load_mask_png(sdir / "objects" / f"{o['object_id']}.png")
            if mask.shape != image.shape[:2]:
                raise DatasetFormatError(
                    f"scene {sid} object {o['object_id']}: mask shape {mask.shape} "
                    f"!= image shape {image.shape[:2]}"
                )
            objects.append(SceneObject(o["object_id"], mask, o["stack_rank"]))
        for i, j in ann["occlusion"]:
            if i not in known_ids or j not in known_ids:
                raise DatasetFormatError(
                    f"scene {sid}: occlusion edge ({i}, {j}) references unknown object_id"
                )
        graph = OcclusionGraph(
            nodes=frozenset(known_ids),
            edges=frozenset((i, j) for i, j in ann["occlusion"]),
        )
        layers = {o["object_id"]: o["layer"] for o in ann["objects"]}
        spec = _spec_from_json(ann["spec"]) if ann.get("spec") else None
        scenes.append(LayeredScene(sid, image, objects, graph, layers, spec))
    return scenes


def dataset_digest(root_path) -> str:
    """Content hash over every file in the dataset tree (order-canonical)."""
    root = Path(root_path)
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(path.relative_to(root)).encode())
        h.update(path.read_bytes())
    return h.hexdigest()
