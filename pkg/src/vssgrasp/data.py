"""Dataset handling: grasp-rectangle parsers, target rasterization, synthetic
scene generation, and deterministic split plans.

On-disk layouts understood:

* Cornell-style: ``pcdXXXXr.png`` RGB, ``pcdXXXXcpos.txt`` positive
  rectangles (four "x y" corner lines each, NaN rectangles skipped),
  optional ``pcdXXXXd.tiff`` depth raster.  If an ``object_labels.txt`` /
  ``z.txt`` index ("scene_id object_id" per line) is present it provides
  object identities for object-wise splits; otherwise each scene is its own
  object.
* Jacquard-style: ``*_RGB.png``, ``*_grasps.txt`` ("x;y;theta;opening;jaws"
  lines, theta in degrees), ``*_perfect_depth.tiff`` (the depth-completed
  variant).  Scenes may sit in per-object subdirectories whose name becomes
  the object id.

Synthetic scenes are written in the Cornell layout so every downstream path
is format-uniform.
"""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .grasp import GraspMaps, GraspRect, WIDTH_SCALE, polygon_mask

IMAGE_SIZE = 224


class DataError(ValueError):
    """Malformed dataset content (file-level parse failures)."""


@dataclass
class Scene:
    id: str
    rgb: np.ndarray                    # (H, W, 3) uint8
    depth: np.ndarray | None           # (H, W) float, dataset-native units
    positives: list[GraspRect]
    object_id: str


@dataclass
class SplitPlan:
    mode: str = "image"  # "image" | "object"
    k: int = 5
    fold: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("image", "object"):
            raise ValueError(f"unknown split mode {self.mode!r}")
        if not (0 <= self.fold < self.k):
            raise ValueError(f"fold {self.fold} outside 0..{self.k - 1}")


# ---------------------------------------------------------------------------
# parsers
# ---------------------------------------------------------------------------


def _read_object_index(root: Path) -> dict[str, str]:
    for name in ("object_labels.txt", "z.txt"):
        path = root / name
        if path.exists():
            table = {}
            for line in path.read_text().splitlines():
                parts = line.split()
                if len(parts) >= 2:
                    table[parts[0]] = parts[1]
            return table
    return {}


def parse_cornell(root) -> tuple[list[Scene], int]:
    """Load every Cornell-layout scene under `root`.

    Returns (scenes, skipped) where `skipped` counts rectangles dropped for
    NaN corners.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    ann_files = sorted(root.rglob("pcd*cpos.txt"))
    if not ann_files:
        raise DataError(f"no pcd*cpos.txt annotation files under {root}")
    index = _read_object_index(root)
    scenes = []
    skipped = 0
    for ann in ann_files:
        scene_id = ann.name[: -len("cpos.txt")]
        rgb_path = ann.with_name(scene_id + "r.png")
        if not rgb_path.exists():
            raise DataError(f"missing RGB image for {ann}")
        rects, bad = _parse_corner_file(ann)
        skipped += bad
        depth_path = ann.with_name(scene_id + "d.tiff")
        depth = _read_depth(depth_path) if depth_path.exists() else None
        rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
        scenes.append(Scene(scene_id, rgb, depth, rects,
                            index.get(scene_id, scene_id)))
    return scenes, skipped


def _parse_corner_file(path: Path) -> tuple[list[GraspRect], int]:
    corners = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'x y', got {line!r}")
        corners.append((float(parts[1]), float(parts[0])))  # (row, col)
    if len(corners) % 4 != 0:
        raise DataError(f"{path}: corner count {len(corners)} is not a multiple of 4")
    rects = []
    skipped = 0
    from .grasp import rect_from_corners
    for i in range(0, len(corners), 4):
        quad = np.array(corners[i:i + 4])
        if not np.isfinite(quad).all():
            skipped += 1
            continue
        rects.append(rect_from_corners(quad))
    return rects, skipped


_JACQUARD_NAME = re.compile(r"(?P<stem>.+)_grasps\.txt$")


def parse_jacquard(root) -> tuple[list[Scene], int]:
    """Load every Jacquard-layout scene under `root`.

    Returns (scenes, skipped) with `skipped` counting malformed annotation
    lines.  The angle column is degrees; it is normalized into (-90, 90].
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    ann_files = sorted(root.rglob("*_grasps.txt"))
    if not ann_files:
        raise DataError(f"no *_grasps.txt annotation files under {root}")
    scenes = []
    skipped = 0
    for ann in ann_files:
        stem = _JACQUARD_NAME.match(ann.name).group("stem")
        rgb_path = ann.with_name(stem + "_RGB.png")
        if not rgb_path.exists():
            raise DataError(f"missing RGB image for {ann}")
        rects = []
        for lineno, line in enumerate(ann.read_text().splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(";")
            try:
                x, y, theta_deg, opening, jaws = (float(v) for v in parts)
            except ValueError:
                skipped += 1
                continue
            rects.append(GraspRect((y, x), opening, jaws,
                                   math.radians(theta_deg)))
        depth_path = ann.with_name(stem + "_perfect_depth.tiff")
        depth = _read_depth(depth_path) if depth_path.exists() else None
        # nested layout: parent directory names the object instance
        object_id = ann.parent.name if ann.parent != root else stem.split("_", 1)[-1]
        rgb = np.asarray(Image.open(rgb_path).convert("RGB"))
        scenes.append(Scene(stem, rgb, depth, rects, object_id))
    return scenes, skipped


def _read_depth(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float32)


# ---------------------------------------------------------------------------
# target rasterization
# ---------------------------------------------------------------------------


def rasterize_targets(positives: list[GraspRect], hw: tuple[int, int]) -> GraspMaps:
    """Paint each rectangle's center third (along the jaw axis, full height)
    with quality 1, its doubled-angle components, and width / WIDTH_SCALE.

    Overlaps resolve last-writer in list order.
    """
    h, w = hw
    quality = np.zeros((h, w), dtype=np.float32)
    sin2t = np.zeros((h, w), dtype=np.float32)
    cos2t = np.zeros((h, w), dtype=np.float32)
    width = np.zeros((h, w), dtype=np.float32)
    for rect in positives:
        third = GraspRect(rect.center, rect.width / 3.0, rect.height,
                          rect.angle, rect.quality)
        mask = polygon_mask(third.corners(), hw)
        quality[mask] = 1.0
        sin2t[mask] = math.sin(2.0 * rect.angle)
        cos2t[mask] = math.cos(2.0 * rect.angle)
        width[mask] = min(rect.width / WIDTH_SCALE, 1.0)
    return GraspMaps(quality, sin2t, cos2t, width)


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------


def _object_mask(kind: str, center, length, thick, phi, hw) -> np.ndarray:
    r0, c0 = center
    if kind == "bar":
        # the drawing rect's first axis runs along the object's long axis
        return polygon_mask(GraspRect(center, length, thick, phi).corners(), hw)
    if kind == "ellipse":
        rr, cc = np.meshgrid(np.arange(hw[0]), np.arange(hw[1]), indexing="ij")
        dr, dc = rr - r0, cc - c0
        u = dr * math.sin(phi) + dc * math.cos(phi)
        v = -dr * math.cos(phi) + dc * math.sin(phi)
        return (u / (length / 2)) ** 2 + (v / (thick / 2)) ** 2 <= 1.0
    if kind == "tee":
        stem = polygon_mask(GraspRect(center, length, thick, phi).corners(), hw)
        tip_r = r0 + (length / 2) * math.sin(phi)
        tip_c = c0 + (length / 2) * math.cos(phi)
        cap = polygon_mask(
            GraspRect((tip_r, tip_c), 0.55 * length, thick,
                      phi + math.pi / 2).corners(), hw)
        return stem | cap
    raise ValueError(f"unknown shape kind {kind!r}")


def _grasp_sites(kind: str, center, length, thick, phi) -> list[GraspRect]:
    """Analytic positives: jaws close across the thin axis, so the grasp
    angle is perpendicular to the object's long axis."""
    r0, c0 = center
    grasp_angle = phi + math.pi / 2
    margin = 8.0
    sites = []
    if kind == "tee":
        offsets_range = (-0.38, 0.05)  # stay on the free end of the stem
    else:
        offsets_range = (-0.32, 0.32)
    w_nom = thick + margin
    step = max(w_nom / 2.0, 6.0)
    span = (offsets_range[1] - offsets_range[0]) * length
    n_sites = max(1, int(span / step))
    for i in range(n_sites + 1):
        frac = offsets_range[0] + (offsets_range[1] - offsets_range[0]) * \
            (i / max(n_sites, 1))
        off = frac * length
        if kind == "ellipse":
            rel = 2.0 * off / length
            local = thick * math.sqrt(max(1.0 - rel * rel, 0.0))
            if local < 0.55 * thick:
                continue
            w = local + margin
        else:
            w = w_nom
        r = r0 + off * math.sin(phi)
        c = c0 + off * math.cos(phi)
        sites.append(GraspRect((r, c), w, w / 2.0, grasp_angle))
    return sites


def make_synthetic_scene(seed: int, size: int = IMAGE_SIZE) -> Scene:
    """Render 1-3 non-overlapping elongated objects with analytically known
    grasps on a textured background; deterministic per seed."""
    rng = np.random.default_rng(seed)
    hw = (size, size)

    base = rng.uniform(70, 120)
    coarse = rng.uniform(-25, 25, size=(8, 8))
    texture = ndimage.zoom(coarse, size / 8, order=1)
    gray = np.clip(base + texture + rng.uniform(-6, 6, hw), 0, 255)
    rgb = np.stack([gray] * 3, axis=-1)
    tint = rng.uniform(0.9, 1.1, size=3)
    rgb = np.clip(rgb * tint, 0, 255)

    depth = 0.9 + 0.002 * texture.astype(np.float32) \
        + rng.normal(0, 0.001, hw).astype(np.float32)

    n_obj = int(rng.integers(1, 4))
    placed = []  # (center, radius)
    positives: list[GraspRect] = []
    object_id = None
    for _ in range(n_obj):
        kind = ["bar", "ellipse", "tee"][int(rng.integers(0, 3))]
        length = rng.uniform(60, 105)
        thick = rng.uniform(14, 26)
        phi = rng.uniform(-math.pi / 2, math.pi / 2)
        radius = length * 0.62
        center = None
        for _ in range(60):
            cand = (rng.uniform(45, size - 45), rng.uniform(45, size - 45))
            if all(math.hypot(cand[0] - p[0], cand[1] - p[1]) > radius + pr
                   for p, pr in placed):
                center = cand
                break
        if center is None:
            continue
        placed.append((center, radius))

        mask = _object_mask(kind, center, length, thick, phi, hw)
        color = rng.uniform(0, 255, size=3)
        while abs(color.mean() - base) < 45:  # keep contrast with background
            color = rng.uniform(0, 255, size=3)
        shade = 1.0 + rng.normal(0, 0.03, hw)
        for ch in range(3):
            rgb[..., ch][mask] = np.clip(color[ch] * shade[mask], 0, 255)
        depth[mask] = 0.9 - rng.uniform(0.02, 0.05)

        positives.extend(_grasp_sites(kind, center, length, thick, phi))
        if object_id is None:
            object_id = f"{kind}{int(rng.integers(0, 12)):02d}"

    if not positives:  # placement failed entirely; retry deterministically
        return make_synthetic_scene(seed + 1_000_003, size)

    return Scene(f"pcd{seed:06d}", rgb.astype(np.uint8),
                 depth.astype(np.float32), positives,
                 object_id or "none")


def write_scene_cornell(scene: Scene, out_dir) -> None:
    """Emit a scene in the Cornell on-disk layout."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(scene.rgb).save(out_dir / f"{scene.id}r.png")
    lines = []
    for rect in scene.positives:
        for r, c in rect.corners():
            lines.append(f"{c:.6f} {r:.6f}")
    (out_dir / f"{scene.id}cpos.txt").write_text("\n".join(lines) + "\n")
    if scene.depth is not None:
        Image.fromarray(scene.depth.astype(np.float32), mode="F").save(
            out_dir / f"{scene.id}d.tiff")


def write_synthetic_dataset(out_dir, count: int, seed: int = 0) -> list[str]:
    """Generate `count` synthetic scenes on disk (Cornell layout) plus an
    object index for object-wise splitting; returns the scene ids."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ids = []
    index_lines = []
    for i in range(count):
        scene = make_synthetic_scene(seed + i)
        write_scene_cornell(scene, out_dir)
        ids.append(scene.id)
        index_lines.append(f"{scene.id} {scene.object_id}")
    (out_dir / "object_labels.txt").write_text("\n".join(index_lines) + "\n")
    return ids


def load_synthetic(count: int, seed: int = 0) -> list[Scene]:
    return [make_synthetic_scene(seed + i) for i in range(count)]


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_dataset(scenes: list[Scene], plan: SplitPlan) -> tuple[list[str], list[str]]:
    """Deterministic k-fold split; returns (train_ids, val_ids).

    Image-wise mode shuffles scenes; object-wise mode shuffles object ids so
    no object appears on both sides.
    """
    rng = np.random.default_rng(plan.seed)
    if plan.mode == "image":
        ids = [s.id for s in scenes]
        order = rng.permutation(len(ids))
        folds = np.array_split(order, plan.k)
        val_idx = set(folds[plan.fold].tolist())
        val = [ids[i] for i in sorted(val_idx)]
        train = [ids[i] for i in range(len(ids)) if i not in val_idx]
        return train, val
    objects = sorted({s.object_id for s in scenes})
    order = rng.permutation(len(objects))
    folds = np.array_split(order, plan.k)
    val_objects = {objects[i] for i in folds[plan.fold].tolist()}
    train = [s.id for s in scenes if s.object_id not in val_objects]
    val = [s.id for s in scenes if s.object_id in val_objects]
    return train, val


# ---------------------------------------------------------------------------
# network input / target preparation
# ---------------------------------------------------------------------------


def normalize_rgb(rgb: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float32 in [-1, 1] via x/127.5 - 1."""
    return (rgb.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """(H,W) -> (1,H,W): per-image mean subtracted, clipped to [-1, 1]."""
    d = depth.astype(np.float32)
    d = d - d.mean(dtype=np.float64).astype(np.float32)
    return np.clip(d, -1.0, 1.0)[None]


def scene_input(scene: Scene, modality: str) -> np.ndarray:
    if modality == "rgb":
        return normalize_rgb(scene.rgb)
    if modality == "rgbd":
        if scene.depth is None:
            raise DataError(f"scene {scene.id} has no depth raster")
        return np.concatenate([normalize_rgb(scene.rgb),
                               normalize_depth(scene.depth)], axis=0)
    raise ValueError(f"unknown modality {modality!r}")


def scene_targets(scene: Scene) -> GraspMaps:
    return rasterize_targets(scene.positives, scene.rgb.shape[:2])


# ---------------------------------------------------------------------------
# augmentation (off by default; applied identically to image and rectangles)
# ---------------------------------------------------------------------------


def augment_scene(scene: Scene, rng: np.random.Generator,
                  max_jitter_deg: float = 15.0,
                  zoom_range: tuple[float, float] = (0.9, 1.1)) -> Scene:
    """Random quarter-turn plus continuous rotation jitter and zoom about the
    image center."""
    h, w = scene.rgb.shape[:2]
    alpha = (math.pi / 2) * int(rng.integers(0, 4)) \
        + math.radians(rng.uniform(-max_jitter_deg, max_jitter_deg))
    scale = rng.uniform(*zoom_range)
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])

    rot = np.array([[math.cos(alpha), -math.sin(alpha)],
                    [math.sin(alpha), math.cos(alpha)]])
    inv = rot.T / scale  # output pixel q samples input at inv @ (q - c) + c
    offset = center - inv @ center

    def warp(img, order=1):
        return ndimage.affine_transform(img, inv, offset=offset, order=order,
                                        mode="nearest")

    rgb = np.stack([warp(scene.rgb[..., ch].astype(np.float32))
                    for ch in range(3)], axis=-1)
    depth = warp(scene.depth) if scene.depth is not None else None

    rects = []
    for rect in scene.positives:
        new_center = scale * (rot @ (np.asarray(rect.center) - center)) + center
        rects.append(GraspRect(tuple(new_center), scale * rect.width,
                               scale * rect.height, rect.angle - alpha,
                               rect.quality))
    return Scene(scene.id, np.clip(rgb, 0, 255).astype(np.uint8), depth,
                 rects, scene.object_id)
