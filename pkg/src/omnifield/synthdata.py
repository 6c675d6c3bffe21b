"""Procedural scenes with ground-truth hierarchy and simulated mask evidence.

Scenes are point-sampled surfaces: a handful of objects, each made of primitive
parts (boxes, spheres, cylinders), each part split into angular subparts. Every
point carries its (object, part, subpart) path, which makes exact per-view
ground truth available for benchmarks.

Per-view mask sets emulate what a click-based 2D segmenter would produce:
for each visible object a granularity is drawn independently per view (whole
object, parts, or subparts), masks for all nodes down to that granularity are
emitted, then individual masks are randomly dropped and their boundaries
jittered. The granularity draw being independent across views is deliberate -
it creates exactly the multi-view inconsistency the feature field has to
resolve.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field as dc_field, fields, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .binio import read_container, write_container
from .field import Camera, SurfaceField, look_at_camera, render_surface
from .hier2d import (
    HierLevels,
    HierRep,
    MaskSet,
    all_hierarchy_levels,
    build_correlation,
    build_partition,
    load_hierrep,
    save_hierrep,
)

_MASKS_MAGIC = b"OMNIMSKS"
_MASKS_VERSION = 1
_POINTS_MAGIC = b"OMNIPNTS"
_POINTS_VERSION = 1
_LABELS_MAGIC = b"OMNILBLS"
_LABELS_VERSION = 1

MANIFEST_FORMAT = "omnifield-dataset-v1"

_OBJECT_PALETTE = np.array(
    [
        [0.85, 0.30, 0.25],
        [0.25, 0.55, 0.85],
        [0.30, 0.75, 0.35],
        [0.85, 0.70, 0.25],
        [0.65, 0.35, 0.80],
        [0.25, 0.75, 0.75],
        [0.85, 0.45, 0.65],
        [0.55, 0.55, 0.30],
    ]
)


@dataclass
class HierSceneSpec:
    """Everything needed to reproduce a scene and its simulated mask sets."""

    n_objects: int = 3
    parts_per_object: int = 3
    subparts_per_part: int = 2
    shapes: tuple[str, ...] = ("box", "sphere", "cylinder")
    points_per_part: int = 700
    seed: int = 0
    n_views: int = 12
    image_size: int = 96
    # mask simulation
    level_probs: tuple[float, float, float] = (0.25, 0.40, 0.35)  # object, part, subpart
    dropout: float = 0.10
    jitter_px: int = 1
    min_mask_pixels: int = 12
    # geometry / rendering
    arena_radius: float = 0.72
    object_radius: float = 0.34
    camera_distance: float = 3.1
    splat_radius: float = 1.6

    def __post_init__(self):
        if min(self.n_objects, self.parts_per_object, self.subparts_per_part, self.points_per_part, self.n_views) < 1:
            raise ValueError("counts must be at least 1")
        if abs(sum(self.level_probs) - 1.0) > 1e-9:
            raise ValueError("level probabilities must sum to 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_file(self, path):
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad spec line: {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"unknown scene spec key: {key}")
            kwargs[key] = _parse_field(known[key].type, val)
        return cls(**kwargs)


def _parse_field(ftype, val: str):
    if "tuple" in str(ftype):
        items = [s.strip() for s in val.split(",") if s.strip()]
        if all(_is_float(s) for s in items):
            return tuple(float(s) for s in items)
        return tuple(items)
    if "int" in str(ftype):
        return int(val)
    if "float" in str(ftype):
        return float(val)
    return val


def _is_float(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


@dataclass
class SynthScene:
    """Generated scene: surface geometry plus per-point hierarchy labels."""

    spec: HierSceneSpec
    geometry: SurfaceField           # feature_dim 0; carries points + colors
    labels: np.ndarray               # (N, 3) int32: object, part, subpart global ids
    cameras: list[Camera]

    @property
    def points(self):
        return self.geometry.points

    @property
    def colors(self):
        return self.geometry.colors

    @property
    def n_parts(self):
        return self.spec.n_objects * self.spec.parts_per_object

    @property
    def n_subparts(self):
        return self.n_parts * self.spec.subparts_per_part


# --- primitive surface sampling -------------------------------------------------

def _sample_sphere(rng, n, radius):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * radius


def _sample_box(rng, n, half):
    areas = np.array([half[1] * half[2], half[1] * half[2], half[0] * half[2],
                      half[0] * half[2], half[0] * half[1], half[0] * half[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1, 1, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for a in range(3):
        sel = axis == a
        others = [b for b in range(3) if b != a]
        pts[sel, a] = sign[sel] * half[a]
        pts[sel, others[0]] = uv[sel, 0] * half[others[0]]
        pts[sel, others[1]] = uv[sel, 1] * half[others[1]]
    return pts


def _sample_cylinder(rng, n, radius, half_h):
    lateral = 2 * np.pi * radius * 2 * half_h
    cap = np.pi * radius ** 2
    p = np.array([lateral, cap, cap])
    which = rng.choice(3, size=n, p=p / p.sum())
    pts = np.empty((n, 3))
    ang = rng.uniform(-np.pi, np.pi, size=n)
    lat = which == 0
    pts[lat, 0] = radius * np.cos(ang[lat])
    pts[lat, 1] = radius * np.sin(ang[lat])
    pts[lat, 2] = rng.uniform(-half_h, half_h, size=lat.sum())
    for w, z in ((1, half_h), (2, -half_h)):
        sel = which == w
        r = radius * np.sqrt(rng.uniform(0, 1, size=sel.sum()))
        pts[sel, 0] = r * np.cos(ang[sel])
        pts[sel, 1] = r * np.sin(ang[sel])
        pts[sel, 2] = z
    return pts


def _place_centers(rng, n, radius, min_sep, *, tries=200):
    """Rejection-sample n centers in a disk-ish volume with pairwise separation."""
    centers = []
    for _ in range(n):
        for attempt in range(tries):
            c = np.array([
                rng.uniform(-radius, radius),
                rng.uniform(-radius, radius),
                rng.uniform(-radius * 0.4, radius * 0.4),
            ])
            if all(np.linalg.norm(c - o) >= min_sep for o in centers):
                centers.append(c)
                break
        else:
            raise RuntimeError("primitive placement failed after bounded retries")
    return centers


def generate_scene(spec: HierSceneSpec) -> SynthScene:
    """Deterministic scene construction from the spec's seed."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 17]))
    obj_centers = _place_centers(rng, spec.n_objects, spec.arena_radius, 2.1 * spec.object_radius)

    pts_all, col_all, lab_all = [], [], []
    for oi, oc in enumerate(obj_centers):
        part_sep = spec.object_radius * 0.95
        part_centers = _place_centers(rng, spec.parts_per_object, spec.object_radius * 0.62, part_sep * 0.62)
        base_color = _OBJECT_PALETTE[oi % len(_OBJECT_PALETTE)]
        for pi, pc in enumerate(part_centers):
            gid_part = oi * spec.parts_per_object + pi
            shape = spec.shapes[(oi + pi) % len(spec.shapes)]
            size = rng.uniform(0.11, 0.16)
            n = spec.points_per_part
            if shape == "sphere":
                local = _sample_sphere(rng, n, size)
            elif shape == "box":
                local = _sample_box(rng, n, np.array([size, size * rng.uniform(0.7, 1.3), size * rng.uniform(0.7, 1.3)]))
            elif shape == "cylinder":
                local = _sample_cylinder(rng, n, size * 0.8, size * 1.2)
            else:
                raise ValueError(f"unknown shape {shape!r}")
            world = local + oc + pc
            # subparts = angular sectors in the part frame
            az = np.arctan2(local[:, 1], local[:, 0])
            sid = np.minimum(
                ((az + np.pi) / (2 * np.pi) * spec.subparts_per_part).astype(np.int64),
                spec.subparts_per_part - 1,
            )
            gid_sub = gid_part * spec.subparts_per_part + sid
            shade = 0.72 + 0.28 * (pi + 1) / spec.parts_per_object
            col = np.clip(base_color * shade + 0.05 * (sid[:, None] / max(spec.subparts_per_part - 1, 1) - 0.5), 0.02, 0.98)
            pts_all.append(world)
            col_all.append(col)
            lab = np.empty((n, 3), dtype=np.int32)
            lab[:, 0] = oi
            lab[:, 1] = gid_part
            lab[:, 2] = gid_sub
            lab_all.append(lab)

    points = np.concatenate(pts_all)
    colors = np.concatenate(col_all)
    labels = np.concatenate(lab_all)
    geometry = SurfaceField(points, np.zeros((len(points), 0)), colors, adjacency=[], knn=0)

    size = spec.image_size
    focal = 0.9 * size
    cameras = []
    for k in range(spec.n_views):
        ang = 2 * np.pi * k / spec.n_views
        elev = 0.45 if k % 2 == 0 else 0.8
        eye = np.array([
            spec.camera_distance * np.cos(ang) * np.cos(elev),
            spec.camera_distance * np.sin(ang) * np.cos(elev),
            spec.camera_distance * np.sin(elev),
        ])
        cameras.append(look_at_camera(eye, [0, 0, 0], [0, 0, 1], focal, focal, size / 2, size / 2, size, size))
    return SynthScene(spec=spec, geometry=geometry, labels=labels, cameras=cameras)


# --- per-view ground truth and mask simulation -----------------------------------

def view_label_maps(scene: SynthScene, view: int, hit_map=None):
    """(object, part, subpart) id maps for one view; -1 where nothing is hit."""
    if hit_map is None:
        hit_map = render_surface(scene.geometry, scene.cameras[view], scene.spec.splat_radius).hit_index_map
    maps = np.full((3,) + hit_map.shape, -1, dtype=np.int32)
    hit = hit_map >= 0
    for c in range(3):
        maps[c][hit] = scene.labels[hit_map[hit], c]
    return maps[0], maps[1], maps[2]


def _jitter_mask(mask, amp):
    if amp == 0:
        return mask
    structure = ndimage.generate_binary_structure(2, 2)
    if amp > 0:
        return ndimage.binary_dilation(mask, structure, iterations=amp)
    return ndimage.binary_erosion(mask, structure, iterations=-amp)


def simulate_masks(scene: SynthScene, view: int, *, hit_map=None):
    """Simulated 2D segmenter output for one view.

    Returns (MaskSet, provenance, level_choice) where provenance holds one
    text record per emitted mask and level_choice maps object id -> drawn
    granularity (0 object, 1 part, 2 subpart). Deterministic per (seed, view).
    """
    spec = scene.spec
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 101, view]))
    obj_map, part_map, sub_map = view_label_maps(scene, view, hit_map)

    masks, provenance = [], []
    level_choice: dict[int, int] = {}
    level_names = ("object", "part", "subpart")
    for oi in range(spec.n_objects):
        region = obj_map == oi
        if region.sum() < spec.min_mask_pixels:
            continue
        level = int(rng.choice(3, p=spec.level_probs))
        level_choice[oi] = level
        nodes: list[tuple[int, int, np.ndarray]] = [(0, oi, region)]
        if level >= 1:
            for gid in np.unique(part_map[region]):
                if gid >= 0:
                    nodes.append((1, int(gid), part_map == gid))
        if level >= 2:
            for gid in np.unique(sub_map[region]):
                if gid >= 0:
                    nodes.append((2, int(gid), sub_map == gid))
        for lvl, gid, node_mask in nodes:
            if node_mask.sum() < spec.min_mask_pixels:
                continue
            if rng.random() < spec.dropout:
                continue
            amp = int(rng.integers(-spec.jitter_px, spec.jitter_px + 1)) if spec.jitter_px > 0 else 0
            jittered = _jitter_mask(node_mask, amp)
            if jittered.sum() < spec.min_mask_pixels:
                continue
            masks.append(jittered)
            provenance.append(f"level={level_names[lvl]} node={gid} jitter={amp}")
    if not masks:
        # degenerate view: fall back to full visible footprint so downstream
        # code always has at least one mask
        masks = [obj_map >= 0]
        provenance = ["level=footprint node=-1 jitter=0"]
    return MaskSet.from_list(masks), provenance, level_choice


def build_hierrep(mask_set: MaskSet) -> HierRep:
    part = build_partition(mask_set)
    return HierRep(part, build_correlation(part))


# --- benchmark queries -------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkQuery:
    view: int
    x: int
    y: int
    l1_index: int   # index into the view's gtmasks container
    l2_index: int
    object_id: int
    part_id: int


def make_benchmark_queries(scene: SynthScene, per_view: int, *, min_area: int = 40):
    """Query pixels with part-level and object-level ground-truth masks.

    Objects are cycled largest-visible-area first so queries cover diverse
    scales; a query is only kept when the part region is properly contained
    in the object region and both clear the minimum area.
    """
    rng = np.random.default_rng(np.random.SeedSequence([scene.spec.seed, 202]))
    queries: list[BenchmarkQuery] = []
    gt_masks: dict[int, list[np.ndarray]] = {}
    for view in range(scene.spec.n_views):
        obj_map, part_map, _ = view_label_maps(scene, view)
        areas = [(obj_map == oi).sum() for oi in range(scene.spec.n_objects)]
        order = np.argsort(areas)[::-1]
        eligible: list[tuple[int, list[int]]] = []
        for oi in order:
            if areas[oi] < 2 * min_area:
                continue
            part_ids = [
                int(g)
                for g in np.unique(part_map[obj_map == oi])
                if g >= 0
                and (part_map == g).sum() >= min_area
                and (part_map == g).sum() < areas[oi]
            ]
            if part_ids:
                eligible.append((int(oi), part_ids))
        if not eligible:
            continue
        view_masks: list[np.ndarray] = []
        for q in range(per_view):
            oi, part_ids = eligible[q % len(eligible)]
            gid = int(rng.choice(part_ids))
            l1 = part_map == gid
            l2 = obj_map == oi
            assert l1.sum() < l2.sum() and not (l1 & ~l2).any()
            ys, xs = np.nonzero(l1)
            pick = int(rng.integers(len(xs)))
            view_masks.extend([l1, l2])
            queries.append(
                BenchmarkQuery(
                    view=view, x=int(xs[pick]), y=int(ys[pick]),
                    l1_index=len(view_masks) - 2, l2_index=len(view_masks) - 1,
                    object_id=oi, part_id=gid,
                )
            )
        gt_masks[view] = view_masks
    return queries, gt_masks


# --- binary mask stacks -------------------------------------------------------------

def save_mask_stack(masks: np.ndarray, path):
    masks = np.asarray(masks, dtype=bool)
    n, h, w = masks.shape
    header = struct.pack("<III", h, w, n)
    payload = np.packbits(masks.reshape(n, -1), axis=1, bitorder="little").tobytes()
    write_container(path, _MASKS_MAGIC, _MASKS_VERSION, header, payload)


def load_mask_stack(path) -> np.ndarray:
    header, payload = read_container(path, _MASKS_MAGIC, _MASKS_VERSION)
    h, w, n = struct.unpack("<III", header)
    row = (h * w + 7) // 8
    bits = np.frombuffer(payload, dtype=np.uint8).reshape(n, row)
    return np.unpackbits(bits, axis=1, count=h * w, bitorder="little").astype(bool).reshape(n, h, w)


# --- dataset export / load -----------------------------------------------------------

def export_dataset(scene: SynthScene, out_dir, *, queries_per_view: int = 2) -> dict:
    """Write the documented dataset layout; returns the manifest as a dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = scene.spec

    header = struct.pack("<I", len(scene.points))
    payload = scene.points.astype("<f4").tobytes() + scene.colors.astype("<f4").tobytes()
    write_container(out / "points", _POINTS_MAGIC, _POINTS_VERSION, header, payload)
    write_container(
        out / "labels", _LABELS_MAGIC, _LABELS_VERSION,
        struct.pack("<I", len(scene.labels)), scene.labels.astype("<i4").tobytes(),
    )

    cam_lines = []
    for k, cam in enumerate(scene.cameras):
        vals = [cam.fx, cam.fy, cam.cx, cam.cy] + list(cam.rotation.ravel()) + list(cam.translation)
        cam_lines.append(f"{k} {cam.width} {cam.height} " + " ".join(f"{v:.17g}" for v in vals))
    (out / "cameras").write_text("\n".join(cam_lines) + "\n")

    queries, gt_masks = make_benchmark_queries(scene, queries_per_view)
    q_lines = [f"{q.view} {q.x} {q.y} {q.l1_index} {q.l2_index} {q.object_id} {q.part_id}" for q in queries]
    (out / "queries").write_text("\n".join(q_lines) + ("\n" if q_lines else ""))

    for view in range(spec.n_views):
        vdir = out / "views" / str(view)
        vdir.mkdir(parents=True, exist_ok=True)
        mask_set, provenance, _ = simulate_masks(scene, view)
        save_mask_stack(mask_set.masks, vdir / "masks")
        (vdir / "masks.index").write_text("\n".join(provenance) + "\n")
        save_hierrep(build_hierrep(mask_set), vdir / "hierrep",
                     source_image=f"view {view}", mask_provenance=provenance)
        if view in gt_masks and gt_masks[view]:
            save_mask_stack(np.stack(gt_masks[view]), vdir / "gtmasks")

    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": spec.seed,
        "n_views": spec.n_views,
        "image_size": spec.image_size,
        "n_points": len(scene.points),
        "n_objects": spec.n_objects,
        "parts_per_object": spec.parts_per_object,
        "subparts_per_part": spec.subparts_per_part,
        "splat_radius": spec.splat_radius,
        "n_queries": len(queries),
    }
    (out / "manifest").write_text(
        "\n".join(f"{k}: {manifest[k]}" for k in manifest) + "\n"
    )
    return manifest


class SceneDataset:
    """Loader over an exported dataset directory with per-view caches."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest under {self.root}")
        self.manifest: dict = {}
        for line in manifest_path.read_text().splitlines():
            key, val = line.split(":", 1)
            val = val.strip()
            self.manifest[key.strip()] = val if key.strip() == "format" else _num(val)
        if self.manifest.get("format") != MANIFEST_FORMAT:
            raise ValueError(f"unsupported dataset format {self.manifest.get('format')!r}")

        header, payload = read_container(self.root / "points", _POINTS_MAGIC, _POINTS_VERSION)
        (n,) = struct.unpack("<I", header)
        floats = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        self.points = floats[: n * 3].reshape(n, 3)
        self.colors = floats[n * 3 :].reshape(n, 3)
        header, payload = read_container(self.root / "labels", _LABELS_MAGIC, _LABELS_VERSION)
        self.labels = np.frombuffer(payload, dtype="<i4").reshape(-1, 3).astype(np.int32)

        self.cameras: list[Camera] = []
        for line in (self.root / "cameras").read_text().splitlines():
            parts = line.split()
            w, h = int(parts[1]), int(parts[2])
            vals = [float(v) for v in parts[3:]]
            self.cameras.append(
                Camera(vals[0], vals[1], vals[2], vals[3], np.array(vals[4:13]).reshape(3, 3),
                       np.array(vals[13:16]), w, h)
            )

        self.queries: list[BenchmarkQuery] = []
        qpath = self.root / "queries"
        if qpath.exists():
            for line in qpath.read_text().splitlines():
                v, x, y, l1, l2, oid, pid = (int(s) for s in line.split())
                self.queries.append(BenchmarkQuery(v, x, y, l1, l2, oid, pid))

        self._geometry: SurfaceField | None = None
        self._views: dict[int, dict] = {}
        self._hierreps: dict[int, HierRep] = {}
        self._levels: dict[int, dict[int, HierLevels]] = {}

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    @property
    def splat_radius(self) -> float:
        return float(self.manifest.get("splat_radius", 1.6))

    def geometry(self) -> SurfaceField:
        if self._geometry is None:
            self._geometry = SurfaceField(
                self.points, np.zeros((len(self.points), 0)), self.colors, adjacency=[], knn=0
            )
        return self._geometry

    def bounds(self) -> np.ndarray:
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        pad = 0.05 * (hi - lo).max()
        return np.stack([lo - pad, hi + pad])

    def scene_diagonal(self) -> float:
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def _view(self, k: int) -> dict:
        if k not in self._views:
            view = render_surface(self.geometry(), self.cameras[k], self.splat_radius)
            self._views[k] = {
                "hit": view.hit_index_map,
                "rgb": view.color_map,
                "depth": view.depth_map,
            }
        return self._views[k]

    def hit_index_map(self, k: int) -> np.ndarray:
        return self._view(k)["hit"]

    def rgb_image(self, k: int) -> np.ndarray:
        return self._view(k)["rgb"]

    def depth_image(self, k: int) -> np.ndarray:
        return self._view(k)["depth"]

    def mask_set(self, k: int) -> MaskSet:
        return MaskSet(load_mask_stack(self.root / "views" / str(k) / "masks"))

    def gt_masks(self, k: int) -> np.ndarray:
        return load_mask_stack(self.root / "views" / str(k) / "gtmasks")

    def hierrep(self, k: int) -> HierRep:
        if k not in self._hierreps:
            self._hierreps[k] = load_hierrep(self.root / "views" / str(k) / "hierrep")
        return self._hierreps[k]

    def levels(self, k: int) -> dict[int, HierLevels]:
        if k not in self._levels:
            self._levels[k] = all_hierarchy_levels(self.hierrep(k))
        return self._levels[k]

    def label_maps(self, k: int):
        hit = self.hit_index_map(k)
        maps = np.full((3,) + hit.shape, -1, dtype=np.int32)
        sel = hit >= 0
        for c in range(3):
            maps[c][sel] = self.labels[hit[sel], c]
        return maps[0], maps[1], maps[2]


def _num(val: str):
    try:
        return int(val)
    except ValueError:
        try:
            return float(val)
        except ValueError:
            return val


def inconsistency_rate(level_choices: list[dict[int, int]]) -> float:
    """Fraction of objects whose drawn granularity differs across views."""
    by_obj: dict[int, set[int]] = {}
    for choice in level_choices:
        for oi, lvl in choice.items():
            by_obj.setdefault(oi, set()).add(lvl)
    if not by_obj:
        return 0.0
    return sum(1 for s in by_obj.values() if len(s) > 1) / len(by_obj)
