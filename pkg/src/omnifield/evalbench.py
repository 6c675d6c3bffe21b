"""Benchmarks and metrics for trained feature fields.

Hierarchical benchmark: a query pixel yields a cosine score map over its view;
the best achievable IoU against the part-level and object-level ground-truth
masks (threshold chosen optimally per mask) measures how well thresholding
the score map traverses the hierarchy.

Instance propagation: positive/negative pixel samples in a reference view
score every pixel of a target view through distance-weighted feature
similarity; the binarization threshold is fitted once on the reference view
and applied unchanged to targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .field import SurfaceField, render_surface
from .synthdata import SceneDataset

DEFAULT_NEG_WEIGHT = 0.15      # weight of the negative-sample similarity term
POSITIVE_PERCENTILE = 95.0     # robust stand-in for the max over positives


@dataclass
class ScoreMap:
    """Dense per-pixel similarity scores for one query."""

    scores: np.ndarray
    query_xy: tuple[int, int]
    view: int
    rule: str

    def __post_init__(self):
        if not np.isfinite(self.scores[np.isfinite(self.scores)]).all():
            raise ValueError("score map contains NaN")


@dataclass
class QueryResult:
    view: int
    x: int
    y: int
    iou_l1: float
    iou_l2: float
    threshold_l1: float
    threshold_l2: float


@dataclass
class BenchResult:
    per_query: list[QueryResult]
    miou_l1: float
    miou_l2: float
    miou_avg: float
    config: dict = dc_field(default_factory=dict)

    def table(self) -> str:
        lines = [
            f"{'view':>4} {'x':>4} {'y':>4} {'IoU_L1':>8} {'IoU_L2':>8}",
        ]
        for q in self.per_query:
            lines.append(f"{q.view:>4} {q.x:>4} {q.y:>4} {q.iou_l1:8.4f} {q.iou_l2:8.4f}")
        lines.append(
            f"mIoU_L1 {self.miou_l1:.4f}  mIoU_L2 {self.miou_l2:.4f}  mIoU_Avg {self.miou_avg:.4f}"
        )
        return "\n".join(lines)

    def records(self) -> str:
        """One JSON record per line: queries first, then the aggregate."""
        lines = [
            json.dumps(
                {"view": q.view, "x": q.x, "y": q.y, "iou_l1": q.iou_l1, "iou_l2": q.iou_l2}
            )
            for q in self.per_query
        ]
        lines.append(
            json.dumps(
                {
                    "miou_l1": self.miou_l1,
                    "miou_l2": self.miou_l2,
                    "miou_avg": self.miou_avg,
                    **{k: v for k, v in self.config.items()},
                }
            )
        )
        return "\n".join(lines)


def unit_normalize(features: np.ndarray, axis: int = -1) -> np.ndarray:
    norms = np.linalg.norm(features, axis=axis, keepdims=True)
    return features / np.maximum(norms, 1e-12)


def cosine_score_map(feature_map: np.ndarray, query_xy, *, view: int = -1, renormalize: bool = True) -> ScoreMap:
    """score(p) = f(p) . f(q), optionally after renormalizing both to unit length."""
    x, y = int(query_xy[0]), int(query_xy[1])
    fmap = unit_normalize(feature_map) if renormalize else feature_map
    q = fmap[y, x]
    scores = fmap @ q
    return ScoreMap(scores=scores, query_xy=(x, y), view=view, rule="cosine")


def best_iou_threshold(scores: np.ndarray, gt_mask: np.ndarray):
    """Exact maximization of IoU(score > t, gt) over all achievable masks.

    Candidate masks are the prefixes of pixels sorted by descending score
    (split at unique values); ties in IoU resolve toward the larger threshold.
    Returns (threshold, iou); masks are produced by strict comparison
    scores > threshold.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    gt = np.asarray(gt_mask, dtype=bool).ravel()
    if s.shape != gt.shape:
        raise ValueError("score/mask shape mismatch")
    n_gt = int(gt.sum())
    order = np.argsort(-s, kind="stable")
    sorted_scores = s[order]
    hits = np.cumsum(gt[order])
    k = np.arange(1, len(s) + 1)
    iou = hits / (n_gt + k - hits)
    # prefix must end at a unique-value boundary to be realizable by a threshold
    boundary = np.ones(len(s), dtype=bool)
    boundary[:-1] = sorted_scores[:-1] != sorted_scores[1:]
    # the empty mask is realizable with t = max score; IoU 0 unless gt empty
    best_iou_val = 1.0 if n_gt == 0 else 0.0
    best_thr = float(sorted_scores[0]) if len(s) else np.inf
    idxs = np.flatnonzero(boundary)
    for i in idxs:
        val = iou[i]
        if val > best_iou_val + 1e-15:
            best_iou_val = float(val)
            best_thr = float(sorted_scores[i + 1]) if i + 1 < len(s) else -np.inf
    return best_thr, float(best_iou_val)


def apply_threshold(scores: np.ndarray, threshold: float) -> np.ndarray:
    return scores > threshold


def render_feature_view(field: SurfaceField, dataset: SceneDataset, view: int, *, renormalize=True):
    """(feature_map, valid) for a dataset view using the cached hit maps."""
    hit = dataset.hit_index_map(view)
    valid = hit >= 0
    fmap = np.zeros(hit.shape + (field.feature_dim,))
    fmap[valid] = field.features[hit[valid]]
    if renormalize:
        fmap[valid] = unit_normalize(fmap[valid])
    return fmap, valid


def hierarchical_benchmark(field: SurfaceField, dataset: SceneDataset, *, renormalize=True, config=None) -> BenchResult:
    """Best-threshold IoUs at both hierarchy levels for every dataset query."""
    results = []
    fmap_cache: dict[int, np.ndarray] = {}
    gt_cache: dict[int, np.ndarray] = {}
    for q in dataset.queries:
        if q.view not in fmap_cache:
            fmap_cache[q.view], _ = render_feature_view(field, dataset, q.view, renormalize=renormalize)
            gt_cache[q.view] = dataset.gt_masks(q.view)
        fmap = fmap_cache[q.view]
        sm = cosine_score_map(fmap, (q.x, q.y), view=q.view, renormalize=False)
        th1, iou1 = best_iou_threshold(sm.scores, gt_cache[q.view][q.l1_index])
        th2, iou2 = best_iou_threshold(sm.scores, gt_cache[q.view][q.l2_index])
        results.append(QueryResult(q.view, q.x, q.y, iou1, iou2, th1, th2))
    if not results:
        raise ValueError("dataset has no benchmark queries")
    l1 = float(np.mean([r.iou_l1 for r in results]))
    l2 = float(np.mean([r.iou_l2 for r in results]))
    return BenchResult(results, l1, l2, (l1 + l2) / 2, config=dict(config or {}))


# --- instance propagation ---------------------------------------------------------

@dataclass
class ViewGeometry:
    """Per-pixel 3D positions and unit features for one rendered view."""

    positions: np.ndarray   # (H, W, 3)
    features: np.ndarray    # (H, W, D) unit length where valid
    valid: np.ndarray       # (H, W)


def view_geometry(field: SurfaceField, dataset: SceneDataset, view: int) -> ViewGeometry:
    """Positions come from unprojecting the rendered depth, not from point ids."""
    cam = dataset.cameras[view]
    hit = dataset.hit_index_map(view)
    depth = dataset.depth_image(view)
    valid = hit >= 0
    h, w = hit.shape
    pixels = cam.all_pixels()
    pos = cam.unproject(pixels, depth.ravel()).reshape(h, w, 3)
    pos[~valid] = 0.0
    feats = np.zeros((h, w, field.feature_dim))
    feats[valid] = unit_normalize(field.features[hit[valid]])
    return ViewGeometry(positions=pos, features=feats, valid=valid)


def distance_weighted_sim(x1, f1, x2, f2, alpha: float):
    """exp(-alpha * ||x1 - x2||) * (1 + f1 . f2) for broadcastable inputs."""
    dist = np.linalg.norm(np.asarray(x1) - np.asarray(x2), axis=-1)
    dot = (np.asarray(f1) * np.asarray(f2)).sum(axis=-1)
    return np.exp(-alpha * dist) * (1.0 + dot)


def default_alpha(dataset: SceneDataset) -> float:
    """Distance falloff scaled to the scene: 4 / diagonal."""
    return 4.0 / dataset.scene_diagonal()


def propagation_scores(
    target: ViewGeometry,
    pos_xyz: np.ndarray,
    pos_feat: np.ndarray,
    neg_xyz: np.ndarray,
    neg_feat: np.ndarray,
    alpha: float,
    *,
    neg_weight: float = DEFAULT_NEG_WEIGHT,
    pos_percentile: float = POSITIVE_PERCENTILE,
) -> np.ndarray:
    """Score every valid target pixel; invalid pixels get -inf."""
    h, w = target.valid.shape
    scores = np.full((h, w), -np.inf)
    tv = target.valid
    txyz = target.positions[tv]
    tfeat = target.features[tv]

    def sims(sample_xyz, sample_feat):
        dist = np.linalg.norm(txyz[:, None, :] - sample_xyz[None, :, :], axis=-1)
        dot = tfeat @ sample_feat.T
        return np.exp(-alpha * dist) * (1.0 + dot)

    pos_term = np.percentile(sims(pos_xyz, pos_feat), pos_percentile, axis=1)
    neg_term = sims(neg_xyz, neg_feat).max(axis=1)
    scores[tv] = pos_term - neg_weight * neg_term
    return scores


@dataclass
class PropagationResult:
    threshold: float
    reference_iou: float
    reference_mask: np.ndarray
    target_masks: dict[int, np.ndarray]


def propagate_instance(
    field: SurfaceField,
    dataset: SceneDataset,
    reference_view: int,
    reference_mask: np.ndarray,
    target_views,
    *,
    alpha: float | None = None,
    neg_weight: float = DEFAULT_NEG_WEIGHT,
    n_pos: int = 192,
    n_neg: int = 192,
    seed: int = 0,
) -> PropagationResult:
    """Propagate a reference-view mask to target views.

    Positives sample the mask, negatives its valid complement; the threshold
    maximizes IoU against the reference mask on the reference view and is then
    kept constant for every target view.
    """
    rng = np.random.default_rng(seed)
    ref = view_geometry(field, dataset, reference_view)
    mask = np.asarray(reference_mask, dtype=bool)
    pos_pool = np.flatnonzero((mask & ref.valid).ravel())
    neg_pool = np.flatnonzero((~mask & ref.valid).ravel())
    if pos_pool.size == 0 or neg_pool.size == 0:
        raise ValueError("need nonempty positive and negative sample pools")
    pos_sel = rng.choice(pos_pool, size=min(n_pos, pos_pool.size), replace=False)
    neg_sel = rng.choice(neg_pool, size=min(n_neg, neg_pool.size), replace=False)

    flat_pos = ref.positions.reshape(-1, 3)
    flat_feat = ref.features.reshape(-1, ref.features.shape[-1])
    pos_xyz, pos_feat = flat_pos[pos_sel], flat_feat[pos_sel]
    neg_xyz, neg_feat = flat_pos[neg_sel], flat_feat[neg_sel]

    if alpha is None:
        alpha = default_alpha(dataset)
    ref_scores = propagation_scores(ref, pos_xyz, pos_feat, neg_xyz, neg_feat, alpha, neg_weight=neg_weight)
    finite = np.isfinite(ref_scores)
    thr, ref_iou = best_iou_threshold(ref_scores[finite], mask[finite])
    ref_mask_pred = np.zeros_like(mask)
    ref_mask_pred[finite] = ref_scores[finite] > thr

    targets = {}
    for tv in target_views:
        geo = ref if tv == reference_view else view_geometry(field, dataset, tv)
        sc = propagation_scores(geo, pos_xyz, pos_feat, neg_xyz, neg_feat, alpha, neg_weight=neg_weight)
        pred = np.zeros_like(mask)
        ok = np.isfinite(sc)
        pred[ok] = sc[ok] > thr
        targets[tv] = pred
    return PropagationResult(threshold=thr, reference_iou=ref_iou, reference_mask=ref_mask_pred, target_masks=targets)


def propagate_from_scribbles(
    field: SurfaceField,
    dataset: SceneDataset,
    reference_view: int,
    pos_pixels: np.ndarray,
    neg_pixels: np.ndarray,
    target_views,
    *,
    alpha: float | None = None,
    neg_weight: float = DEFAULT_NEG_WEIGHT,
    threshold_quantile: float = 10.0,
) -> PropagationResult:
    """Scribble-driven propagation: no mask to fit, so the threshold is the
    given percentile of the positive pixels' own reference scores."""
    ref = view_geometry(field, dataset, reference_view)
    if len(pos_pixels) == 0 or len(neg_pixels) == 0:
        raise ValueError("need nonempty positive and negative scribbles")
    if alpha is None:
        alpha = default_alpha(dataset)
    px, py = np.asarray(pos_pixels).T
    nx, ny = np.asarray(neg_pixels).T
    pos_xyz, pos_feat = ref.positions[py, px], ref.features[py, px]
    neg_xyz, neg_feat = ref.positions[ny, nx], ref.features[ny, nx]
    ref_scores = propagation_scores(ref, pos_xyz, pos_feat, neg_xyz, neg_feat, alpha, neg_weight=neg_weight)
    thr = float(np.percentile(ref_scores[py, px], threshold_quantile))
    result_masks = {}
    for tv in target_views:
        geo = ref if tv == reference_view else view_geometry(field, dataset, tv)
        sc = propagation_scores(geo, pos_xyz, pos_feat, neg_xyz, neg_feat, alpha, neg_weight=neg_weight)
        pred = np.zeros(sc.shape, dtype=bool)
        ok = np.isfinite(sc)
        pred[ok] = sc[ok] > thr
        result_masks[tv] = pred
    ref_pred = np.zeros(ref_scores.shape, dtype=bool)
    ok = np.isfinite(ref_scores)
    ref_pred[ok] = ref_scores[ok] > thr
    return PropagationResult(threshold=thr, reference_iou=float("nan"), reference_mask=ref_pred, target_masks=result_masks)


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    union = (a | b).sum()
    return float((a & b).sum() / union) if union else 1.0


def instance_benchmark(field: SurfaceField, dataset: SceneDataset, *, targets_per_query=3, seed=0, alpha=None):
    """Propagation protocol over the dataset queries' object-level masks."""
    rng = np.random.default_rng(seed)
    per_pair = []
    for qi, q in enumerate(dataset.queries):
        gt_obj = dataset.gt_masks(q.view)[q.l2_index]
        obj_maps = {}
        candidates = []
        for tv in range(dataset.n_views):
            if tv == q.view:
                continue
            om, _, _ = dataset.label_maps(tv)
            tgt = om == q.object_id
            if tgt.sum() >= 30:
                candidates.append(tv)
                obj_maps[tv] = tgt
        if not candidates:
            continue
        chosen = list(rng.choice(candidates, size=min(targets_per_query, len(candidates)), replace=False))
        prop = propagate_instance(field, dataset, q.view, gt_obj, chosen, seed=seed + qi, alpha=alpha)
        for tv in chosen:
            per_pair.append(mask_iou(prop.target_masks[tv], obj_maps[tv]))
    return float(np.mean(per_pair)) if per_pair else float("nan"), len(per_pair)


# --- ablations ---------------------------------------------------------------------

def ablation_sweep(dataset: SceneDataset, base_config, *, lam_values=None, dim_values=None, out_dir=None, quiet=True):
    """Train one field per setting (shared seed) and benchmark each.

    Exactly one of lam_values / dim_values must be given; returns a list of
    (setting, BenchResult) plus a text table.
    """
    from dataclasses import replace

    from .trainer import train_scene

    if (lam_values is None) == (dim_values is None):
        raise ValueError("specify exactly one of lam_values or dim_values")
    settings = [("lam", v) for v in lam_values] if lam_values is not None else [("feature_dim", v) for v in dim_values]
    results = []
    for key, val in settings:
        cfg = replace(base_config, **{key: val})
        fld, _ = train_scene(dataset, cfg, quiet=quiet)
        bench = hierarchical_benchmark(fld, dataset, config={key: val})
        results.append(((key, val), bench))

    name = settings[0][0]
    lines = [f"{name:>12} {'mIoU_L1':>9} {'mIoU_L2':>9} {'mIoU_Avg':>9}"]
    for (key, val), bench in results:
        lines.append(f"{val:>12} {bench.miou_l1:9.4f} {bench.miou_l2:9.4f} {bench.miou_avg:9.4f}")
    table = "\n".join(lines)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"ablation_{name}.txt").write_text(table + "\n")
        recs = "\n".join(b.records() for _, b in results)
        (out / f"ablation_{name}.jsonl").write_text(recs + "\n")
    return results, table


# --- image exports -------------------------------------------------------------------

def score_to_rgb(scores: np.ndarray) -> np.ndarray:
    """Diverging blue-white-red image of scores in [-1, 1]; -inf renders black."""
    s = np.clip(np.nan_to_num(scores, neginf=-1.0), -1.0, 1.0)
    t = (s + 1.0) / 2.0
    rgb = np.stack([t, 1.0 - np.abs(s), 1.0 - t], axis=-1)
    rgb[~np.isfinite(scores)] = 0.0
    return rgb


def tp_fp_fn_overlay(pred: np.ndarray, gt: np.ndarray, base: np.ndarray | None = None) -> np.ndarray:
    """Review overlay: true positives yellow, false positives red, false negatives green."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    h, w = pred.shape
    img = (0.35 * base.copy()) if base is not None else np.zeros((h, w, 3))
    img[pred & gt] = [1.0, 0.9, 0.1]
    img[pred & ~gt] = [0.9, 0.15, 0.1]
    img[~pred & gt] = [0.1, 0.8, 0.2]
    return img


def save_png(rgb01: np.ndarray, path) -> None:
    from PIL import Image

    arr = (np.clip(rgb01, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
