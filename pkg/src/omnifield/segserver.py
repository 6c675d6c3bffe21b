"""Interactive segmentation service over a trained feature field.

Sessions hold the interactive state (clicked anchors, threshold, saved
segments) while the field checkpoint and per-view renders are immutable
shared snapshots. Clicking a pixel resolves it to a 3D point whose feature
becomes an anchor; the per-pixel cosine similarity to the best anchor forms a
score map, and moving the binarization threshold traverses the hierarchy the
field has learned. Region growing over the point cloud's k-NN graph turns
selections into discrete 3D components.
"""

from __future__ import annotations

import io
import threading
import uuid
from collections import deque
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .evalbench import score_to_rgb, unit_normalize
from .field import SurfaceField, load_field, pca_colorize, save_field
from .synthdata import SceneDataset

# --- pure algorithms -----------------------------------------------------------


def region_grow(field: SurfaceField, seed_ids, threshold: float) -> np.ndarray:
    """Breadth-first growth over the k-NN graph.

    Neighbor j joins from i when cos(f_i, f_j) >= threshold. The visit order
    is deterministic (ascending point id among the frontier); the resulting
    component is the connected closure, so it does not depend on seed order.
    Returns the sorted member ids.
    """
    feats = unit_normalize(field.features)
    seeds = sorted(int(s) for s in set(np.asarray(seed_ids, dtype=np.int64).tolist()))
    for s in seeds:
        if not 0 <= s < field.n_points:
            raise IndexError(f"seed {s} out of range")
    visited = np.zeros(field.n_points, dtype=bool)
    visited[seeds] = True
    queue = deque(seeds)
    while queue:
        i = queue.popleft()
        nbrs = field.adjacency[i]
        accept = nbrs[(feats[nbrs] @ feats[i]) >= threshold]
        fresh = accept[~visited[accept]]
        visited[fresh] = True
        queue.extend(int(j) for j in fresh)
    return np.flatnonzero(visited)


def auto_discretize(field: SurfaceField, threshold: float):
    """Exhaustive region growing from every unvisited point.

    Returns (labels, component_count). Components are clusters of mutual
    feature similarity; nothing guarantees they all sit at the same hierarchy
    granularity (clusters have no notion of level without a click).
    """
    labels = np.full(field.n_points, -1, dtype=np.int64)
    feats = unit_normalize(field.features)
    next_label = 0
    for start in range(field.n_points):
        if labels[start] >= 0:
            continue
        labels[start] = next_label
        queue = deque([start])
        while queue:
            i = queue.popleft()
            nbrs = field.adjacency[i]
            accept = nbrs[(feats[nbrs] @ feats[i]) >= threshold]
            fresh = accept[labels[accept] < 0]
            labels[fresh] = next_label
            queue.extend(int(j) for j in fresh)
        next_label += 1
    return labels, next_label


# --- scene bundle and sessions ----------------------------------------------------


@dataclass
class SceneBundle:
    """Immutable pairing of a dataset and a trained field snapshot."""

    scene_id: str
    dataset: SceneDataset
    field: SurfaceField

    def __post_init__(self):
        self._feature_views: dict[int, np.ndarray] = {}

    def feature_view(self, view: int) -> np.ndarray:
        if view not in self._feature_views:
            hit = self.dataset.hit_index_map(view)
            fmap = np.zeros(hit.shape + (self.field.feature_dim,))
            valid = hit >= 0
            fmap[valid] = unit_normalize(self.field.features[hit[valid]])
            self._feature_views[view] = fmap
        return self._feature_views[view]


@dataclass
class Session:
    session_id: str
    scene: SceneBundle
    view: int = 0
    threshold: float = 0.5
    anchors: list[dict] = dc_field(default_factory=list)
    component: np.ndarray | None = None
    segments: dict[str, np.ndarray] = dc_field(default_factory=dict)
    images: dict[str, bytes] = dc_field(default_factory=dict)
    lock: threading.Lock = dc_field(default_factory=threading.Lock)

    def score_map(self, view: int | None = None) -> np.ndarray:
        """Max over anchors of per-pixel cosine similarity; -inf off-surface."""
        v = self.view if view is None else view
        fmap = self.scene.feature_view(v)
        valid = self.scene.dataset.hit_index_map(v) >= 0
        scores = np.full(valid.shape, -np.inf)
        if not self.anchors:
            return scores
        anchor_feats = np.stack([a["feature"] for a in self.anchors])
        scores[valid] = (fmap[valid] @ anchor_feats.T).max(axis=1)
        return scores

    def mask(self, view: int | None = None) -> np.ndarray:
        scores = self.score_map(view)
        out = np.zeros(scores.shape, dtype=bool)
        finite = np.isfinite(scores)
        out[finite] = scores[finite] > self.threshold
        return out

    def click(self, view: int, x: int, y: int) -> int:
        hit = self.scene.dataset.hit_index_map(view)
        if not (0 <= x < hit.shape[1] and 0 <= y < hit.shape[0]):
            raise NoSurfaceError(f"pixel ({x}, {y}) outside the image")
        pid = int(hit[y, x])
        if pid < 0:
            raise NoSurfaceError(f"no surface under pixel ({x}, {y})")
        feature = unit_normalize(self.scene.field.features[pid])
        self.anchors.append({"point_id": pid, "feature": feature, "view": view, "x": x, "y": y})
        self.view = view
        return pid

    def selection_points(self) -> np.ndarray:
        """Current selection as 3D point ids: grown component if present,
        otherwise field points whose features clear the threshold for any anchor."""
        if self.component is not None:
            return self.component
        if not self.anchors:
            return np.empty(0, dtype=np.int64)
        feats = unit_normalize(self.scene.field.features)
        anchor_feats = np.stack([a["feature"] for a in self.anchors])
        scores = (feats @ anchor_feats.T).max(axis=1)
        return np.flatnonzero(scores > self.threshold)


class NoSurfaceError(ValueError):
    pass


class UnknownSessionError(KeyError):
    pass


def export_segments(session: Session, out_dir) -> list[dict]:
    """Write each saved segment as an id list plus a point-cloud checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    field = session.scene.field
    manifest = []
    for name, ids in sorted(session.segments.items()):
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in name)
        (out / f"{safe}.ids.txt").write_text("\n".join(str(int(i)) for i in ids) + "\n")
        sub = SurfaceField(
            field.points[ids], field.features[ids], field.colors[ids],
            adjacency=[np.empty(0, dtype=np.int32)] * len(ids), knn=0,
        )
        save_field(sub, out / f"{safe}.field")
        manifest.append({"name": name, "size": int(len(ids)), "stem": safe})
    return manifest


# --- HTTP app ----------------------------------------------------------------------


def encode_png(rgb01: np.ndarray) -> bytes:
    from PIL import Image

    arr = (np.clip(rgb01, 0.0, 1.0) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def depth_to_rgb(depth: np.ndarray) -> np.ndarray:
    d = depth.copy()
    valid = d > 0
    if valid.any():
        lo, hi = d[valid].min(), d[valid].max()
        span = hi - lo if hi > lo else 1.0
        t = np.zeros_like(d)
        t[valid] = 1.0 - (d[valid] - lo) / span
    else:
        t = np.zeros_like(d)
    return np.stack([t, t, t], axis=-1)


def label_to_rgb(labels: np.ndarray) -> np.ndarray:
    """Deterministic distinct-ish colors per label; -1 renders black."""
    h, w = labels.shape
    rgb = np.zeros((h, w, 3))
    valid = labels >= 0
    lv = labels[valid].astype(np.float64)
    rgb[valid, 0] = (np.sin(lv * 12.9898) * 0.5 + 0.5) * 0.9 + 0.1
    rgb[valid, 1] = (np.sin(lv * 78.233 + 1.0) * 0.5 + 0.5) * 0.9 + 0.1
    rgb[valid, 2] = (np.sin(lv * 37.719 + 2.0) * 0.5 + 0.5) * 0.9 + 0.1
    return rgb


def mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    m = mask.astype(np.float64)
    return np.stack([m, m, m], axis=-1)


def create_app(scenes: dict[str, tuple] | None = None):
    """FastAPI application.

    scenes maps scene id -> (dataset_dir, checkpoint_path) or a prebuilt
    SceneBundle. Bundles load lazily on first use and are shared, read-only,
    across sessions.
    """
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, Response
    from pydantic import BaseModel

    app = FastAPI(title="omnifield segmentation service")
    app.state.scene_sources = dict(scenes or {})
    app.state.bundles = {}
    app.state.sessions = {}
    app.state.registry_lock = threading.Lock()

    class ApiError(Exception):
        def __init__(self, status: int, code: str, message: str):
            self.status = status
            self.code = code
            self.message = message

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    def get_bundle(scene_id: str) -> SceneBundle:
        with app.state.registry_lock:
            if scene_id in app.state.bundles:
                return app.state.bundles[scene_id]
            if scene_id not in app.state.scene_sources:
                raise ApiError(404, "unknown-scene", f"scene {scene_id!r} not found")
            src = app.state.scene_sources[scene_id]
            if isinstance(src, SceneBundle):
                bundle = src
            else:
                data_dir, ckpt = src
                fld = load_field(ckpt)
                if not isinstance(fld, SurfaceField):
                    raise ApiError(400, "bad-backend", "interactive service expects a surface-backend checkpoint")
                bundle = SceneBundle(scene_id, SceneDataset(data_dir), fld)
            app.state.bundles[scene_id] = bundle
            return bundle

    def get_session(session_id: str) -> Session:
        try:
            return app.state.sessions[session_id]
        except KeyError:
            raise ApiError(404, "unknown-session", f"session {session_id!r} not found") from None

    def stash_image(session: Session, kind: str, rgb: np.ndarray) -> str:
        name = f"{kind}_{len(session.images)}.png"
        session.images[name] = encode_png(rgb)
        return f"/session/{session.session_id}/image/{name}"

    class SessionRequest(BaseModel):
        scene: str

    class ClickRequest(BaseModel):
        view: int
        x: int
        y: int

    class ThresholdRequest(BaseModel):
        t: float

    class SelectRequest(BaseModel):
        clicks: list[ClickRequest]

    class GrowRequest(BaseModel):
        threshold: float

    class SegmentRequest(BaseModel):
        name: str

    @app.get("/scenes")
    def list_scenes():
        return {"scenes": sorted(app.state.scene_sources)}

    @app.post("/session")
    def open_session(req: SessionRequest):
        bundle = get_bundle(req.scene)
        sid = uuid.uuid4().hex[:12]
        with app.state.registry_lock:
            app.state.sessions[sid] = Session(session_id=sid, scene=bundle)
        return {"session_id": sid, "views": bundle.dataset.n_views,
                "width": bundle.dataset.cameras[0].width, "height": bundle.dataset.cameras[0].height}

    @app.get("/session/{sid}/render")
    def render(sid: str, view: int = 0, layer: str = "rgb"):
        session = get_session(sid)
        ds = session.scene.dataset
        if not 0 <= view < ds.n_views:
            raise ApiError(400, "bad-view", f"view {view} out of range")
        if layer == "rgb":
            rgb = ds.rgb_image(view)
        elif layer == "feat":
            rgb = pca_colorize(session.scene.feature_view(view), ds.hit_index_map(view) >= 0)
        elif layer == "depth":
            rgb = depth_to_rgb(ds.depth_image(view))
        else:
            raise ApiError(400, "bad-layer", f"unknown layer {layer!r}")
        return Response(content=encode_png(rgb), media_type="image/png")

    @app.post("/session/{sid}/click")
    def click(sid: str, req: ClickRequest):
        session = get_session(sid)
        with session.lock:
            try:
                pid = session.click(req.view, req.x, req.y)
            except NoSurfaceError as exc:
                raise ApiError(422, "no-surface", str(exc)) from None
            session.component = None
            scores = session.score_map(req.view)
            url = stash_image(session, "score", score_to_rgb(scores))
        return {"anchor_id": pid, "anchor_count": len(session.anchors), "score_map_url": url}

    @app.post("/session/{sid}/threshold")
    def set_threshold(sid: str, req: ThresholdRequest):
        session = get_session(sid)
        if not -1.0 <= req.t <= 1.0:
            raise ApiError(400, "bad-threshold", "threshold must lie in [-1, 1]")
        with session.lock:
            session.threshold = float(req.t)
            mask = session.mask()
            url = stash_image(session, "mask", mask_to_rgb(mask))
        return {"mask_url": url, "selected_pixels": int(mask.sum())}

    @app.post("/session/{sid}/select")
    def multi_select(sid: str, req: SelectRequest):
        session = get_session(sid)
        with session.lock:
            session.anchors.clear()
            session.component = None
            for c in req.clicks:
                try:
                    session.click(c.view, c.x, c.y)
                except NoSurfaceError as exc:
                    raise ApiError(422, "no-surface", str(exc)) from None
            mask = session.mask()
            url = stash_image(session, "mask", mask_to_rgb(mask))
        return {"anchor_count": len(session.anchors), "mask_url": url,
                "selected_pixels": int(mask.sum())}

    @app.post("/session/{sid}/grow")
    def grow(sid: str, req: GrowRequest):
        session = get_session(sid)
        with session.lock:
            if not session.anchors:
                raise ApiError(409, "no-anchors", "click at least once before growing")
            seeds = [a["point_id"] for a in session.anchors]
            component = region_grow(session.scene.field, seeds, req.threshold)
            session.component = component
            hit = session.scene.dataset.hit_index_map(session.view)
            member = np.zeros(session.scene.field.n_points + 1, dtype=bool)
            member[component] = True
            mask = np.zeros(hit.shape, dtype=bool)
            valid = hit >= 0
            mask[valid] = member[hit[valid]]
            url = stash_image(session, "grow", mask_to_rgb(mask))
        return {"component_size": int(len(component)), "mask_url": url}

    @app.post("/session/{sid}/discretize")
    def discretize(sid: str, req: GrowRequest):
        session = get_session(sid)
        with session.lock:
            labels, count = auto_discretize(session.scene.field, req.threshold)
            hit = session.scene.dataset.hit_index_map(session.view)
            label_map = np.full(hit.shape, -1, dtype=np.int64)
            valid = hit >= 0
            label_map[valid] = labels[hit[valid]]
            url = stash_image(session, "labels", label_to_rgb(label_map))
        return {
            "component_count": int(count),
            "label_map_url": url,
            "note": "components are similarity clusters; they may mix hierarchy levels",
        }

    @app.post("/session/{sid}/segments")
    def save_segment(sid: str, req: SegmentRequest):
        session = get_session(sid)
        with session.lock:
            ids = session.selection_points()
            if ids.size == 0:
                raise ApiError(409, "empty-selection", "nothing selected to save")
            session.segments[req.name] = ids
        return {"name": req.name, "size": int(ids.size)}

    @app.get("/session/{sid}/segments")
    def list_segments(sid: str):
        session = get_session(sid)
        return {"segments": [{"name": n, "size": int(v.size)} for n, v in sorted(session.segments.items())]}

    @app.get("/session/{sid}/image/{name}")
    def image(sid: str, name: str):
        session = get_session(sid)
        if name not in session.images:
            raise ApiError(404, "unknown-image", f"image {name!r} not found")
        return Response(content=session.images[name], media_type="image/png")

    return app


def serve(scenes: dict, host: str = "127.0.0.1", port: int = 8080):
    import uvicorn

    uvicorn.run(create_app(scenes), host=host, port=port, log_level="warning")
