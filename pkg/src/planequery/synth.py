"""Synthetic two-view planar scenes.

A scene is a box room (floor, ceiling, 2-4 walls) with up to two finite
interior rectangles, seen by two cameras.  Ground truth is rendered by casting
one ray per pixel and keeping the front-most plane hit.

World frame: ``y`` up, floor at ``y = 0``.  Camera frame: ``x`` right,
``y`` down, ``z`` forward.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import RngStream
from .errors import GenerationError, TensorFileError
from .geometry import (
    CameraIntrinsics,
    PoseSE3,
    plane_transform,
    relative_pose,
    rotmat_to_quat,
    se3_inverse,
)
from .tensorfile import load_tensors, save_tensors

SPLITS = {"train": 0, "test": 1}


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    max_planes: int = 6
    room_half_extent: tuple[float, float] = (1.5, 3.0)
    room_height: tuple[float, float] = (2.5, 3.2)
    max_rotation_deg: float = 30.0
    max_translation: float = 1.0
    overlap_range: tuple[float, float] = (0.15, 0.5)
    width: int = 32
    height: int = 24
    focal: float = 20.0
    noise_sigma: float = 0.05
    min_plane_pixels: int = 12
    max_attempts: int = 1000

    def __post_init__(self):
        lo, hi = self.overlap_range
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("overlap range must satisfy 0 <= lo < hi <= 1")
        if self.room_half_extent[0] >= self.room_half_extent[1] or self.room_height[0] >= self.room_height[1]:
            raise ValueError("room size ranges are degenerate")
        if self.max_planes < 4:
            raise ValueError("a room needs at least floor, ceiling and two walls")

    @property
    def camera(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width // 2, self.height // 2, self.width, self.height)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "GenConfig":
        d = dict(d)
        for k in ("room_half_extent", "room_height", "overlap_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class WorldPlane:
    """``normal . X = offset`` in world coordinates, limited to a rectangle or box."""

    normal: np.ndarray
    offset: float
    instance: int
    kind: str  # "room" or "panel"
    # room planes: axis-aligned box bounds; panels: centre, two axes, half sizes
    box_min: np.ndarray | None = None
    box_max: np.ndarray | None = None
    center: np.ndarray | None = None
    axes: np.ndarray | None = None
    half: np.ndarray | None = None

    def contains(self, X, tol=1e-9) -> np.ndarray:
        if self.kind == "room":
            return np.all((X >= self.box_min - tol) & (X <= self.box_max + tol), axis=-1)
        rel = X - self.center
        a = rel @ self.axes[0]
        b = rel @ self.axes[1]
        return (np.abs(a) <= self.half[0] + tol) & (np.abs(b) <= self.half[1] + tol)

    def to_dict(self) -> dict:
        d = {"normal": self.normal.tolist(), "offset": float(self.offset), "instance": self.instance, "kind": self.kind}
        if self.kind == "room":
            d["box_min"] = self.box_min.tolist()
            d["box_max"] = self.box_max.tolist()
        else:
            d["center"] = self.center.tolist()
            d["axes"] = self.axes.tolist()
            d["half"] = self.half.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "WorldPlane":
        arr = lambda k: None if k not in d else np.array(d[k], dtype=np.float64)  # noqa: E731
        return cls(arr("normal"), float(d["offset"]), int(d["instance"]), d["kind"],
                   arr("box_min"), arr("box_max"), arr("center"), arr("axes"), arr("half"))


@dataclass
class ViewGT:
    seg: np.ndarray  # (H, W) index into ``instances``; -1 background
    depth: np.ndarray  # (H, W) metres, 0 on background
    instances: list[int]  # instance id per ground-truth plane of this view
    params: np.ndarray  # (M, 3) camera-frame plane parameters n = normal / offset

    def masks(self) -> np.ndarray:
        return np.stack([self.seg == k for k in range(len(self.instances))]) if self.instances else \
            np.zeros((0,) + self.seg.shape, dtype=bool)


@dataclass
class SceneSample:
    index: int
    stream: tuple[int, ...]
    planes: list[WorldPlane]
    poses: tuple[PoseSE3, PoseSE3]  # world-to-camera
    cam: CameraIntrinsics
    views: tuple[ViewGT, ViewGT]
    correspondence: list[tuple[int, int]]
    overlap: float
    codes: dict[int, np.ndarray]  # per-instance colour code

    @property
    def relative(self) -> PoseSE3:
        """Pose mapping view-1 camera coordinates to view 2."""
        return relative_pose(self.poses[0], self.poses[1])

    def to_json(self) -> dict:
        return {
            "index": self.index,
            "stream": list(self.stream),
            "planes": [p.to_dict() for p in self.planes],
            "poses": [p.to_dict() for p in self.poses],
            "camera": self.cam.to_dict(),
            "views": [
                {"instances": v.instances, "params": v.params.tolist()} for v in self.views
            ],
            "correspondence": [list(p) for p in self.correspondence],
            "overlap": self.overlap,
            "codes": {str(k): v.tolist() for k, v in sorted(self.codes.items())},
        }


# ---------------------------------------------------------------------------
# rendering


def _rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


# camera axes (right, down, forward) in world coordinates at zero yaw
_CAM_BASE = np.diag([-1.0, -1.0, 1.0])


def camera_pose(position, R_cw) -> PoseSE3:
    R_wc = R_cw.T
    return PoseSE3(rotmat_to_quat(R_wc), -R_wc @ position)


def cast_rays(planes: list[WorldPlane], origin, dirs):
    """Front-most plane hit for rays ``origin + s * dirs``.

    Returns ``(s, hit_index)`` where ``hit_index`` indexes ``planes`` and is
    -1 when nothing is hit.  Ties keep the lower instance id.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    best = np.full(dirs.shape[:-1], np.inf)
    hit = np.full(dirs.shape[:-1], -1, dtype=np.int64)
    order = sorted(range(len(planes)), key=lambda i: planes[i].instance)
    for i in order:
        p = planes[i]
        denom = dirs @ p.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (p.offset - origin @ p.normal) / denom
        ok = np.isfinite(s) & (s > 1e-9)
        X = origin + np.where(ok, s, 0.0)[..., None] * dirs
        ok &= p.contains(X, tol=1e-9)
        better = ok & (s < best)
        best = np.where(better, s, best)
        hit = np.where(better, i, hit)
    return best, hit


def render_view(planes: list[WorldPlane], pose: PoseSE3, cam: CameraIntrinsics):
    """Depth (camera z) and plane index per pixel."""
    R_cw = pose.R.T
    origin = -R_cw @ pose.t
    dirs = cam.rays() @ R_cw.T
    s, hit = cast_rays(planes, origin, dirs)
    depth = np.where(hit >= 0, s, 0.0)  # rays have unit z, so s is depth
    return depth, hit


def camera_plane_param(plane: WorldPlane, pose: PoseSE3) -> np.ndarray:
    R_cw = pose.R.T
    origin = -R_cw @ pose.t
    d = plane.offset - plane.normal @ origin
    return (pose.R @ plane.normal) / d


def overlap_ratio(planes, pose1, pose2, cam, seg1, depth1) -> float:
    """Fraction of view-1 planar pixels that are co-visible in view 2."""
    planar = seg1 >= 0
    total = int(planar.sum())
    if total == 0:
        return 0.0
    X1 = cam.rays()[planar] * depth1[planar][:, None]
    T21 = relative_pose(pose1, pose2)
    X2 = T21.apply(X1)
    u, v, z = cam.project(X2)
    eps = 1e-6  # reprojection round-off at the image border
    inside = (z > 1e-6) & (u >= -eps) & (u <= cam.width - 1 + eps) & (v >= -eps) & (v <= cam.height - 1 + eps)
    if not inside.any():
        return 0.0
    R_cw2 = pose2.R.T
    origin2 = -R_cw2 @ pose2.t
    rays2 = np.stack([(u[inside] - cam.cx) / cam.fx, (v[inside] - cam.cy) / cam.fy, np.ones(inside.sum())], axis=-1)
    s2, hit2 = cast_rays(planes, origin2, rays2 @ R_cw2.T)
    zin = z[inside]
    visible = (hit2 >= 0) & (np.abs(s2 - zin) <= 1e-6 * np.maximum(1.0, zin))
    return float(visible.sum()) / total


# ---------------------------------------------------------------------------
# scene sampling


def _sample_room(rng: RngStream, cfg: GenConfig):
    a = rng.uniform(*cfg.room_half_extent)
    b = rng.uniform(*cfg.room_half_extent)
    h = rng.uniform(*cfg.room_height)
    lo = np.array([-a, 0.0, -b])
    hi = np.array([a, h, b])
    n_walls = int(rng.integers(3, min(4, cfg.max_planes - 2) + 1))
    walls = sorted(rng.permutation(4)[:n_walls].tolist())
    specs = [(np.array([0.0, 1.0, 0.0]), 0.0), (np.array([0.0, -1.0, 0.0]), -h)]
    wall_specs = [
        (np.array([1.0, 0.0, 0.0]), -a),
        (np.array([-1.0, 0.0, 0.0]), -a),
        (np.array([0.0, 0.0, 1.0]), -b),
        (np.array([0.0, 0.0, -1.0]), -b),
    ]
    specs += [wall_specs[w] for w in walls]
    planes = [WorldPlane(nrm, off, i, "room", box_min=lo, box_max=hi) for i, (nrm, off) in enumerate(specs)]
    room_left = min(2, cfg.max_planes - len(planes))
    n_panels = int(rng.integers(min(1, room_left), room_left + 1))
    for k in range(n_panels):
        inst = len(planes)
        if rng.uniform() < 0.5:
            # vertical panel
            yaw = rng.uniform(0, 2 * math.pi)
            normal = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
            axes = np.array([[math.cos(yaw), 0.0, -math.sin(yaw)], [0.0, 1.0, 0.0]])
            half = np.array([rng.uniform(0.4, 1.0), rng.uniform(0.3, 0.8)])
            center = np.array([rng.uniform(-a + 0.6, a - 0.6), rng.uniform(half[1], min(h - half[1], 1.8)),
                               rng.uniform(-b + 0.6, b - 0.6)])
        else:
            # table top
            normal = np.array([0.0, 1.0, 0.0])
            axes = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
            half = np.array([rng.uniform(0.4, 0.9), rng.uniform(0.3, 0.7)])
            center = np.array([rng.uniform(-a + 1.0, a - 1.0), rng.uniform(0.6, 1.0), rng.uniform(-b + 1.0, b - 1.0)])
        planes.append(WorldPlane(normal, float(normal @ center), inst, "panel", center=center, axes=axes, half=half))
    return planes, lo, hi


def _sample_camera(rng: RngStream, lo, hi):
    pos = np.array([
        rng.uniform(lo[0] + 0.6, hi[0] - 0.6),
        rng.uniform(1.2, min(1.8, hi[1] - 0.5)),
        rng.uniform(lo[2] + 0.6, hi[2] - 0.6),
    ])
    # face roughly towards the room centre, as a hand-held capture would
    yaw = math.atan2(-pos[0], -pos[2]) + math.radians(rng.uniform(-60, 60))
    pitch = math.radians(rng.uniform(-5, 25))  # positive looks down
    roll = math.radians(rng.uniform(-3, 3))
    R_cw = _rot_y(yaw) @ _rot_x(pitch) @ _CAM_BASE @ _rot_z(roll)
    return pos, R_cw


def _sample_perturbation(rng: RngStream, cfg: GenConfig):
    """Rotation (camera-1 frame) and translation for the second camera."""
    for _ in range(100):
        yaw = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
        pitch = math.radians(rng.uniform(-5, 5))
        roll = math.radians(rng.uniform(-3, 3))
        # yaw about the camera's vertical (down) axis
        R = _rot_y(yaw) @ _rot_x(pitch) @ _rot_z(roll)
        angle = math.degrees(math.acos(np.clip((np.trace(R) - 1) / 2, -1, 1)))
        if angle <= cfg.max_rotation_deg:
            break
    r = cfg.max_translation * math.sqrt(rng.uniform())
    heading = rng.uniform(0, 2 * math.pi)
    dy = rng.uniform(-0.2, 0.2)
    horiz = math.sqrt(max(r * r - dy * dy, 0.0))
    delta = np.array([horiz * math.cos(heading), dy, horiz * math.sin(heading)])
    return R, delta


def _same_side(plane: WorldPlane, positions, margin=0.3) -> bool:
    sides = [plane.normal @ p - plane.offset for p in positions]
    return all(s > margin for s in sides) or all(s < -margin for s in sides)


def _view_gt(planes, pose, cam, cfg: GenConfig) -> ViewGT:
    depth, hit = render_view(planes, pose, cam)
    seg = np.full(hit.shape, -1, dtype=np.int64)
    instances, params = [], []
    for i in sorted(set(hit[hit >= 0].tolist()), key=lambda i: planes[i].instance):
        mask = hit == i
        if mask.sum() < cfg.min_plane_pixels:
            continue
        seg[mask] = len(instances)
        instances.append(planes[i].instance)
        params.append(camera_plane_param(planes[i], pose))
    depth = np.where(seg >= 0, depth, 0.0)
    return ViewGT(seg, depth, instances, np.array(params, dtype=np.float64).reshape(-1, 3))


def build_sample(index, stream, planes, pose1, pose2, cam, cfg: GenConfig, codes) -> SceneSample:
    v1 = _view_gt(planes, pose1, cam, cfg)
    v2 = _view_gt(planes, pose2, cam, cfg)
    pos2 = {inst: k for k, inst in enumerate(v2.instances)}
    corr = [(k, pos2[inst]) for k, inst in enumerate(v1.instances) if inst in pos2]
    ov = overlap_ratio(planes, pose1, pose2, cam, v1.seg, v1.depth)
    return SceneSample(index, tuple(stream), planes, (pose1, pose2), cam, (v1, v2), corr, ov, codes)


def generate_scene(cfg: GenConfig, index: int, split: str = "train") -> SceneSample:
    """Sample one two-view scene, resampling until the overlap is in range."""
    stream = (cfg.seed, SPLITS[split], index)
    rng = RngStream(*stream)
    cam = cfg.camera
    lo_ov, hi_ov = cfg.overlap_range
    last = None
    for attempt in range(cfg.max_attempts):
        planes, lo, hi = _sample_room(rng, cfg)
        p1, R1 = _sample_camera(rng, lo, hi)
        dR, delta = _sample_perturbation(rng, cfg)
        p2 = p1 + R1 @ delta
        if np.any(p2 < lo + 0.3) or np.any(p2 > hi - 0.3):
            last = "second camera outside the room"
            continue
        if not all(_same_side(p, (p1, p2)) for p in planes if p.kind == "panel"):
            last = "cameras on opposite sides of a panel"
            continue
        pose1 = camera_pose(p1, R1)
        pose2 = camera_pose(p2, R1 @ dR)
        codes = {p.instance: _unit(rng.normal(size=3)) for p in planes}
        sample = build_sample(index, stream, planes, pose1, pose2, cam, cfg, codes)
        if not sample.views[0].instances or not sample.views[1].instances:
            last = "empty view"
            continue
        if lo_ov <= sample.overlap <= hi_ov:
            return sample
        last = f"overlap {sample.overlap:.3f} outside [{lo_ov}, {hi_ov}]"
    raise GenerationError(f"scene {split}/{index}: no valid sample after {cfg.max_attempts} attempts (last: {last})")


def _unit(v):
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# pixel features


RAW_CHANNELS = 8


def featurize_pixels(sample: SceneSample, view: int, sigma: float = 0.05) -> np.ndarray:
    """Raw per-pixel features ``(8, H, W)``.

    Channels: ray direction (3), depth with relative noise (1), plane colour
    code with additive noise (3), constant 1 (1).  Background pixels have zero
    depth and colour before noise.
    """
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    cam = sample.cam
    gt = sample.views[view]
    rng = RngStream(*sample.stream, view, 7)
    H, W = cam.height, cam.width
    rays = cam.rays()
    colors = np.zeros((H, W, 3))
    for k, inst in enumerate(gt.instances):
        colors[gt.seg == k] = sample.codes[inst]
    planar = gt.seg >= 0
    depth = gt.depth * (1.0 + sigma * rng.normal(size=(H, W))) * planar
    colors = colors + sigma * rng.normal(size=(H, W, 3))
    feats = np.concatenate([rays, depth[..., None], colors, np.ones((H, W, 1))], axis=-1)
    return np.transpose(feats, (2, 0, 1)).copy()


# ---------------------------------------------------------------------------
# dataset on disk


def sample_from_json(d, tensors) -> SceneSample:
    cam = CameraIntrinsics.from_dict(d["camera"])
    planes = [WorldPlane.from_dict(p) for p in d["planes"]]
    poses = tuple(PoseSE3.from_dict(p) for p in d["poses"])
    views = []
    for k, vd in enumerate(d["views"]):
        seg = tensors[2 * k].astype(np.int64)
        depth = tensors[2 * k + 1].astype(np.float64)
        views.append(ViewGT(seg, depth, list(vd["instances"]), np.array(vd["params"], dtype=np.float64).reshape(-1, 3)))
    codes = {int(k): np.array(v) for k, v in d["codes"].items()}
    return SceneSample(int(d["index"]), tuple(d["stream"]), planes, poses, cam, tuple(views),
                       [tuple(p) for p in d["correspondence"]], float(d["overlap"]), codes)


def _scene_files(root: Path, gid: int):
    return root / "scenes" / f"{gid:04d}.json", root / "tensors" / f"{gid:04d}.bin"


def write_sample(root: Path, gid: int, sample: SceneSample) -> None:
    js, tb = _scene_files(root, gid)
    js.write_text(json.dumps(sample.to_json(), sort_keys=True))
    arrays = []
    for v in sample.views:
        arrays += [v.seg.astype(np.float32), v.depth.astype(np.float32)]
    save_tensors(tb, arrays)


def make_dataset(cfg: GenConfig, n_train: int, n_test: int, out_dir, progress=None) -> dict:
    """Generate and write a dataset; returns the manifest."""
    root = Path(out_dir)
    try:
        (root / "scenes").mkdir(parents=True, exist_ok=True)
        (root / "tensors").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise TensorFileError(str(exc)) from exc
    entries = []
    gid = 0
    for split, count in (("train", n_train), ("test", n_test)):
        for i in range(count):
            sample = generate_scene(cfg, i, split)
            write_sample(root, gid, sample)
            entries.append({"id": gid, "split": split, "index": i, "stream": [cfg.seed, SPLITS[split], i]})
            gid += 1
            if progress:
                progress(gid, n_train + n_test)
    manifest = {
        "format": "planequery-dataset-1",
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "n_train": n_train,
        "n_test": n_test,
        "scenes": entries,
    }
    manifest["content_hash"] = dataset_hash(root, entries)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def dataset_hash(root, entries=None) -> str:
    root = Path(root)
    if entries is None:
        entries = json.loads((root / "manifest.json").read_text())["scenes"]
    h = hashlib.sha256()
    for e in entries:
        for f in _scene_files(root, e["id"]):
            h.update(f.read_bytes())
    return h.hexdigest()


def regenerate(manifest_path, out_dir) -> dict:
    m = json.loads(Path(manifest_path).read_text())
    return make_dataset(GenConfig.from_dict(m["config"]), m["n_train"], m["n_test"], out_dir)


class Dataset:
    """Lazy reader for a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.manifest = json.loads((self.root / "manifest.json").read_text())
        except (OSError, ValueError) as exc:
            raise TensorFileError(f"cannot read dataset manifest in {self.root}: {exc}") from exc
        self.config = GenConfig.from_dict(self.manifest["config"])
        self._cache: dict[int, SceneSample] = {}

    def ids(self, split: str) -> list[int]:
        return [e["id"] for e in self.manifest["scenes"] if e["split"] == split]

    def load(self, gid: int) -> SceneSample:
        if gid not in self._cache:
            js, tb = _scene_files(self.root, gid)
            try:
                d = json.loads(js.read_text())
            except (OSError, ValueError) as exc:
                raise TensorFileError(f"cannot read scene {gid}: {exc}") from exc
            self._cache[gid] = sample_from_json(d, load_tensors(tb))
        return self._cache[gid]

    def split(self, split: str) -> list[SceneSample]:
        return [self.load(i) for i in self.ids(split)]
