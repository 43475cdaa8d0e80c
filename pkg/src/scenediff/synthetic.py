"""Procedural scenes of ellipsoid-built furniture with analytic depth renders.

Every shape is a union of iso-ellipsoids of its own scaffold, so the
renderer, the occupancy ground truth and the alignment loss all agree
exactly.  Objects stand on a common floor and, room-style, share a yaw up to
multiples of a right angle.
"""
from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import shape as S
from .align import (INVALID_DEPTH, DepthObservation, object_targets, read_depth, read_instances, write_depth,
                    write_instances)
from .condition import PATCH_SIZE, ObjectObservation
from .pose import Box3D, Camera, ObjectPose, iou3d, object_center, wrap_angle, yaw_matrix

CLASS_NAMES = ("cabinet", "table", "chair", "bed", "sofa", "lamp", "shelf", "desk")

# (width, height, depth) ranges in metres per class
CLASS_SIZES = {
    0: ((0.5, 1.0), (0.8, 1.8), (0.4, 0.6)),
    1: ((0.8, 1.8), (0.7, 0.8), (0.6, 1.0)),
    2: ((0.45, 0.6), (0.8, 1.0), (0.45, 0.6)),
    3: ((1.0, 1.8), (0.5, 1.0), (1.9, 2.2)),
    4: ((1.5, 2.5), (0.7, 0.9), (0.8, 1.0)),
    5: ((0.3, 0.5), (1.2, 1.8), (0.3, 0.5)),
    6: ((0.6, 1.2), (1.0, 2.0), (0.3, 0.4)),
    7: ((1.0, 1.6), (0.7, 0.8), (0.5, 0.8)),
}

STYLE_RANGES = {"train": (0.0, 0.5), "val": (0.5, 1.0)}
DEPTH_SCALE = 5.0


@dataclass(frozen=True)
class SceneConfig:
    image_size: int = 128
    focal: float = 128.0
    min_objects: int = 1
    max_objects: int = 8
    camera_height: tuple[float, float] = (0.5, 1.2)
    depth_range: tuple[float, float] = (1.5, 4.5)
    lateral: float = 0.35         # |x / z| bound for object centres
    yaw_jitter: float = 0.1
    max_overlap: float = 0.05
    max_tries: int = 10_000
    g: int = S.DEFAULT_G
    split: str = "train"

    def __post_init__(self):
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError(f"object count bounds [{self.min_objects}, {self.max_objects}] invalid")
        if self.split not in STYLE_RANGES:
            raise ValueError(f"split must be one of {sorted(STYLE_RANGES)}, got {self.split!r}")
        if self.g < 8:
            raise ValueError("templates need at least 8 Gaussians")

    def camera(self) -> Camera:
        return Camera.default(self.image_size, self.focal)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SceneConfig:
        d = dict(d)
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ValueError(f"unknown scene config field(s): {', '.join(unknown)}")
        for k in ("camera_height", "depth_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# -- templates -------------------------------------------------------------------------------
# Parts are (centre, semi-axes) in a y-up frame with the object roughly in [-0.5, 0.5]^3.


def _lerp(a, b, t):
    return a + (b - a) * t


def _cabinet(t):
    w = _lerp(0.42, 0.5, t)
    return [((0, 0.02, 0), (w, 0.46, 0.45)), ((0, -0.47, 0), (w, 0.04, 0.47)),
            ((0, 0.49, 0), (w * 1.02, 0.03, 0.48)), ((-0.2, 0.05, 0.42), (0.16, _lerp(0.3, 0.4, t), 0.05)),
            ((0.2, 0.05, 0.42), (0.16, _lerp(0.3, 0.4, t), 0.05))]


def _table(t):
    leg = _lerp(0.04, 0.08, t)
    inset = _lerp(0.42, 0.36, t)
    parts = [((0, 0.46, 0), (0.5, 0.045, 0.5))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts.append(((sx * inset, -0.05, sz * inset), (leg, 0.46, leg)))
    parts.append(((0, 0.36, 0), (inset, 0.05, inset)))
    return parts


def _chair(t):
    leg = _lerp(0.04, 0.07, t)
    parts = [((0, -0.02, 0.02), (0.48, 0.05, 0.46)), ((0, 0.26, -0.44), (0.46, 0.26, 0.05)),
             ((0, 0.48, -0.44), (_lerp(0.4, 0.48, t), 0.04, 0.06))]
    for sx in (-1, 1):
        for sz in (-1, 1):
            parts.append(((sx * 0.4, -0.27, sz * 0.38), (leg, 0.24, leg)))
    return parts


def _bed(t):
    return [((0, -0.3, 0.02), (0.5, 0.18, 0.48)), ((0, -0.05, 0.04), (0.48, 0.12, 0.45)),
            ((0, 0.1, -0.47), (0.5, _lerp(0.35, 0.45, t), 0.03)),
            ((-0.22, 0.12, -0.36), (0.18, 0.05, 0.07)), ((0.22, 0.12, -0.36), (0.18, 0.05, 0.07))]


def _sofa(t):
    arm = _lerp(0.07, 0.12, t)
    return [((0, -0.28, 0.05), (0.5, 0.2, 0.45)), ((0, 0.15, -0.38), (0.5, 0.32, 0.12)),
            ((-0.5 + arm, -0.05, 0.05), (arm, _lerp(0.25, 0.35, t), 0.45)),
            ((0.5 - arm, -0.05, 0.05), (arm, _lerp(0.25, 0.35, t), 0.45)),
            ((-0.22, -0.02, 0.08), (0.22, 0.08, 0.34)), ((0.22, -0.02, 0.08), (0.22, 0.08, 0.34))]


def _lamp(t):
    shade = _lerp(0.35, 0.5, t)
    return [((0, -0.47, 0), (0.4, 0.03, 0.4)), ((0, -0.2, 0), (0.05, 0.26, 0.05)),
            ((0, 0.1, 0), (0.05, 0.1, 0.05)), ((0, 0.35, 0), (shade, 0.15, shade))]


def _shelf(t):
    n = 3 if t < 0.5 else 4
    parts = [((-0.47, 0, 0), (0.03, 0.5, 0.48)), ((0.47, 0, 0), (0.03, 0.5, 0.48))]
    for i in range(n):
        y = -0.45 + 0.9 * i / (n - 1)
        parts.append(((0, y, 0), (0.45, 0.03, 0.46)))
    return parts


def _desk(t):
    return [((0, 0.46, 0), (0.5, 0.04, 0.5)), ((-0.46, -0.05, 0), (0.04, 0.46, 0.46)),
            ((0.46, -0.05, 0), (0.04, 0.46, 0.46)), ((_lerp(0.2, 0.28, t), 0.15, 0.05), (0.16, 0.2, 0.4))]


TEMPLATES = (_cabinet, _table, _chair, _bed, _sofa, _lamp, _shelf, _desk)


def _split_parts(parts: list[tuple[np.ndarray, np.ndarray]], g: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Halve the largest part along its longest axis until there are ``g`` parts."""
    parts = [(np.asarray(c, dtype=np.float64), np.asarray(a, dtype=np.float64)) for c, a in parts]
    if len(parts) > g:
        raise ValueError(f"template has {len(parts)} parts, more than g={g}")
    while len(parts) < g:
        vols = [float(np.prod(a)) for _, a in parts]
        i = int(np.argmax(vols))
        c, a = parts.pop(i)
        ax = int(np.argmax(a))
        off = np.zeros(3)
        off[ax] = 0.4 * a[ax]
        child = a.copy()
        child[ax] = 0.6 * a[ax]
        parts[i:i] = [(c - off, child), (c + off, child.copy())]
    return parts


def template_scaffold(class_id: int, style: float, g: int = S.DEFAULT_G) -> S.GaussianScaffold:
    """Class template at ``style`` as ``g`` Gaussians whose union shape fills the unit box.

    Local frame has y pointing down (gravity) like the camera.
    """
    if not 0 <= class_id < len(TEMPLATES):
        raise ValueError(f"unknown class {class_id}")
    parts = _split_parts(TEMPLATES[class_id](float(style)), g)
    c = np.array([p[0] for p in parts]) * np.array([1.0, -1.0, 1.0])
    a = np.array([p[1] for p in parts])
    lo, hi = (c - a).min(axis=0), (c + a).max(axis=0)
    scale = 1.0 / (hi - lo)
    c = (c - (lo + hi) / 2) * scale
    a = a * scale
    k = S.ellipsoid_radius()
    return S.GaussianScaffold(c, np.broadcast_to(np.eye(3), (g, 3, 3)).copy(), (a / k) ** 2, np.zeros(g))


# -- scenes -------------------------------------------------------------------------------------


@dataclass
class SceneObject:
    class_id: int
    pose: ObjectPose
    box2d: np.ndarray          # clipped (left, top, right, bottom)
    scaffold: S.GaussianScaffold
    style: float

    @property
    def box_center(self) -> np.ndarray:
        return np.array([(self.box2d[0] + self.box2d[2]) / 2, (self.box2d[1] + self.box2d[3]) / 2])

    def center(self, camera: Camera) -> np.ndarray:
        return object_center(self.pose, self.box_center, camera)

    def box3d(self, camera: Camera) -> Box3D:
        return Box3D.from_pose(self.pose, self.box_center, camera)


@dataclass
class SceneSpec:
    camera: Camera
    camera_height: float
    room_yaw: float
    objects: list[SceneObject] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "camera": self.camera.to_dict(), "camera_height": self.camera_height, "room_yaw": self.room_yaw,
            "objects": [{"class_id": o.class_id, "class_name": CLASS_NAMES[o.class_id], "style": o.style,
                         "pose": o.pose.to_vector().tolist(), "box2d": np.asarray(o.box2d).tolist(),
                         "scaffold": o.scaffold.to_dict()} for o in self.objects],
        }

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        objs = [SceneObject(int(o["class_id"]), ObjectPose.from_vector(np.array(o["pose"])),
                            np.array(o["box2d"], dtype=np.float64), S.GaussianScaffold.from_dict(o["scaffold"]),
                            float(o["style"])) for o in d["objects"]]
        return cls(Camera.from_dict(d["camera"]), float(d["camera_height"]), float(d["room_yaw"]), objs)


def project_box(center: np.ndarray, size: np.ndarray, yaw: float, camera: Camera) -> tuple[np.ndarray, np.ndarray, bool]:
    """Clipped 2D box of the projected 3D box corners, the offset delta, and an on-screen flag.

    delta = projected 3D centre - centre of the clipped 2D box.
    """
    corners = Box3D(center, size, yaw).corners()
    if np.any(corners[:, 2] <= 1e-6):
        raise ValueError("object crosses the camera plane")
    uv = camera.project(corners)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    on = bool(hi[0] > 0 and hi[1] > 0 and lo[0] < camera.width and lo[1] < camera.height)
    box = np.array([np.clip(lo[0], 0, camera.width), np.clip(lo[1], 0, camera.height),
                    np.clip(hi[0], 0, camera.width), np.clip(hi[1], 0, camera.height)])
    bc = np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])
    delta = camera.project(np.asarray(center)) - bc
    return box, delta, on and box[2] > box[0] and box[3] > box[1]


def project_boxes(scene: SceneSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """``(box2d, delta)`` per object, recomputed from the objects' 3D boxes."""
    out = []
    for o in scene.objects:
        b = o.box3d(scene.camera)
        box, delta, _ = project_box(b.center, b.size, b.yaw, scene.camera)
        out.append((box, delta))
    return out


class PlacementError(RuntimeError):
    pass


def generate_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> SceneSpec:
    camera = config.camera()
    h = float(rng.uniform(*config.camera_height))
    room_yaw = float(rng.uniform(-np.pi, np.pi))
    target = int(rng.integers(config.min_objects, config.max_objects + 1))
    style_lo, style_hi = STYLE_RANGES[config.split]
    objects: list[SceneObject] = []
    boxes: list[Box3D] = []
    tries = 0
    while len(objects) < target:
        tries += 1
        if tries > config.max_tries:
            raise PlacementError(f"placement budget of {config.max_tries} tries exhausted "
                                 f"with {len(objects)}/{target} objects")
        cls = int(rng.integers(len(TEMPLATES)))
        style = float(rng.uniform(style_lo, style_hi))
        size = np.array([rng.uniform(*r) for r in CLASS_SIZES[cls]])
        yaw = float(wrap_angle(room_yaw + rng.integers(4) * np.pi / 2 + rng.uniform(-1, 1) * config.yaw_jitter))
        z = float(rng.uniform(*config.depth_range))
        x = float(z * rng.uniform(-config.lateral, config.lateral))
        center = np.array([x, h - size[1] / 2, z])
        d = float(np.linalg.norm(center))
        if not 0.7 <= d <= 5.0:
            continue
        box = Box3D(center, size, yaw)
        if box.corners()[:, 2].min() < 0.3:
            continue
        if any(iou3d(box, other) > config.max_overlap for other in boxes):
            continue
        box2d, delta, on = project_box(center, size, yaw, camera)
        if not on:
            continue
        pose = ObjectPose(delta, d, size, yaw)
        objects.append(SceneObject(cls, pose, box2d, template_scaffold(cls, style, config.g), style))
        boxes.append(box)
    return SceneSpec(camera, h, room_yaw, objects)


# -- rendering ------------------------------------------------------------------------------------


def object_ellipsoids(obj: SceneObject, camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Camera-frame centres ``(g, 3)`` and inverse shape maps ``(g, 3, 3)``.

    A point x lies inside ellipsoid j iff ``|B_j (x - c_j)| <= 1``.
    """
    s = obj.scaffold
    rot = yaw_matrix(obj.pose.yaw)
    size = obj.pose.size
    centers = (s.mu * size) @ rot.T + obj.center(camera)
    k = S.ellipsoid_radius()
    # A maps the unit ball onto the ellipsoid: A = R diag(size) U diag(k sqrt(lam))
    a = rot[None] @ (size[None, :, None] * s.U) * (k * np.sqrt(s.lam))[:, None, :]
    return centers, np.linalg.inv(a)


def pixel_rays(camera: Camera) -> np.ndarray:
    """``(H*W, 3)`` rays with unit z component, row-major over (row, col)."""
    v, u = np.mgrid[0:camera.height, 0:camera.width]
    return camera.ray(np.stack([u.reshape(-1), v.reshape(-1)], axis=1).astype(np.float64))


def ray_hits(rays: np.ndarray, centers: np.ndarray, inv: np.ndarray) -> np.ndarray:
    """``(R, g)`` nearest positive hit parameter (= z depth for unit-z rays), inf on a miss."""
    br = np.einsum("gij,rj->rgi", inv, rays)
    bc = np.einsum("gij,gj->gi", inv, centers)
    a = np.einsum("rgi,rgi->rg", br, br)
    b = np.einsum("rgi,gi->rg", br, bc)
    c = np.einsum("gi,gi->g", bc, bc) - 1.0
    disc = b * b - a * c
    hit = disc >= 0
    root = np.sqrt(np.where(hit, disc, 0.0))
    t0 = (b - root) / a
    t1 = (b + root) / a
    t = np.where(t0 > 0, t0, t1)
    return np.where(hit & (t > 0), t, np.inf)


def render_depth(scene: SceneSpec) -> DepthObservation:
    cam = scene.camera
    rays = pixel_rays(cam)
    best = np.full(len(rays), np.inf)
    ids = np.zeros(len(rays), dtype=np.uint16)
    for k, obj in enumerate(scene.objects):
        t = ray_hits(rays, *object_ellipsoids(obj, cam)).min(axis=1)
        closer = t < best
        best[closer] = t[closer]
        ids[closer] = k + 1
    depth = np.where(np.isfinite(best), best, INVALID_DEPTH).astype(np.float32)
    return DepthObservation(depth.reshape(cam.height, cam.width), ids.reshape(cam.height, cam.width), cam)


def _pool_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def feature_patch(obs: DepthObservation, instance_id: int, box2d: np.ndarray) -> np.ndarray:
    """``(8, 8, 2)`` patch: adaptive average of [masked depth / 5, mask] over the box crop."""
    h, w = obs.depth.shape
    l, t, r, b = box2d
    c0, c1 = int(np.clip(np.floor(l), 0, w - 1)), int(np.clip(np.ceil(r), 1, w))
    r0, r1 = int(np.clip(np.floor(t), 0, h - 1)), int(np.clip(np.ceil(b), 1, h))
    c1, r1 = max(c1, c0 + 1), max(r1, r0 + 1)
    mask = (obs.instance[r0:r1, c0:c1] == instance_id).astype(np.float64)
    depth = np.where(mask > 0, obs.depth[r0:r1, c0:c1], 0.0) / DEPTH_SCALE
    stack = np.stack([depth, mask], axis=-1)
    out = np.empty((PATCH_SIZE, PATCH_SIZE, 2))
    for i, (ra, rb) in enumerate(_pool_bounds(r1 - r0, PATCH_SIZE)):
        for j, (ca, cb) in enumerate(_pool_bounds(c1 - c0, PATCH_SIZE)):
            out[i, j] = stack[ra:rb, ca:cb].mean(axis=(0, 1))
    return out


def observations(scene: SceneSpec, obs: DepthObservation) -> list[ObjectObservation]:
    return [ObjectObservation(o.box2d, feature_patch(obs, k + 1, o.box2d), o.class_id)
            for k, o in enumerate(scene.objects)]


# -- datasets -------------------------------------------------------------------------------------


@dataclass
class SceneRecord:
    scene: SceneSpec
    depth: DepthObservation
    observations: list[ObjectObservation]

    def targets(self) -> list[np.ndarray]:
        return object_targets(self.depth, len(self.scene.objects))


def scene_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


def make_record(seed: int, index: int, config: SceneConfig) -> SceneRecord:
    scene = generate_scene(scene_rng(seed, index), config)
    depth = render_depth(scene)
    return SceneRecord(scene, depth, observations(scene, depth))


def build_dataset(out_dir: str | Path, count: int, seed: int, config: SceneConfig = SceneConfig(),
                  force: bool = False) -> Path:
    """Write ``count`` scenes plus ``manifest.json``; refuses to overwrite without ``force``."""
    out = Path(out_dir)
    if out.exists():
        if not force:
            raise FileExistsError(f"{out} exists (pass --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True)
    entries = []
    for i in range(count):
        rec = make_record(seed, i, config)
        stem = f"scene_{i:05d}"
        write_depth(out / f"{stem}.dpt", rec.depth.depth)
        write_instances(out / f"{stem}.ins", rec.depth.instance)
        meta = rec.scene.to_dict()
        meta["patches"] = [o.patch.tolist() for o in rec.observations]
        (out / f"{stem}.json").write_text(json.dumps(meta, sort_keys=True))
        entries.append({"id": i, "depth": f"{stem}.dpt", "instances": f"{stem}.ins", "meta": f"{stem}.json",
                        "bytes": [(out / f"{stem}{ext}").stat().st_size for ext in (".dpt", ".ins", ".json")]})
    manifest = {"format": 1, "seed": int(seed), "count": int(count), "config": config.to_dict(),
                "config_hash": config.hash(), "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def load_dataset(path: str | Path) -> tuple[dict, list[SceneRecord]]:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    records = []
    for e in manifest["scenes"]:
        meta = json.loads((root / e["meta"]).read_text())
        scene = SceneSpec.from_dict(meta)
        depth = DepthObservation(read_depth(root / e["depth"]), read_instances(root / e["instances"]), scene.camera)
        obs = [ObjectObservation(o.box2d, np.array(p), o.class_id) for o, p in zip(scene.objects, meta["patches"])]
        records.append(SceneRecord(scene, depth, obs))
    return manifest, records


def generate_records(count: int, seed: int, config: SceneConfig = SceneConfig()) -> list[SceneRecord]:
    """In-memory dataset with the same content as :func:`build_dataset`."""
    return [make_record(seed, i, config) for i in range(count)]
