"""Depth-to-shape alignment: back-projection, posed scaffold samples, 1-sided Chamfer.

The differentiable path runs from normalised pose and shape codes all the way
to the Chamfer value, with the sampling noise ``z`` held fixed so the loss is
a deterministic function of the codes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import shape as S
from .autodiff import tensor as T
from .autodiff.tensor import Tensor
from .neighbors import NearestIndex, nearest_brute
from .pose import Camera, ObjectPose, PoseNormalizer, SIZE_FLOOR, pose_to_rigid_transform

ALIGN_WEIGHT = 0.01
LAM_FLOOR = 1e-8
INVALID_DEPTH = -1.0
DEPTH_MAGIC = b"DPT1"
INSTANCE_MAGIC = b"INS1"


@dataclass
class DepthObservation:
    depth: np.ndarray     # (H, W) metres, INVALID_DEPTH where nothing was hit
    instance: np.ndarray  # (H, W) uint16, 0 = background, k + 1 = object k
    camera: Camera

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.instance = np.asarray(self.instance, dtype=np.uint16)
        if self.depth.shape != self.instance.shape:
            raise ValueError(f"depth {self.depth.shape} and instance {self.instance.shape} grids differ")
        bad = (self.instance > 0) & ~(self.depth > 0)
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} instance pixels without positive depth")


def backproject_depth(obs: DepthObservation, instance_id: int) -> np.ndarray:
    """Camera-frame surface points ``depth * K^-1 [u, v, 1]`` of one instance's valid pixels.

    ``instance_id`` is the raw id stored in the map (object index + 1).
    Pixel ``(row, col)`` sits at image coordinates ``(u, v) = (col, row)``.
    """
    sel = (obs.instance == instance_id) & (obs.depth > 0)
    if not np.any(obs.instance == instance_id):
        raise KeyError(f"instance {instance_id} has no mask in the id map")
    rows, cols = np.nonzero(sel)
    z = obs.depth[rows, cols].astype(np.float64)
    cam = obs.camera
    x = (cols - cam.cx) / cam.fx * z
    y = (rows - cam.cy) / cam.fy * z
    return np.stack([x, y, z], axis=1)


def object_targets(obs: DepthObservation, n_objects: int) -> list[np.ndarray]:
    """Back-projected points per object; objects without a mask get an empty ``(0, 3)`` array."""
    out = []
    for k in range(n_objects):
        if np.any((obs.instance == k + 1) & (obs.depth > 0)):
            out.append(backproject_depth(obs, k + 1))
        else:
            out.append(np.zeros((0, 3)))
    return out


def transform_shape_samples(scaffold: S.GaussianScaffold, pose: ObjectPose, box_center, camera: Camera, m: int,
                            rng: np.random.Generator, z: np.ndarray | None = None) -> np.ndarray:
    """Scaffold samples scaled by the box size and moved into the camera frame."""
    local = S.sample_points(scaffold, m, rng, z) * pose.size
    rigid = pose_to_rigid_transform(pose, box_center, camera)
    return local @ rigid[:3, :3].T + rigid[:3, 3]


# -- 1-sided Chamfer ------------------------------------------------------------------------


def _chamfer_parts(q: np.ndarray, p: np.ndarray, brute: bool) -> tuple[np.ndarray, np.ndarray]:
    if len(q) == 0 or len(p) == 0:
        raise ValueError("1-sided Chamfer needs non-empty target and source sets")
    return nearest_brute(q, p) if brute else NearestIndex(p).query(q)


def _chamfer_grad(q: np.ndarray, p: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """d/dP of the mean nearest squared distance; each target pushes only its arg-min source."""
    diff = 2.0 * (p[idx] - q) / len(q)
    grad = np.zeros_like(p)
    for c in range(3):
        grad[:, c] = np.bincount(idx, weights=diff[:, c], minlength=len(p))
    return grad


def chamfer_value(q: np.ndarray, p: np.ndarray, brute: bool = False) -> tuple[float, np.ndarray]:
    """Mean over targets of the squared distance to the nearest source, plus the arg-min indices."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    d, idx = _chamfer_parts(q, p, brute)
    return float(np.mean(d)), idx


def one_sided_chamfer(q: np.ndarray, p: Tensor, brute: bool = False) -> Tensor:
    """Differentiable 1-sided Chamfer from fixed targets ``q`` to source Tensor ``p`` ``(n, 3)``."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    pd = p.data.astype(np.float64)
    d, idx = _chamfer_parts(q, pd, brute)
    grad = _chamfer_grad(q, pd, idx).astype(p.dtype)
    return T.custom([p], np.asarray(np.mean(d), dtype=p.dtype), lambda g: (g * grad,), "chamfer")


def chamfer_gradient(q: np.ndarray, p: np.ndarray, brute: bool = False) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    _, idx = _chamfer_parts(q, p, brute)
    return _chamfer_grad(q, p, idx)


# -- differentiable posed samples ---------------------------------------------------------


def _expand(x: Tensor, axis: int, n: int) -> Tensor:
    """Insert an axis of length ``n`` at ``axis`` by repetition."""
    shape = list(x.shape)
    shape.insert(axis, 1)
    y = T.reshape(x, tuple(shape))
    shape[axis] = n
    return T.broadcast_to(y, tuple(shape))


def posed_samples_tensor(pose_raw: Tensor, code_raw: Tensor, box_centers: np.ndarray, camera: Camera,
                         z: np.ndarray, g: int = S.DEFAULT_G) -> Tensor:
    """Camera-frame samples ``(N, g*m, 3)`` from raw poses ``(N, 7)`` and packed codes ``(N, g*16)``.

    ``z`` is the fixed standard-normal draw ``(N, g, m, 3)``.
    """
    n = pose_raw.shape[0]
    m = z.shape[2]
    dt = pose_raw.dtype
    mu, u, lam, _ = S.unpack_shape_code_tensor(code_raw, g)
    # A = U diag(sqrt(lam)); local = mu + A z
    # the floor keeps sqrt differentiable when softplus underflows on extreme codes
    a = T.mul(u, _expand(T.sqrt(T.affine(lam, 1.0, LAM_FLOOR)), 2, 3))
    local = T.matmul(Tensor(np.asarray(z, dtype=dt)), T.swapaxes(a, -1, -2))
    local = T.add(local, _expand(mu, 2, m))
    local = T.reshape(local, (n, g * m, 3))

    size = T.clamp_min(pose_raw[:, 3:6], SIZE_FLOOR)
    scaled = T.mul(local, _expand(size, 1, g * m))

    theta = pose_raw[:, 6:7]
    c, s = T.cos(theta), T.sin(theta)
    zero = Tensor(np.zeros((n, 1), dtype=dt))
    one = Tensor(np.ones((n, 1), dtype=dt))
    rot = T.reshape(T.concat([c, zero, s, zero, one, zero, T.affine(s, -1.0), zero, c], axis=1), (n, 3, 3))
    rotated = T.matmul(scaled, T.swapaxes(rot, 1, 2))

    bc = np.asarray(box_centers, dtype=np.float64).reshape(n, 2)
    u_px = T.affine(pose_raw[:, 0:1], 1.0 / camera.fx, ((bc[:, 0:1] - camera.cx) / camera.fx).astype(dt))
    v_px = T.affine(pose_raw[:, 1:2], 1.0 / camera.fy, ((bc[:, 1:2] - camera.cy) / camera.fy).astype(dt))
    ray = T.concat([u_px, v_px, one], axis=1)
    norm = T.sqrt(T.sum_(T.mul(ray, ray), axis=1, keepdims=True))
    dist = T.clamp_min(pose_raw[:, 2:3], SIZE_FLOOR)
    center = T.mul(ray, T.broadcast_to(T.div(dist, norm), (n, 3)))
    return T.add(rotated, _expand(center, 1, g * m))


def denormalize_pose_tensor(v: Tensor, normalizer: PoseNormalizer) -> Tensor:
    """Raw pose from normalised Tensor; yaw is left unwrapped (only its sine and cosine are used)."""
    return T.affine(v, normalizer.scale, normalizer.mu)


def surface_alignment_loss(pose_norm: Tensor, code_norm: Tensor, box_centers: np.ndarray,
                           targets: list[np.ndarray], camera: Camera, z: np.ndarray,
                           pose_normalizer: PoseNormalizer | None = None,
                           shape_normalizer: S.ShapeCodeNormalizer | None = None,
                           weights: np.ndarray | None = None, brute: bool = False) -> Tensor:
    """Mean 1-sided Chamfer over objects that have depth targets.

    Objects whose target set is empty are left out of the mean.  ``weights``
    optionally rescales each object's term (the count is unchanged).
    """
    pose_normalizer = pose_normalizer or PoseNormalizer()
    g = code_norm.shape[1] // S.PARAMS_PER_GAUSSIAN
    shape_normalizer = shape_normalizer or S.ShapeCodeNormalizer(g)
    visible = [i for i, q in enumerate(targets) if len(q)]
    if not visible:
        raise ValueError("no object has valid depth pixels")
    if len(targets) != pose_norm.shape[0] or code_norm.shape[0] != pose_norm.shape[0]:
        raise ValueError(f"{pose_norm.shape[0]} poses, {code_norm.shape[0]} codes, {len(targets)} target sets")
    idx = np.array(visible)
    pose_raw = denormalize_pose_tensor(T.take(pose_norm, idx), pose_normalizer)
    code_raw = shape_normalizer.denormalize_tensor(T.take(code_norm, idx))
    pts = posed_samples_tensor(pose_raw, code_raw, np.asarray(box_centers)[idx], camera, np.asarray(z)[idx], g)
    terms = []
    for row, i in enumerate(visible):
        term = one_sided_chamfer(targets[i], pts[row], brute=brute)
        if weights is not None:
            term = T.affine(term, float(weights[i]))
        terms.append(T.reshape(term, (1,)))
    return T.mean(T.concat(terms, axis=0))


def alignment_metric(poses: list[ObjectPose], scaffolds: list[S.GaussianScaffold], box_centers: np.ndarray,
                     targets: list[np.ndarray], camera: Camera, m: int = 1000,
                     rng: np.random.Generator | None = None) -> float:
    """Evaluation-time L_align in m^2 (numpy only, fresh samples)."""
    rng = rng or np.random.default_rng(0)
    vals = []
    for pose, scaffold, bc, q in zip(poses, scaffolds, box_centers, targets):
        if len(q) == 0:
            continue
        pts = transform_shape_samples(scaffold, pose, bc, camera, m, rng)
        vals.append(chamfer_value(q, pts)[0])
    if not vals:
        raise ValueError("no object has valid depth pixels")
    return float(np.mean(vals))


# -- depth / instance files ---------------------------------------------------------------


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC + struct.pack("<II", w, h) + depth.tobytes(order="C"))


def read_depth(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a DPT1 file")
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 4 * w * h:
        raise ValueError(f"{path}: truncated depth payload")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w).astype(np.float32)


def write_instances(path: str | Path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 0xFFFF:
        raise ValueError("instance ids must fit in u16")
    h, w = ids.shape
    with open(path, "wb") as f:
        f.write(INSTANCE_MAGIC + struct.pack("<II", w, h) + ids.astype("<u2").tobytes(order="C"))


def read_instances(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != INSTANCE_MAGIC:
        raise ValueError(f"{path}: not an INS1 file")
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 2 * w * h:
        raise ValueError(f"{path}: truncated instance payload")
    return np.frombuffer(raw, dtype="<u2", offset=12).reshape(h, w).astype(np.uint16)
