"""Gaussian scaffolds: packing, sampling, occupancy decoding, meshing and shape metrics.

A scaffold is ``g`` oriented anisotropic Gaussians in a canonical object frame
where the object's bounding box is roughly the unit cube ``[-0.5, 0.5]^3``.
``lam`` holds per-axis variances (eigenvalues of the covariance).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import nn
from .autodiff import tensor as T
from .autodiff.tensor import Tensor, no_grad
from .neighbors import NearestIndex

PARAMS_PER_GAUSSIAN = 16
DEFAULT_G = 16

# analytic occupancy constants
OCC_SHARPNESS = 20.0
OCC_THRESHOLD = 0.3


def ellipsoid_radius(threshold: float = OCC_THRESHOLD, weight: float = 1.0) -> float:
    """Mahalanobis radius where an isolated component's weighted density meets ``threshold``."""
    return math.sqrt(2.0 * math.log(weight / threshold))


@dataclass
class GaussianScaffold:
    mu: np.ndarray   # (g, 3)
    U: np.ndarray    # (g, 3, 3), rows of U are not used; columns are principal axes
    lam: np.ndarray  # (g, 3) variances along the columns of U
    pi: np.ndarray   # (g,)

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        g = len(self.mu)
        self.U = np.asarray(self.U, dtype=np.float64).reshape(g, 3, 3)
        self.lam = np.asarray(self.lam, dtype=np.float64).reshape(g, 3)
        self.pi = np.asarray(self.pi, dtype=np.float64).reshape(g)

    @property
    def g(self) -> int:
        return len(self.mu)

    @classmethod
    def identity(cls, g: int = DEFAULT_G) -> GaussianScaffold:
        return cls(np.zeros((g, 3)), np.broadcast_to(np.eye(3), (g, 3, 3)).copy(), np.ones((g, 3)), np.zeros(g))

    def covariances(self) -> np.ndarray:
        return np.einsum("gij,gj,gkj->gik", self.U, self.lam, self.U)

    def weights(self) -> np.ndarray:
        """Component weights ``g * softmax(pi)`` (all ones when ``pi`` is uniform)."""
        e = np.exp(self.pi - self.pi.max())
        return self.g * e / e.sum()

    def permuted(self, perm) -> GaussianScaffold:
        return GaussianScaffold(self.mu[perm], self.U[perm], self.lam[perm], self.pi[perm])

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "U": self.U.tolist(), "lam": self.lam.tolist(), "pi": self.pi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> GaussianScaffold:
        return cls(np.array(d["mu"]), np.array(d["U"]), np.array(d["lam"]), np.array(d["pi"]))


# -- packing ------------------------------------------------------------------------------


def softplus_inverse(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def pack_shape_code(s: GaussianScaffold) -> np.ndarray:
    """Flatten to ``g * 16``: per Gaussian mu(3), U row-major(9), raw lam(3), pi(1).

    The raw scale entries are the softplus pre-images of the variances.
    """
    return np.concatenate([s.mu, s.U.reshape(s.g, 9), softplus_inverse(s.lam), s.pi[:, None]], axis=1).reshape(-1)


def unpack_shape_code(vec: np.ndarray, g: int = DEFAULT_G) -> GaussianScaffold:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.size != g * PARAMS_PER_GAUSSIAN:
        raise ValueError(f"shape code length {vec.size} != g*16 = {g * PARAMS_PER_GAUSSIAN}")
    rows = vec.reshape(g, PARAMS_PER_GAUSSIAN)
    m = rows[:, 3:12].reshape(g, 3, 3)
    w, _, vt = np.linalg.svd(m)
    return GaussianScaffold(rows[:, 0:3], w @ vt, softplus_np(rows[:, 12:15]), rows[:, 15])


def unpack_shape_code_tensor(vec: Tensor, g: int = DEFAULT_G) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Differentiable unpack of ``(..., g*16)`` codes into ``mu, U, lam, pi`` Tensors."""
    lead = vec.shape[:-1]
    rows = T.reshape(vec, (*lead, g, PARAMS_PER_GAUSSIAN))
    mu = rows[..., 0:3]
    u = T.polar(T.reshape(rows[..., 3:12], (*lead, g, 3, 3)))
    lam = T.softplus(rows[..., 12:15])
    pi = rows[..., 15]
    return mu, u, lam, pi


class ShapeCodeNormalizer:
    """Fixed affine map taking packed codes to roughly unit range for diffusion."""

    def __init__(self, g: int = DEFAULT_G, raw_scale_center: float = -5.0, raw_scale_spread: float = 2.5):
        shift = np.zeros(PARAMS_PER_GAUSSIAN)
        scale = np.ones(PARAMS_PER_GAUSSIAN)
        scale[0:3] = 0.5
        shift[12:15] = raw_scale_center
        scale[12:15] = raw_scale_spread
        self.g = g
        self.shift = np.tile(shift, g)
        self.scale = np.tile(scale, g)

    def normalize(self, code: np.ndarray) -> np.ndarray:
        return (np.asarray(code) - self.shift) / self.scale

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * self.scale + self.shift

    def denormalize_tensor(self, z: Tensor) -> Tensor:
        return T.affine(z, self.scale, self.shift)


# -- sampling -------------------------------------------------------------------------------


def sample_points(s: GaussianScaffold, m: int, rng: np.random.Generator, z: np.ndarray | None = None) -> np.ndarray:
    """``m`` draws per component from ``N(mu_j, U_j diag(lam_j) U_j^T)`` -> ``(g*m, 3)``.

    Passing ``z`` (``(g, m, 3)`` standard normals) fixes the draw.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if np.any(s.lam <= 0):
        raise ValueError("non-positive Gaussian scale")
    if z is None:
        z = rng.standard_normal((s.g, m, 3))
    pts = s.mu[:, None, :] + np.einsum("gij,gmj->gmi", s.U, z * np.sqrt(s.lam)[:, None, :])
    return pts.reshape(-1, 3)


# -- occupancy ------------------------------------------------------------------------------


def mahalanobis_sq(s: GaussianScaffold, x: np.ndarray) -> np.ndarray:
    """``(N, g)`` squared Mahalanobis distances of query points to each component."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    # whitened coordinates: (x - mu)^T U diag(lam)^-1/2
    wu = s.U / np.sqrt(s.lam)[:, None, :]
    proj = x @ wu.transpose(1, 0, 2).reshape(3, -1)
    local = proj.reshape(len(x), s.g, 3) - np.einsum("gd,gdk->gk", s.mu, wu)[None]
    return np.einsum("ngk,ngk->ng", local, local)


def analytic_field(s: GaussianScaffold, x: np.ndarray) -> np.ndarray:
    """Weighted sum of peak-normalised component densities (1 at each centre)."""
    return np.exp(-0.5 * mahalanobis_sq(s, x)) @ s.weights()


def analytic_logit(s: GaussianScaffold, x: np.ndarray, a: float = OCC_SHARPNESS, b: float = OCC_THRESHOLD):
    return a * (analytic_field(s, x) - b)


def union_occupancy(s: GaussianScaffold, x: np.ndarray, threshold: float = OCC_THRESHOLD) -> np.ndarray:
    """Ground-truth inside/outside: inside any component's iso-ellipsoid."""
    r2 = ellipsoid_radius(threshold) ** 2
    return (mahalanobis_sq(s, x) <= r2).any(axis=1).astype(np.float64)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class OccupancyDecoder(nn.Module):
    """Analytic mixture term plus a learned residual conditioned on per-Gaussian latents.

    The residual pools the latents with soft Mahalanobis weights at each query
    point, concatenates the point and the analytic field value, and runs a
    small MLP.  Its output layer starts at zero.
    """

    def __init__(self, latent_dim: int = 64, hidden: int = 64, rng: np.random.Generator | None = None,
                 a: float = OCC_SHARPNESS, b: float = OCC_THRESHOLD):
        rng = rng or np.random.default_rng(0)
        self.latent_dim = latent_dim
        self.a, self.b = a, b
        self.fc1 = nn.Linear(3 + latent_dim + 1, hidden, rng, std=0.1)
        self.fc2 = nn.Linear(hidden, hidden, rng, std=0.1)
        self.out = nn.Linear(hidden, 1, rng, zero=True)

    def features(self, s: GaussianScaffold, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m2 = mahalanobis_sq(s, x)
        logits = -0.5 * m2
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        field = np.exp(-0.5 * m2) @ s.weights()
        return w, field

    def logits(self, s: GaussianScaffold, latents: Tensor, x: np.ndarray) -> Tensor:
        """``(N,)`` occupancy logits for one shape; ``latents`` is ``(g, h)``."""
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        w, field = self.features(s, x)
        dt = latents.dtype
        pooled = T.matmul(Tensor(w.astype(dt)), latents)
        inp = T.concat([Tensor(x.astype(dt)), pooled, Tensor(field[:, None].astype(dt))], axis=1)
        h = T.silu(self.fc1(inp))
        h = T.silu(self.fc2(h))
        resid = T.reshape(self.out(h), (len(x),))
        return T.add(resid, Tensor((self.a * (field - self.b)).astype(dt)))

    def occupancy(self, s: GaussianScaffold, latents: np.ndarray | None, x: np.ndarray,
                  chunk: int = 32768) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
        if latents is None:
            return _sigmoid(analytic_logit(s, x, self.a, self.b))
        out = np.empty(len(x))
        lat = Tensor(np.asarray(latents, dtype=np.float32))
        with no_grad():
            for i in range(0, len(x), chunk):
                out[i:i + chunk] = _sigmoid(self.logits(s, lat, x[i:i + chunk]).data.astype(np.float64))
        return out


def occupancy(s: GaussianScaffold, query: np.ndarray, latents: np.ndarray | None = None,
              decoder: OccupancyDecoder | None = None) -> np.ndarray:
    """Occupancy in ``[0, 1]``; without a decoder only the analytic term is used."""
    if decoder is None or latents is None:
        a = decoder.a if decoder is not None else OCC_SHARPNESS
        b = decoder.b if decoder is not None else OCC_THRESHOLD
        return _sigmoid(analytic_logit(s, query, a, b))
    return decoder.occupancy(s, latents, query)


# -- meshes -----------------------------------------------------------------------------------


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for f in self.faces:
            for a, b in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                key = (int(min(a, b)), int(max(a, b)))
                counts[key] = counts.get(key, 0) + 1
        return counts

    def is_watertight(self) -> bool:
        return not self.is_empty and all(c == 2 for c in self.edge_counts().values())

    def transformed(self, matrix: np.ndarray) -> Mesh:
        v = self.vertices @ matrix[:3, :3].T + matrix[:3, 3]
        return Mesh(v, self.faces.copy())


def grid_points(res: int, lo: float = -0.6, hi: float = 0.6) -> np.ndarray:
    """``(res^3, 3)`` lattice points, x fastest."""
    ax = np.linspace(lo, hi, res)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def field_to_grid(values: np.ndarray, res: int) -> np.ndarray:
    """Reshape x-fastest samples to an ``[x, y, z]``-indexed grid."""
    return np.asarray(values).reshape(res, res, res).transpose(2, 1, 0)


def marching_cubes(field: np.ndarray, iso: float = 0.5, lo: float = -0.6, hi: float = 0.6) -> Mesh:
    """Triangulate the ``iso`` level set of an ``[x, y, z]``-indexed grid spanning ``[lo, hi]^3``.

    The grid is padded with an outside layer so every surface closes.
    """
    from skimage import measure

    field = np.asarray(field, dtype=np.float64)
    res = field.shape[0]
    if field.ndim != 3 or res < 2:
        raise ValueError("marching_cubes needs a 3-D grid with res >= 2")
    if not field.max() > iso:
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    outside = min(field.min(), iso) - 1.0
    padded = np.pad(field, 1, constant_values=outside)
    step = (hi - lo) / (res - 1)
    verts, faces, _, _ = measure.marching_cubes(padded, iso, spacing=(step, step, step), method="lewiner")
    verts = verts + (lo - step)
    mesh = Mesh(verts, faces)
    keep = mesh.face_areas() > 1e-14
    return Mesh(verts, faces[keep])


def decode_mesh(s: GaussianScaffold, latents: np.ndarray | None = None, decoder: OccupancyDecoder | None = None,
                res: int = 64, lo: float = -0.6, hi: float = 0.6) -> Mesh:
    pts = grid_points(res, lo, hi)
    occ = occupancy(s, pts, latents, decoder)
    return marching_cubes(field_to_grid(occ, res), 0.5, lo, hi)


def union_mesh(s: GaussianScaffold, res: int = 64, lo: float = -0.6, hi: float = 0.6) -> Mesh:
    """Mesh of the ground-truth union-of-ellipsoids shape."""
    pts = grid_points(res, lo, hi)
    r2 = ellipsoid_radius() ** 2
    # signed-ish field: 1 - min Mahalanobis^2 / r^2 crosses 0 on the union surface
    f = 1.0 - mahalanobis_sq(s, pts).min(axis=1) / r2
    return marching_cubes(field_to_grid(f, res), 0.0, lo, hi)


def surface_sample(mesh: Mesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    if n == 0:
        return np.zeros((0, 3))
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero total area")
    tri = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    v = mesh.vertices[mesh.faces[tri]]
    return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


# -- metrics ------------------------------------------------------------------------------------


def chamfer_distance(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric Chamfer: average of the two mean squared nearest-neighbour distances."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("chamfer_distance on an empty point set")
    d_pq, _ = NearestIndex(q).query(p)
    d_qp, _ = NearestIndex(p).query(q)
    return 0.5 * (float(np.mean(d_pq)) + float(np.mean(d_qp)))


def chamfer_distance_brute(p: np.ndarray, q: np.ndarray) -> float:
    from .neighbors import nearest_brute

    d_pq, _ = nearest_brute(p, q)
    d_qp, _ = nearest_brute(q, p)
    return 0.5 * (float(np.mean(d_pq)) + float(np.mean(d_qp)))


def f_score(p: np.ndarray, q: np.ndarray, tau: float = 0.05) -> float:
    """Harmonic mean of precision and recall at distance ``tau``, in percent."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(q) == 0:
        raise ValueError("f_score on an empty point set")
    d_pq, _ = NearestIndex(q).query(p)
    d_qp, _ = NearestIndex(p).query(q)
    precision = float(np.mean(np.sqrt(d_pq) < tau))
    recall = float(np.mean(np.sqrt(d_qp) < tau))
    if precision + recall == 0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


# -- file formats --------------------------------------------------------------------------------


def write_obj(path: str | Path, mesh: Mesh) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> Mesh:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(v) for v in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    return Mesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_ply(path: str | Path, mesh: Mesh) -> None:
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    body = [np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes()]
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.empty(len(mesh.faces), dtype=face_dtype)
    faces["n"] = 3
    faces["idx"] = mesh.faces
    body.append(faces.tobytes())
    Path(path).write_bytes(header.encode("ascii") + b"".join(body))


def read_ply(path: str | Path) -> Mesh:
    raw = Path(path).read_bytes()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    header = raw[:end].decode("ascii").splitlines()
    nv = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
    nf = int(next(h for h in header if h.startswith("element face")).split()[-1])
    verts = np.frombuffer(raw, dtype="<f4", count=nv * 3, offset=end).reshape(nv, 3)
    face_dtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
    faces = np.frombuffer(raw, dtype=face_dtype, count=nf, offset=end + nv * 12)
    return Mesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


OCC_MAGIC = b"OCC1"


def write_occupancy_grid(path: str | Path, grid: np.ndarray) -> None:
    """``OCC1`` + 3 x u32 extents + float32 values, x fastest (``grid`` indexed ``[x, y, z]``)."""
    grid = np.asarray(grid)
    head = OCC_MAGIC + struct.pack("<3I", *grid.shape)
    Path(path).write_bytes(head + np.asarray(grid, dtype="<f4").ravel(order="F").tobytes())


def read_occupancy_grid(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != OCC_MAGIC:
        raise ValueError(f"{path}: not an OCC1 grid")
    shape = struct.unpack_from("<3I", raw, 4)
    vals = np.frombuffer(raw, dtype="<f4", offset=16, count=int(np.prod(shape)))
    return vals.reshape(shape, order="F").astype(np.float32)
