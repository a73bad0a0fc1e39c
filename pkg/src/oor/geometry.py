"""Canonical-space conventions shared by every other module.

Matrices are row-major 3x3 numpy arrays. A 6D rotation is the first two
*columns* of the matrix, concatenated. An OOR sample maps a point of the
target object's scale-normalized space into the base object's instance
canonical space::

    x_tb = R @ (s_tb * x_hat) + t        x_b = s_b * x_hat
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, EmptyMesh

_DEGENERATE_TOL = 1e-12


def rot6d_to_matrix(a):
    """Gram-Schmidt a 6-vector (or a ``(..., 6)`` batch) into rotation matrices.

    Raises DegenerateInput when the first column vanishes or the two columns
    are parallel.
    """
    a = np.asarray(a, dtype=float)
    c1, c2 = a[..., 0:3], a[..., 3:6]
    n1 = np.linalg.norm(c1, axis=-1, keepdims=True)
    if np.any(n1 <= _DEGENERATE_TOL):
        raise DegenerateInput("first rotation column has (near) zero norm")
    x = c1 / n1
    y = c2 - np.sum(x * c2, axis=-1, keepdims=True) * x
    n2 = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(n2 <= _DEGENERATE_TOL):
        raise DegenerateInput("rotation columns are parallel")
    y = y / n2
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(r):
    r = np.asarray(r, dtype=float)
    return np.concatenate([r[..., :, 0], r[..., :, 1]], axis=-1)


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_rotation(rng, size=None):
    """Haar-uniform rotations via QR of a Gaussian matrix."""
    shape = () if size is None else (size,)
    g = rng.standard_normal(shape + (3, 3))
    q, r = np.linalg.qr(g)
    d = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    d[d == 0] = 1.0
    q = q * d[..., None, :]
    det = np.linalg.det(q)
    q[..., :, 2] *= np.sign(det)[..., None]
    return q


def is_rotation(r, tol=1e-9):
    r = np.asarray(r, dtype=float)
    return (
        r.shape == (3, 3)
        and np.allclose(r.T @ r, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


def project_to_so3(m):
    """Closest rotation in Frobenius norm (chordal projection); batched."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=float))
    det = np.linalg.det(u @ vt)
    d = np.ones(u.shape[:-1])
    d[..., 2] = np.sign(det)
    d[d == 0] = 1.0
    return (u * d[..., None, :]) @ vt


def rotation_angle_deg(r_a, r_b):
    """Geodesic angle between two rotations, in degrees."""
    c = (np.trace(np.asarray(r_a).T @ np.asarray(r_b)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


@dataclass
class OORSample:
    rot: np.ndarray
    trans: np.ndarray
    scale_tb: np.ndarray
    scale_b: np.ndarray

    def __post_init__(self):
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)
        self.scale_tb = np.asarray(self.scale_tb, dtype=float).reshape(3)
        self.scale_b = np.asarray(self.scale_b, dtype=float).reshape(3)

    def is_valid(self, tol=1e-9):
        return (
            is_rotation(self.rot, tol)
            and bool(np.all(self.scale_tb > 0))
            and bool(np.all(self.scale_b > 0))
            and bool(np.all(np.isfinite(self.trans)))
        )

    def to_state(self):
        return np.concatenate(
            [matrix_to_rot6d(self.rot), self.trans, self.scale_tb, self.scale_b]
        )

    @classmethod
    def from_state(cls, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (15,):
            raise ValueError(f"expected a 15-vector, got shape {v.shape}")
        return cls(rot6d_to_matrix(v[:6]), v[6:9], v[9:12], v[12:15])

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), np.ones(3), np.ones(3))


def states_to_samples(states):
    return [OORSample.from_state(v) for v in np.asarray(states, dtype=float)]


def samples_to_states(samples):
    return np.stack([s.to_state() for s in samples]) if samples else np.zeros((0, 15))


def transform_target_point(x_hat, o: OORSample):
    """Target scale-normalized point(s) -> base instance canonical space."""
    x_hat = np.asarray(x_hat, dtype=float)
    return (o.scale_tb * x_hat) @ o.rot.T + o.trans


def scale_base_point(x_hat, o: OORSample):
    return o.scale_b * np.asarray(x_hat, dtype=float)


@dataclass
class SimilarityTransform:
    """x -> s * R @ x + t with isotropic s > 0."""

    s: float = 1.0
    rot: np.ndarray = field(default_factory=lambda: np.eye(3))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.s = float(self.s)
        self.rot = np.asarray(self.rot, dtype=float).reshape(3, 3)
        self.trans = np.asarray(self.trans, dtype=float).reshape(3)
        if not self.s > 0:
            raise DegenerateInput(f"similarity scale must be positive, got {self.s}")

    def apply(self, points):
        return self.s * (np.asarray(points, dtype=float) @ self.rot.T) + self.trans

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.s * self.rot
        m[:3, 3] = self.trans
        return m

    def to_json(self):
        return {"s": self.s, "R": self.rot.reshape(-1).tolist(), "t": self.trans.tolist()}

    @classmethod
    def from_json(cls, d):
        return cls(d["s"], np.reshape(d["R"], (3, 3)), d["t"])


def compose_similarity(a: SimilarityTransform, b: SimilarityTransform) -> SimilarityTransform:
    """``a ∘ b``: apply b first, then a."""
    return SimilarityTransform(
        a.s * b.s, a.rot @ b.rot, a.s * (a.rot @ b.trans) + a.trans
    )


def invert_similarity(a: SimilarityTransform) -> SimilarityTransform:
    inv_s = 1.0 / a.s
    rt = a.rot.T
    return SimilarityTransform(inv_s, rt, -inv_s * (rt @ a.trans))


@dataclass
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        self.min = np.asarray(self.min, dtype=float).reshape(3)
        self.max = np.asarray(self.max, dtype=float).reshape(3)
        if np.any(self.min > self.max):
            raise ValueError("Aabb min must not exceed max")

    @property
    def extents(self):
        return self.max - self.min

    @property
    def center(self):
        return 0.5 * (self.min + self.max)

    @property
    def diagonal(self):
        return float(np.linalg.norm(self.extents))

    @classmethod
    def of_points(cls, points):
        p = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(p) == 0:
            raise EmptyMesh("cannot bound an empty point set")
        return cls(p.min(axis=0), p.max(axis=0))


def aabb_overlap_volume(a: Aabb, b: Aabb) -> float:
    d = np.minimum(a.max, b.max) - np.maximum(a.min, b.min)
    return float(np.prod(np.clip(d, 0.0, None)))


def aabb_of_placed(extents, rot, trans) -> Aabb:
    """Tight world AABB of a box with the given extents, rotated then translated."""
    extents = np.asarray(extents, dtype=float)
    if np.any(extents <= 0):
        raise ValueError("extents must be positive")
    # support function of the box along each world axis
    half = 0.5 * (np.abs(np.asarray(rot, dtype=float)) @ extents)
    trans = np.asarray(trans, dtype=float)
    return Aabb(trans - half, trans + half)


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def bbox(self) -> Aabb:
        return Aabb.of_points(self.vertices)

    def transformed(self, fn):
        return TriMesh(fn(self.vertices), self.faces.copy())

    def face_areas(self):
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def sample_surface(self, n, rng):
        """Area-weighted uniform samples on the triangle surface."""
        areas = self.face_areas()
        if len(areas) == 0 or areas.sum() <= 0:
            raise EmptyMesh("mesh has no surface area to sample")
        idx = rng.choice(len(areas), size=n, p=areas / areas.sum())
        u, v = rng.random(n), rng.random(n)
        flip = u + v > 1.0
        u[flip], v[flip] = 1.0 - u[flip], 1.0 - v[flip]
        tri = self.vertices[self.faces[idx]]
        return tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])


def canonicalize_mesh(m: TriMesh):
    """Center the tight bbox at the origin and scale its longest edge to 1.

    Returns the canonical mesh and the bbox of the *input* mesh.
    """
    if len(m.vertices) == 0:
        raise EmptyMesh("mesh has no vertices")
    box = m.bbox()
    longest = float(box.extents.max())
    if longest <= 0:
        raise EmptyMesh("mesh bbox is a single point")
    center = box.center
    return m.transformed(lambda v: (v - center) / longest), box


def box_mesh(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)) -> TriMesh:
    h = 0.5 * np.asarray(extents, dtype=float)
    corners = np.array(
        [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float
    )
    verts = corners * h + np.asarray(center, dtype=float)
    faces = [
        (0, 1, 3), (0, 3, 2), (4, 6, 7), (4, 7, 5),
        (0, 4, 5), (0, 5, 1), (2, 3, 7), (2, 7, 6),
        (0, 2, 6), (0, 6, 4), (1, 5, 7), (1, 7, 3),
    ]
    return TriMesh(verts, faces)


def read_obj(path) -> TriMesh:
    """Minimal OBJ reader: ``v`` and ``f`` records, polygons fan-triangulated."""
    verts, faces = [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    if not verts:
        raise EmptyMesh(f"{path}: no vertices")
    return TriMesh(np.array(verts), np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, meshes):
    """Write one or more (name, TriMesh) pairs into a single OBJ file."""
    offset = 0
    with open(path, "w") as fh:
        for name, mesh in meshes:
            fh.write(f"o {name}\n")
            for v in mesh.vertices:
                fh.write("v {:.17g} {:.17g} {:.17g}\n".format(*v))
            for f in mesh.faces:
                fh.write("f {} {} {}\n".format(*(f + 1 + offset)))
            offset += len(mesh.vertices)
