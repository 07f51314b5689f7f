"""Procedural training geometry.

Blobby implicit surfaces built from sums of Gaussian potentials, triangulated
by marching cubes over a regular grid, with vertex normals taken from the
analytic field gradient (ground-truth labels should be as exact as possible).
Complex shapes come in through a small ASCII OBJ parser instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage import measure


@dataclass
class BlobField:
    """f(x) = sum_i a_i * exp(-|x - c_i|^2 / (2 s_i^2)); the surface is f = iso."""

    centers: np.ndarray  # (n, 3)
    amplitudes: np.ndarray  # (n,)
    sigmas: np.ndarray  # (n,)
    iso: float

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.amplitudes = np.atleast_1d(np.asarray(self.amplitudes, dtype=np.float64))
        self.sigmas = np.atleast_1d(np.asarray(self.sigmas, dtype=np.float64))
        if len(self.centers) == 0:
            raise ValueError("a blob field needs at least one blob")
        if np.any(self.sigmas <= 0) or np.any(self.amplitudes <= 0):
            raise ValueError("blob sigmas and amplitudes must be positive")

    def values(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        d2 = ((pts[:, None, :] - self.centers[None]) ** 2).sum(-1)  # (P, n)
        return (self.amplitudes * np.exp(-d2 / (2.0 * self.sigmas**2))).sum(-1)

    def gradients(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        diff = pts[:, None, :] - self.centers[None]  # (P, n, 3)
        d2 = (diff**2).sum(-1)
        weights = self.amplitudes * np.exp(-d2 / (2.0 * self.sigmas**2)) / self.sigmas**2
        return -(weights[:, :, None] * diff).sum(1)

    def normals(self, points: np.ndarray) -> np.ndarray:
        """Outward unit normals: -grad f, normalized (f decreases outward)."""
        g = -self.gradients(points)
        n = np.linalg.norm(g, axis=-1, keepdims=True)
        return np.divide(g, n, out=np.zeros_like(g), where=n > 1e-12)


@dataclass
class BlobPolicy:
    n_blobs: tuple[int, int] = (3, 12)
    center_box: float = 0.5  # centers drawn in [-box, box]^3
    sigma: tuple[float, float] = (0.15, 0.45)
    amplitude: tuple[float, float] = (0.5, 1.5)
    iso: float = 0.8


def sample_blob_field(rng, policy: BlobPolicy = BlobPolicy(), max_resamples: int = 64,
                      bounds: float = 1.0) -> BlobField:
    """Draw a blob field whose iso-surface is nonempty and closed inside the bounds box.

    Deterministic for a given seed/generator; redraws internally (up to
    ``max_resamples``) when the surface is empty or spills out of the box.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    lo, hi = policy.n_blobs
    probe = np.linspace(-bounds, bounds, 17)
    inner = np.stack(np.meshgrid(probe, probe, probe, indexing="ij"), -1).reshape(-1, 3)
    face = np.stack(np.meshgrid(probe, probe, indexing="ij"), -1).reshape(-1, 2)
    shell = []
    for axis in range(3):
        for side in (-bounds, bounds):
            pts = np.zeros((len(face), 3))
            pts[:, axis] = side
            pts[:, [a for a in range(3) if a != axis]] = face
            shell.append(pts)
    shell = np.concatenate(shell)

    for _ in range(max_resamples):
        n = int(rng.integers(lo, hi + 1))
        f = BlobField(
            centers=rng.uniform(-policy.center_box, policy.center_box, (n, 3)),
            amplitudes=rng.uniform(*policy.amplitude, n),
            sigmas=rng.uniform(*policy.sigma, n),
            iso=policy.iso,
        )
        if f.values(inner).max() > policy.iso and f.values(shell).max() < policy.iso:
            return f
    raise ValueError(f"no usable iso-surface after {max_resamples} resamples")


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3)
    normals: np.ndarray  # (V, 3) unit
    faces: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.normals) != len(self.vertices):
            raise ValueError("one normal per vertex required")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def _face_normals(vertices, faces):
    """Unnormalized face normals (cross products; length = 2x area)."""
    a, b, c = vertices[faces[:, 0]], vertices[faces[:, 1]], vertices[faces[:, 2]]
    return np.cross(b - a, c - a)


def _drop_degenerate(vertices, faces):
    if len(faces) == 0:
        return faces
    areas = np.linalg.norm(_face_normals(vertices, faces), axis=1)
    return faces[areas > 0.0]


def marching_cubes(f: BlobField, grid: int = 96, bounds: float = 1.0) -> TriMesh:
    """Triangulate the iso-surface of a blob field over [-bounds, bounds]^3.

    Vertex normals come from the analytic field gradient; a vertex sitting on
    a vanishing gradient falls back to the average of its face normals.
    """
    if grid < 8:
        raise ValueError(f"grid must be >= 8 per axis, got {grid}")
    axis = np.linspace(-bounds, bounds, grid)
    pts = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    volume = f.values(pts).reshape(grid, grid, grid)
    if volume.min() >= f.iso or volume.max() <= f.iso:
        z = np.zeros((0, 3))
        return TriMesh(z, z, np.zeros((0, 3), dtype=np.int64))
    spacing = 2.0 * bounds / (grid - 1)
    verts, faces, _, _ = measure.marching_cubes(volume, level=f.iso, spacing=(spacing,) * 3)
    verts = verts - bounds  # grid index 0 sits at -bounds
    faces = _drop_degenerate(verts, faces.astype(np.int64))

    grads = f.gradients(verts)
    gnorm = np.linalg.norm(grads, axis=1)
    normals = np.zeros_like(verts)
    ok = gnorm > 1e-12
    normals[ok] = -grads[ok] / gnorm[ok, None]
    if not ok.all():
        fallback = _vertex_normals_from_faces(verts, faces)
        normals[~ok] = fallback[~ok]
    return TriMesh(verts, normals, faces)


def _vertex_normals_from_faces(vertices, faces):
    """Area-weighted average of incident face normals, normalized."""
    acc = np.zeros_like(vertices)
    fn = _face_normals(vertices, faces)
    for i in range(3):
        np.add.at(acc, faces[:, i], fn)
    norms = np.linalg.norm(acc, axis=1, keepdims=True)
    return np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 1e-20)


# ---------------------------------------------------------------------------
# OBJ subset: v / vn / f (+ comments); faces may be polygons (fanned) and may
# carry v/vt/vn index triples.  Negative indices count from the end.


def load_obj(source) -> TriMesh:
    """Parse an ASCII OBJ (v, vn, f subset) into a TriMesh.

    Faces are triangulated by fanning.  When the file provides vn records that
    faces reference, those normals are used; otherwise area-weighted vertex
    normals are computed from the triangles.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        src = str(source)
        if "\n" in src or src.lstrip().startswith(("v ", "#", "vn ", "f ")):
            text = src
        else:
            with open(src, "r", encoding="utf-8") as fh:
                text = fh.read()

    vertices: list[tuple] = []
    vn_pool: list[tuple] = []
    corners: list[tuple[int, int]] = []  # (vertex index, vn index or -1) per face corner
    faces: list[tuple[int, int, int]] = []

    def err(lineno, msg):
        raise ValueError(f"OBJ line {lineno}: {msg}")

    def resolve(idx, pool_len, lineno, what):
        if idx == 0:
            err(lineno, f"{what} index 0 is invalid (OBJ indices are 1-based)")
        r = idx - 1 if idx > 0 else pool_len + idx
        if not 0 <= r < pool_len:
            err(lineno, f"{what} index {idx} out of range (have {pool_len})")
        return r

    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                err(lineno, f"vertex needs 3 coordinates, got {len(parts) - 1}")
            try:
                vertices.append(tuple(float(p) for p in parts[1:4]))
            except ValueError:
                err(lineno, f"bad vertex coordinate in {stripped!r}")
        elif tag == "vn":
            if len(parts) < 4:
                err(lineno, f"normal needs 3 components, got {len(parts) - 1}")
            try:
                vn_pool.append(tuple(float(p) for p in parts[1:4]))
            except ValueError:
                err(lineno, f"bad normal component in {stripped!r}")
        elif tag == "f":
            if len(parts) < 4:
                err(lineno, f"face needs at least 3 vertices, got {len(parts) - 1}")
            ids = []
            for token in parts[1:]:
                fields = token.split("/")
                try:
                    vi = resolve(int(fields[0]), len(vertices), lineno, "vertex")
                    ni = -1
                    if len(fields) >= 3 and fields[2]:
                        ni = resolve(int(fields[2]), len(vn_pool), lineno, "normal")
                except ValueError as e:
                    if "index" in str(e):
                        raise
                    err(lineno, f"bad face token {token!r}")
                ids.append((vi, ni))
            for a, b in zip(ids[1:], ids[2:]):  # fan triangulation
                faces.append((ids[0][0], a[0], b[0]))
                corners.extend([ids[0], a, b])
        elif tag in ("l", "p"):
            err(lineno, f"non-polygonal primitive {tag!r} not supported")
        elif tag in ("vt", "g", "o", "s", "usemtl", "mtllib"):
            continue  # ignored metadata
        else:
            err(lineno, f"unrecognized record {tag!r}")

    if not vertices:
        raise ValueError("OBJ contains no vertices")
    verts = np.array(vertices, dtype=np.float64)
    face_arr = _drop_degenerate(verts, np.array(faces, dtype=np.int64).reshape(-1, 3))

    used_vn = [c for c in corners if c[1] >= 0]
    if used_vn and vn_pool:
        acc = np.zeros_like(verts)
        vn_arr = np.array(vn_pool, dtype=np.float64)
        for vi, ni in used_vn:
            acc[vi] += vn_arr[ni]
        norms = np.linalg.norm(acc, axis=1, keepdims=True)
        normals = np.divide(acc, norms, out=np.zeros_like(acc), where=norms > 1e-20)
        missing = norms[:, 0] <= 1e-20
        if missing.any() and len(face_arr):
            normals[missing] = _vertex_normals_from_faces(verts, face_arr)[missing]
    else:
        normals = _vertex_normals_from_faces(verts, face_arr)
    return TriMesh(verts, normals, face_arr)


def sphere_radius(amplitude: float, sigma: float, iso: float) -> float:
    """Analytic iso-radius of a single blob: solve a*exp(-r^2/(2 s^2)) = iso."""
    if iso >= amplitude:
        raise ValueError("iso level at or above the amplitude gives no surface")
    return sigma * math.sqrt(2.0 * math.log(amplitude / iso))
