"""Desk-scale synthetic photometric-stereo renderer.

Orthographic camera looking down -z, directional lights, a metallic/rough
parametric BRDF with optional spatially-varying parameter maps, and cast
shadows via BVH shadow rays.  Direct illumination only: no inter-reflection
and no transmission, so glass-like materials are approximated by their
specular lobe.  Output samples carry exact ground-truth normals interpolated
from the mesh's analytic vertex normals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import bvh as _bvh
from .geomgen import TriMesh
from .samples import LightSample, NormalMap, PsSample

PARAM_RANGES = {
    "metallic": (0.0, 1.0),
    "roughness": (0.02, 1.0),
    "specular": (0.0, 1.0),
    "anisotropy": (0.0, 1.0),
}


class NoiseMap:
    """Smooth value noise over 3-space, mapped into [low, high].

    Two octaves of trilinearly interpolated lattice noise with smoothstep
    weights; deterministic for the generator state it was built from.
    """

    LATTICE = 8

    def __init__(self, rng, low: float, high: float, channels: int = 1,
                 cell: float = 0.35, octaves: int = 2):
        self.low = float(low)
        self.high = float(high)
        self.channels = channels
        self.cell = float(cell)
        n = self.LATTICE
        self.lattices = [rng.random((n, n, n, channels)) for _ in range(octaves)]
        self.offsets = [rng.uniform(0.0, n, 3) for _ in range(octaves)]

    def sample(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        n = self.LATTICE
        acc = np.zeros((len(pts), self.channels))
        weight_sum = 0.0
        for o, (lattice, offset) in enumerate(zip(self.lattices, self.offsets)):
            w = 0.5**o
            coords = pts / self.cell * (2.0**o) + offset
            base = np.floor(coords).astype(np.int64)
            frac = coords - base
            frac = frac * frac * (3.0 - 2.0 * frac)  # smoothstep
            val = np.zeros((len(pts), self.channels))
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        corner = lattice[(base[:, 0] + dx) % n, (base[:, 1] + dy) % n, (base[:, 2] + dz) % n]
                        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
                        wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
                        wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                        val += corner * (wx * wy * wz)[:, None]
            acc += w * val
            weight_sum += w
        out = self.low + (self.high - self.low) * acc / weight_sum
        return out[:, 0] if self.channels == 1 else out


@dataclass
class MaterialSpec:
    """Parametric reflectance; each field is a constant or a NoiseMap."""

    base_color: object  # (3,) array or 3-channel NoiseMap
    metallic: object = 0.0
    roughness: object = 0.5
    specular: object = 0.5
    anisotropy: object = 0.0
    category: str = "custom"

    def at(self, points: np.ndarray) -> dict:
        """Evaluate all parameters at surface points, clamped to their ranges."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        p = len(pts)

        def scalar(value, lo, hi):
            v = value.sample(pts) if isinstance(value, NoiseMap) else np.full(p, float(value))
            return np.clip(v, lo, hi)

        if isinstance(self.base_color, NoiseMap):
            base = np.clip(self.base_color.sample(pts), 0.0, 1.0)
        else:
            base = np.broadcast_to(np.clip(np.asarray(self.base_color, dtype=np.float64), 0, 1), (p, 3)).copy()
        return {
            "base_color": base,
            "metallic": scalar(self.metallic, *PARAM_RANGES["metallic"]),
            "roughness": scalar(self.roughness, *PARAM_RANGES["roughness"]),
            "specular": scalar(self.specular, *PARAM_RANGES["specular"]),
            "anisotropy": scalar(self.anisotropy, *PARAM_RANGES["anisotropy"]),
        }


@dataclass
class MaterialPolicy:
    """Category mix for material sampling plus the spatial-variation rate."""

    p_textured: float = 0.50
    p_glass: float = 0.17
    p_metal: float = 0.17
    p_random: float = 0.16
    p_spatial: float = 0.50

    def __post_init__(self):
        total = self.p_textured + self.p_glass + self.p_metal + self.p_random
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"category probabilities sum to {total}, expected 1")

    @property
    def probabilities(self):
        return np.array([self.p_textured, self.p_glass, self.p_metal, self.p_random])


CATEGORIES = ("textured", "glass_like", "metal", "random")


def sample_material(rng, policy: MaterialPolicy = MaterialPolicy()) -> MaterialSpec:
    """Draw one material according to the category policy.

    textured: procedural albedo and roughness maps.  glass_like: dark
    dielectric with a tight specular lobe.  metal: fully metallic, optionally
    anisotropic.  random: every parameter uniform over its range.  With
    probability ``p_spatial`` the scalar parameters of the drawn material are
    additionally replaced by spatially-varying maps.
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    cat = CATEGORIES[rng.choice(4, p=policy.probabilities)]
    if cat == "textured":
        mat = MaterialSpec(
            base_color=NoiseMap(rng, 0.05, 0.95, channels=3),
            metallic=0.0,
            roughness=NoiseMap(rng, 0.2, 0.9),
            specular=rng.uniform(0.3, 0.8),
            anisotropy=0.0,
            category=cat,
        )
    elif cat == "glass_like":
        mat = MaterialSpec(
            base_color=rng.uniform(0.0, 0.1, 3),
            metallic=0.0,
            roughness=rng.uniform(0.02, 0.1),
            specular=1.0,
            anisotropy=rng.uniform(0.0, 0.3),
            category=cat,
        )
    elif cat == "metal":
        mat = MaterialSpec(
            base_color=rng.uniform(0.3, 1.0, 3),
            metallic=1.0,
            roughness=rng.uniform(0.05, 0.5),
            specular=rng.uniform(0.0, 1.0),
            anisotropy=rng.uniform(0.0, 1.0) if rng.random() < 0.5 else 0.0,
            category=cat,
        )
    else:
        mat = MaterialSpec(
            base_color=rng.uniform(0.0, 1.0, 3),
            metallic=rng.uniform(0.0, 1.0),
            roughness=rng.uniform(0.02, 1.0),
            specular=rng.uniform(0.0, 1.0),
            anisotropy=rng.uniform(0.0, 1.0),
            category=cat,
        )
    if rng.random() < policy.p_spatial:
        mat = _spatialize(rng, mat)
    return mat


# Parameters eligible for spatial variation per category.  Parameters that
# define the category (metallic for metal/glass, specular for glass) stay
# fixed; range-limited ones keep their category range.
_SPATIAL_ELIGIBLE = {
    "textured": ("specular",),
    "glass_like": ("roughness",),
    "metal": ("roughness", "specular", "anisotropy"),
    "random": ("metallic", "roughness", "specular", "anisotropy"),
}

_SPATIAL_RANGES = {
    ("glass_like", "roughness"): (0.02, 0.1),
    ("metal", "roughness"): (0.05, 0.5),
}


def _spatialize(rng, mat: MaterialSpec) -> MaterialSpec:
    names = _SPATIAL_ELIGIBLE[mat.category]
    chosen = [n for n in names if rng.random() < 0.5]
    if not chosen:
        chosen = [names[int(rng.integers(len(names)))]]
    for name in chosen:
        lo, hi = _SPATIAL_RANGES.get((mat.category, name), PARAM_RANGES[name])
        setattr(mat, name, NoiseMap(rng, lo, hi))
    return mat


def sample_lights(rng, k: int = 100, max_polar_deg: float = 75.0,
                  intensity_range: tuple[float, float] = (0.3, 2.0)) -> list[LightSample]:
    """Directions uniform on the spherical cap z >= cos(max_polar), random intensities."""
    if k < 3:
        raise ValueError(f"need at least 3 lights, got {k}")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    z_min = math.cos(math.radians(max_polar_deg))
    lights = []
    for _ in range(k):
        z = rng.uniform(z_min, 1.0)
        phi = rng.uniform(0.0, 2.0 * math.pi)
        r = math.sqrt(max(0.0, 1.0 - z * z))
        d = np.array([r * math.cos(phi), r * math.sin(phi), z])
        d /= np.linalg.norm(d)
        lights.append(LightSample(d, rng.uniform(*intensity_range, size=3)))
    return lights


# ---------------------------------------------------------------------------
# BRDF


def _tangent_frame(n: np.ndarray):
    """Branchless orthonormal tangent/bitangent per normal (Duff et al.)."""
    sign = np.copysign(1.0, n[:, 2])
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)
    bt = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t, bt


def brdf_eval(mat: dict, n: np.ndarray, l: np.ndarray, v: np.ndarray) -> np.ndarray:
    """RGB reflectance factor per point for unit n, l, v.

    Diffuse lobe (1-metallic) * (1-0.08*specular) * base/pi plus an
    anisotropic GGX specular lobe D*G*F / (4 (n.l)(n.v)) with
    F0 = mix(0.08*specular, base_color, metallic).  The Fresnel tail weight
    mixes to zero with specular so metallic 0 / specular 0 is exactly
    Lambertian.  Grazing view directions (n.v <= 1e-6) return 0.
    """
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    l = np.asarray(l, dtype=np.float64).reshape(-1, 3)
    v = np.asarray(v, dtype=np.float64).reshape(-1, 3)
    p = len(n)
    out = np.zeros((p, 3))
    ndl = (n * l).sum(1)
    ndv = (n * v).sum(1)
    ok = (ndv > 1e-6) & (ndl > 0.0)
    if not ok.any():
        return out
    n, l, v, ndl, ndv = n[ok], l[ok], v[ok], ndl[ok], ndv[ok]
    base = mat["base_color"][ok]
    metallic = mat["metallic"][ok][:, None]
    roughness = mat["roughness"][ok]
    specular = mat["specular"][ok][:, None]
    aniso = mat["anisotropy"][ok]

    h = l + v
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    ndh = (n * h).sum(1)
    hdl = np.clip((h * l).sum(1), 0.0, 1.0)

    alpha = roughness**2
    aspect = np.sqrt(1.0 - 0.9 * aniso)
    ax = np.maximum(alpha / aspect, 1e-4)
    ay = np.maximum(alpha * aspect, 1e-4)
    t, bt = _tangent_frame(n)
    hx = (h * t).sum(1)
    hy = (h * bt).sum(1)
    d = 1.0 / (np.pi * ax * ay * ((hx / ax) ** 2 + (hy / ay) ** 2 + ndh**2) ** 2)

    def lam(w, wdn):
        wx = (w * t).sum(1)
        wy = (w * bt).sum(1)
        return 0.5 * (-1.0 + np.sqrt(1.0 + (ax**2 * wx**2 + ay**2 * wy**2) / wdn**2))

    g = 1.0 / (1.0 + lam(l, ndl) + lam(v, ndv))

    f0 = 0.08 * specular * (1.0 - metallic) + base * metallic
    f90 = metallic + (1.0 - metallic) * specular  # tail vanishes with specular
    fresnel = f0 + (f90 - f0) * ((1.0 - hdl) ** 5)[:, None]

    spec_lobe = (d * g / (4.0 * ndl * ndv))[:, None] * fresnel
    diffuse = (1.0 - metallic) * (1.0 - 0.08 * specular) * base / np.pi
    out[ok] = diffuse + spec_lobe
    return out


# ---------------------------------------------------------------------------
# Rendering


@dataclass
class RenderJob:
    mesh: TriMesh
    material: MaterialSpec
    lights: list[LightSample]
    resolution: tuple[int, int] = (128, 128)
    seed: int = 0
    window: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (-1.0, 1.0))

    def __post_init__(self):
        if len(self.lights) < 3:
            raise ValueError(f"a render job needs at least 3 lights, got {len(self.lights)}")
        if min(self.resolution) < 8:
            raise ValueError(f"resolution must be >= 8, got {self.resolution}")


def render(job: RenderJob) -> PsSample:
    """Render one photometric-stereo sample with exact ground-truth normals.

    Orthographic rays along -z; one image per light with radiance
    intensity * brdf * max(n.l, 0), zeroed where a shadow ray toward the
    light is occluded.  Background pixels are exactly 0 and masked out.
    """
    mesh = job.mesh
    if mesh.empty:
        raise ValueError("cannot render an empty mesh")
    h, w = job.resolution
    (x0, x1), (y0, y1) = job.window
    tree = _bvh.build_bvh(mesh)

    xs = x0 + (np.arange(w) + 0.5) * (x1 - x0) / w
    ys = y1 - (np.arange(h) + 0.5) * (y1 - y0) / h  # row 0 at the top
    px, py = np.meshgrid(xs, ys)
    z_start = mesh.vertices[:, 2].max() + 1.0
    origins = np.stack([px.ravel(), py.ravel(), np.full(h * w, z_start)], axis=1)
    dirs = np.broadcast_to(np.array([0.0, 0.0, -1.0]), (h * w, 3))

    t, tri, bu, bv = _bvh.intersect_batch(tree, origins, dirs)
    hit = tri >= 0
    mask = hit.reshape(h, w)

    images = np.zeros((len(job.lights), 3, h, w))
    normals = np.zeros((h, w, 3))
    if hit.any():
        fi = mesh.faces[tri[hit]]
        uu = bu[hit][:, None]
        vv = bv[hit][:, None]
        vn = mesh.normals
        sn = vn[fi[:, 0]] * (1.0 - uu - vv) + vn[fi[:, 1]] * uu + vn[fi[:, 2]] * vv
        sn /= np.linalg.norm(sn, axis=1, keepdims=True)
        pos = origins[hit] + t[hit, None] * dirs[hit]
        normals.reshape(-1, 3)[hit] = sn

        mat = job.material.at(pos)
        view = np.broadcast_to(np.array([0.0, 0.0, 1.0]), sn.shape)
        diag = float(np.linalg.norm(mesh.vertices.max(0) - mesh.vertices.min(0)))
        shadow_origins = pos + (1e-4 * diag) * sn

        flat = images.reshape(len(job.lights), 3, h * w)
        for li, light in enumerate(job.lights):
            ndl = sn @ light.direction
            lit = ndl > 0.0
            if not lit.any():
                continue
            ldirs = np.broadcast_to(light.direction, (int(lit.sum()), 3))
            occluded = _bvh.any_hit_batch(tree, shadow_origins[lit], ldirs)
            vis = lit.copy()
            vis[np.flatnonzero(lit)[occluded]] = False
            if not vis.any():
                continue
            sub = {k: val[vis] for k, val in mat.items()}
            f = brdf_eval(sub, sn[vis], np.broadcast_to(light.direction, (int(vis.sum()), 3)), view[vis])
            radiance = f * ndl[vis, None] * light.intensity[None, :]
            cols = np.flatnonzero(hit)[vis]
            flat[li][:, cols] = radiance.T

    gt = NormalMap(normals, mask.copy())
    return PsSample(images, list(job.lights), mask, gt, meta={"seed": job.seed})
