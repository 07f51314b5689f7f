"""Shared synthetic-sample helpers for the test suite."""

import numpy as np

from pstereo.samples import LightSample, NormalMap, PsSample


def random_unit_normals(rng, h, w, toward_camera=True, max_tilt_deg=None):
    if max_tilt_deg is not None:
        z = np.cos(np.deg2rad(rng.uniform(0.0, max_tilt_deg, (h, w))))
        phi = rng.uniform(0.0, 2 * np.pi, (h, w))
        r = np.sqrt(1.0 - z**2)
        return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    v = rng.standard_normal((h, w, 3))
    if toward_camera:
        v[..., 2] = np.abs(v[..., 2]) + 0.2
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return v


def random_lights(rng, k, max_polar_deg=60.0):
    zmin = np.cos(np.deg2rad(max_polar_deg))
    lights = []
    for _ in range(k):
        z = rng.uniform(zmin, 1.0)
        phi = rng.uniform(0.0, 2 * np.pi)
        r = np.sqrt(max(0.0, 1.0 - z * z))
        d = np.array([r * np.cos(phi), r * np.sin(phi), z])
        d /= np.linalg.norm(d)
        lights.append(LightSample(d, rng.uniform(0.5, 1.5, size=3)))
    return lights


def make_sample(seed=0, k=4, h=16, w=16, full_mask=True, lambertian=True):
    """Small synthetic PsSample; Lambertian images are consistent with gt.

    Normal tilts and light polar angles are capped so n.l > 0 everywhere:
    the clamped shading model is then exactly linear and the least-squares
    baseline recovers the ground truth.
    """
    rng = np.random.default_rng(seed)
    normals = random_unit_normals(rng, h, w, max_tilt_deg=50.0)
    lights = random_lights(rng, k, max_polar_deg=35.0)
    if full_mask:
        mask = np.ones((h, w), bool)
    else:
        yy, xx = np.mgrid[:h, :w]
        mask = (yy - h / 2) ** 2 + (xx - w / 2) ** 2 < (0.4 * min(h, w)) ** 2
    albedo = rng.uniform(0.3, 0.9, size=(h, w, 1))
    images = np.zeros((k, 3, h, w))
    for i, light in enumerate(lights):
        if lambertian:
            shade = np.clip(normals @ light.direction, 0.0, None)[..., None] * albedo / np.pi
        else:
            shade = rng.uniform(0.0, 1.0, size=(h, w, 1))
        images[i] = (shade * light.intensity).transpose(2, 0, 1)
    return PsSample(images, lights, mask, NormalMap(normals, mask.copy()))
