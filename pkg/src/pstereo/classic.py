"""Classical least-squares photometric stereo (the "L2" baseline).

Assumes Lambertian reflectance: per pixel, solve min ||L b - i||_2 over the
K intensity-normalized grayscale observations, where L stacks the calibrated
light directions.  The normal is b/|b| and the albedo |b|.  Solved through
the normal equations with a direct 3x3 inverse; pixels whose solution
degenerates are flagged by a zero albedo and the normal (0, 0, 1).
"""

from __future__ import annotations

import numpy as np

from .samples import NormalMap, PsSample

DET_GUARD = 1e-12


def _inv3(m: np.ndarray) -> np.ndarray:
    det = (
        m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
        - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
        + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0])
    )
    if abs(det) < DET_GUARD:
        raise ValueError(f"light directions are rank-deficient (det {det:.3g})")
    adj = np.empty((3, 3))
    adj[0, 0] = m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1]
    adj[0, 1] = m[0, 2] * m[2, 1] - m[0, 1] * m[2, 2]
    adj[0, 2] = m[0, 1] * m[1, 2] - m[0, 2] * m[1, 1]
    adj[1, 0] = m[1, 2] * m[2, 0] - m[1, 0] * m[2, 2]
    adj[1, 1] = m[0, 0] * m[2, 2] - m[0, 2] * m[2, 0]
    adj[1, 2] = m[0, 2] * m[1, 0] - m[0, 0] * m[1, 2]
    adj[2, 0] = m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]
    adj[2, 1] = m[0, 1] * m[2, 0] - m[0, 0] * m[2, 1]
    adj[2, 2] = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return adj / det


def l2_normals(sample: PsSample) -> tuple[NormalMap, np.ndarray]:
    """Least-squares normals and albedo for one sample.

    Observations are normalized by the per-channel light intensity and
    reduced to grayscale by an unweighted channel mean.  Returns a NormalMap
    carrying the sample mask and an (H, W) albedo array; degenerate pixels
    (vanishing albedo) come back as (0, 0, 1) with albedo 0.
    """
    if sample.k < 3:
        raise ValueError(f"least-squares needs K >= 3 lights, got {sample.k}")
    l_mat = sample.light_matrix()  # (K, 3)
    solver = _inv3(l_mat.T @ l_mat) @ l_mat.T  # (3, K); raises if rank < 3

    intens = sample.intensity_matrix()  # (K, C or 3)
    k, c, h, w = sample.images.shape
    scale = intens[:, :c] if c == intens.shape[1] else intens.mean(axis=1, keepdims=True)
    gray = (sample.images / scale[:, :, None, None]).mean(axis=1)  # (K, H, W)

    obs = gray.reshape(k, -1)[:, sample.mask.ravel()]  # (K, P)
    b = (solver @ obs).T  # (P, 3)
    albedo_px = np.linalg.norm(b, axis=1)
    good = albedo_px > DET_GUARD
    normals_px = np.zeros_like(b)
    normals_px[:, 2] = 1.0
    normals_px[good] = b[good] / albedo_px[good, None]
    albedo_px[~good] = 0.0

    values = np.zeros((h, w, 3))
    values[..., 2] = 1.0
    values[sample.mask] = normals_px
    albedo = np.zeros((h, w))
    albedo[sample.mask] = albedo_px
    return NormalMap(values, sample.mask.copy()), albedo
