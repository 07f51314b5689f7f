"""Domain containers shared across the pipeline: lights, observation sets, normal maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class LightSample:
    """One calibrated directional light: unit direction (z toward the camera) and RGB intensity."""

    direction: np.ndarray  # (3,) unit vector, z > 0
    intensity: np.ndarray  # (3,) positive per-channel scale

    def __post_init__(self):
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"light direction norm {n} is not 1 (tolerance 1e-9)")
        if self.direction[2] <= 0:
            raise ValueError(f"light direction must have z > 0, got {self.direction}")
        if np.any(self.intensity <= 0):
            raise ValueError(f"light intensity must be positive, got {self.intensity}")


@dataclass
class NormalMap:
    """Per-pixel unit 3-vectors over a masked H x W grid."""

    values: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError(f"normal map values must be (H,W,3), got {self.values.shape}")
        if self.mask.shape != self.values.shape[:2]:
            raise ValueError(
                f"normal map mask {self.mask.shape} does not match values {self.values.shape[:2]}"
            )
        if self.mask.any():
            norms = np.linalg.norm(self.values[self.mask], axis=-1)
            bad = np.abs(norms - 1.0).max()
            if bad > 1e-5:
                raise ValueError(f"masked-in normals deviate from unit length by {bad:.3g}")

    @property
    def shape(self):
        return self.mask.shape


@dataclass
class PsSample:
    """One photometric-stereo observation set.

    K linear-radiance images stacked as (K, C, H, W), the K calibrated lights
    that produced them, a boolean foreground mask and (for synthetic data)
    the ground-truth normal map.
    """

    images: np.ndarray  # (K, C, H, W) linear radiance
    lights: list[LightSample]
    mask: np.ndarray  # (H, W) bool
    gt_normals: NormalMap | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (K,C,H,W), got {self.images.shape}")
        k, _, h, w = self.images.shape
        if k < 3:
            raise ValueError(f"a sample needs at least 3 lights, got {k}")
        if len(self.lights) != k:
            raise ValueError(f"{k} images but {len(self.lights)} lights")
        if self.mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mask.shape} does not match images {(h, w)}")
        if self.gt_normals is not None and self.gt_normals.shape != (h, w):
            raise ValueError(
                f"ground-truth shape {self.gt_normals.shape} does not match images {(h, w)}"
            )

    @property
    def k(self) -> int:
        return self.images.shape[0]

    @property
    def resolution(self):
        return self.images.shape[2:]

    def light_matrix(self) -> np.ndarray:
        """(K, 3) stack of light directions."""
        return np.stack([l.direction for l in self.lights])

    def intensity_matrix(self) -> np.ndarray:
        """(K, 3) stack of per-channel intensities."""
        return np.stack([l.intensity for l in self.lights])
