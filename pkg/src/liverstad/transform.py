"""Similarity transform in 3D: Euler rotation, translation and isotropic scale
about a fixed center.

A point ``p`` maps to ``center + scale * R @ (p - center) + translation`` with
``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTransformError


def euler_matrix(angles) -> np.ndarray:
    """Rotation matrix ``Rz(g) @ Ry(b) @ Rx(a)`` for ``angles = (a, b, g)``."""
    a, b, g = (float(x) for x in angles)
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rz = np.array([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def matrix_to_euler(rot) -> np.ndarray:
    """Inverse of :func:`euler_matrix` (beta restricted to [-pi/2, pi/2])."""
    rot = np.asarray(rot, dtype=float)
    sb = -rot[2, 0]
    beta = np.arcsin(np.clip(sb, -1.0, 1.0))
    if abs(sb) < 1.0 - 1e-12:
        alpha = np.arctan2(rot[2, 1], rot[2, 2])
        gamma = np.arctan2(rot[1, 0], rot[0, 0])
    else:
        # gimbal lock: fold everything into alpha
        gamma = 0.0
        alpha = np.arctan2(-rot[1, 2], rot[1, 1])
    return np.array([alpha, beta, gamma])


@dataclass(frozen=True)
class SimilarityTransform3D:
    euler_angles: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    scale: float = 1.0
    center: tuple = (0.0, 0.0, 0.0)
    _rot: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "euler_angles", tuple(float(x) for x in self.euler_angles))
        object.__setattr__(self, "translation", tuple(float(x) for x in self.translation))
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        object.__setattr__(self, "scale", float(self.scale))
        vals = self.euler_angles + self.translation + self.center + (self.scale,)
        if len(self.euler_angles) != 3 or len(self.translation) != 3 or len(self.center) != 3:
            raise InvalidTransformError("angles, translation and center need 3 components")
        if not np.all(np.isfinite(vals)):
            raise InvalidTransformError("transform parameters must be finite")
        if not self.scale > 0:
            raise InvalidTransformError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "_rot", euler_matrix(self.euler_angles))

    @classmethod
    def identity(cls, center=(0.0, 0.0, 0.0)) -> "SimilarityTransform3D":
        return cls(center=center)

    @property
    def rotation(self) -> np.ndarray:
        return self._rot.copy()

    @property
    def matrix(self) -> np.ndarray:
        """Linear part ``scale * R``."""
        return self.scale * self._rot

    @property
    def offset(self) -> np.ndarray:
        c = np.asarray(self.center)
        return c + np.asarray(self.translation) - self.matrix @ c

    def affine(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.matrix
        out[:3, 3] = self.offset
        return out

    def apply(self, points) -> np.ndarray:
        """Map an ``(..., 3)`` array of world points (mm)."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.matrix.T + self.offset

    def inverse(self) -> "SimilarityTransform3D":
        # inverse keeps the same center: p = c + R^T (q - c - t) / s
        rot_inv = self._rot.T
        s_inv = 1.0 / self.scale
        c = np.asarray(self.center)
        t_inv = -s_inv * rot_inv @ np.asarray(self.translation)
        return SimilarityTransform3D(matrix_to_euler(rot_inv), t_inv, s_inv, c)

    def compose(self, other: "SimilarityTransform3D") -> "SimilarityTransform3D":
        """Transform equivalent to applying ``other`` first, then ``self``.

        The result uses ``other.center`` as its center.
        """
        lin = self.matrix @ other.matrix
        off = self.matrix @ other.offset + self.offset
        scale = self.scale * other.scale
        rot = lin / scale
        c = np.asarray(other.center)
        translation = lin @ c + off - c
        return SimilarityTransform3D(matrix_to_euler(rot), translation, scale, c)

    def with_center(self, center) -> "SimilarityTransform3D":
        """Same mapping re-expressed about a different center."""
        c = np.asarray(center, dtype=float)
        translation = self.matrix @ c + self.offset - c
        return SimilarityTransform3D(self.euler_angles, translation, self.scale, c)

    def to_dict(self) -> dict:
        return {
            "euler_deg": [float(np.degrees(a)) for a in self.euler_angles],
            "translation_mm": list(self.translation),
            "scale": self.scale,
            "center_mm": list(self.center),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform3D":
        return cls(
            np.radians(d["euler_deg"]),
            d["translation_mm"],
            d["scale"],
            d.get("center_mm", (0.0, 0.0, 0.0)),
        )


def transform_point(transform: SimilarityTransform3D, p) -> np.ndarray:
    return transform.apply(p)


def rotation_angle_between(a: SimilarityTransform3D, b: SimilarityTransform3D) -> float:
    """Angle (radians) of the relative rotation ``Ra @ Rb^T``."""
    rel = a.rotation @ b.rotation.T
    cos = (np.trace(rel) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))
