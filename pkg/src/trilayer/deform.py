"""Articulated deformation between canonical and observation space.

The body is a small capsule rig (torso, head, two arms). Capsules serve
double duty: their union is the proxy body surface, and distance to them
drives the skinning weights. A point moves with the blended bone
transforms, and the blend is inverted to pull observation-space ray
samples back into the canonical frame where the body network lives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DeformError(ValueError):
    pass


WEIGHT_TEMPERATURE = 0.05  # world units; sharpness of the capsule softmax
COND_LIMIT = 1e8


def _check_rigid(mat: np.ndarray, tol: float = 1e-9) -> None:
    rot = mat[:3, :3]
    if np.abs(rot @ rot.T - np.eye(3)).max() > tol:
        raise DeformError("transform rotation block is not orthonormal")
    if abs(np.linalg.det(rot) - 1.0) > 1e-6:
        raise DeformError("transform is not orientation preserving")
    if np.abs(mat[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > tol:
        raise DeformError("transform bottom row must be [0,0,0,1]")


@dataclass(frozen=True)
class Skeleton:
    """Capsule bones in the canonical frame.

    ends_a/ends_b are (B, 3) segment endpoints; radii is (B,).
    """

    ends_a: np.ndarray
    ends_b: np.ndarray
    radii: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ends_a", np.asarray(self.ends_a, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "ends_b", np.asarray(self.ends_b, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "radii", np.asarray(self.radii, dtype=np.float64).reshape(-1))
        if not (len(self.ends_a) == len(self.ends_b) == len(self.radii)):
            raise DeformError("bone arrays disagree on bone count")
        if len(self.radii) == 0:
            raise DeformError("skeleton must have at least one bone")
        if np.any(self.radii <= 0):
            raise DeformError("capsule radii must be positive")

    @property
    def n_bones(self) -> int:
        return len(self.radii)


@dataclass(frozen=True)
class Pose:
    """Per-bone rigid transforms, canonical frame to observation frame."""

    bones: np.ndarray  # (B, 4, 4)

    def __post_init__(self):
        mats = np.asarray(self.bones, dtype=np.float64).reshape(-1, 4, 4)
        for m in mats:
            _check_rigid(m)
        object.__setattr__(self, "bones", mats)

    @property
    def n_bones(self) -> int:
        return self.bones.shape[0]

    @staticmethod
    def identity(n_bones: int) -> "Pose":
        return Pose(np.broadcast_to(np.eye(4), (n_bones, 4, 4)).copy())


def make_default_skeleton() -> Skeleton:
    """Four-bone rig: torso, head, two arms; fits inside a unit-ish ball."""
    return Skeleton(
        ends_a=[
            [0.0, -0.35, 0.0],  # torso bottom
            [0.0, 0.32, 0.0],  # neck
            [-0.16, 0.22, 0.0],  # left shoulder
            [0.16, 0.22, 0.0],  # right shoulder
        ],
        ends_b=[
            [0.0, 0.25, 0.0],
            [0.0, 0.52, 0.0],
            [-0.60, 0.05, 0.0],
            [0.60, 0.05, 0.0],
        ],
        radii=[0.20, 0.12, 0.065, 0.065],
    )


def rotation_about(pivot, axis, angle: float) -> np.ndarray:
    """Rigid 4x4 rotating by ``angle`` around an axis line through ``pivot``."""
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    axis = np.asarray(axis, dtype=np.float64).reshape(3)
    axis = axis / np.linalg.norm(axis)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = pivot - rot @ pivot
    return m


def translation(offset) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = np.asarray(offset, dtype=np.float64).reshape(3)
    return m


# capsule distance ------------------------------------------------------------


def capsule_distances(points: np.ndarray, ends_a, ends_b, radii) -> np.ndarray:
    """Signed distance from (N, 3) points to each capsule, shape (N, B)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    a = np.asarray(ends_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(ends_b, dtype=np.float64).reshape(-1, 3)
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    ab = b - a  # (B, 3)
    denom = np.maximum(np.einsum("bi,bi->b", ab, ab), 1e-18)
    rel = points[:, None, :] - a[None, :, :]  # (N, B, 3)
    tt = np.clip(np.einsum("nbi,bi->nb", rel, ab) / denom, 0.0, 1.0)
    closest = a[None] + tt[..., None] * ab[None]
    dist = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    return dist - radii[None, :]


def body_sdf(points: np.ndarray, skeleton: Skeleton, pose: Pose | None = None) -> np.ndarray:
    """Union signed distance of the capsule body, optionally posed."""
    if pose is None:
        a, b = skeleton.ends_a, skeleton.ends_b
    else:
        a = posed_points(skeleton.ends_a, pose.bones)
        b = posed_points(skeleton.ends_b, pose.bones)
    return capsule_distances(points, a, b, skeleton.radii).min(axis=1)


def posed_points(pts: np.ndarray, bones: np.ndarray) -> np.ndarray:
    """Apply bone i's transform to point i (endpoint arrays follow their bone)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    out = np.einsum("bij,bj->bi", bones[:, :3, :3], pts) + bones[:, :3, 3]
    return out


# skinning ---------------------------------------------------------------------


def compute_weights(
    points: np.ndarray,
    skeleton: Skeleton,
    pose_space: str = "canonical",
    pose: Pose | None = None,
    temperature: float = WEIGHT_TEMPERATURE,
) -> np.ndarray:
    """Capsule-distance softmax weights, shape (N, B); rows sum to one.

    ``pose_space="observation"`` measures distances against the posed
    capsules and requires ``pose``.
    """
    if pose_space == "canonical":
        a, b = skeleton.ends_a, skeleton.ends_b
    elif pose_space == "observation":
        if pose is None:
            raise DeformError("observation-space weights need a pose")
        a = posed_points(skeleton.ends_a, pose.bones)
        b = posed_points(skeleton.ends_b, pose.bones)
    else:
        raise DeformError(f"unknown pose space {pose_space!r}")
    d = capsule_distances(points, a, b, skeleton.radii)
    logits = -d / temperature
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def blend_matrices(weights: np.ndarray, pose: Pose) -> np.ndarray:
    """Per-point blended bone transform, shape (N, 4, 4)."""
    weights = np.asarray(weights, dtype=np.float64)
    return np.einsum("nb,bij->nij", weights, pose.bones)


def forward_skin(x_c: np.ndarray, pose: Pose, weights: np.ndarray) -> np.ndarray:
    """Canonical points to observation space via the weighted bone blend."""
    x_c = np.asarray(x_c, dtype=np.float64).reshape(-1, 3)
    blend = blend_matrices(weights, pose)
    return np.einsum("nij,nj->ni", blend[:, :3, :3], x_c) + blend[:, :3, 3]


def backward_skin(x_o: np.ndarray, pose: Pose, weights_o: np.ndarray) -> np.ndarray:
    """Observation points back to canonical space by inverting the blend.

    Raises when any per-point blend matrix is close to singular.
    """
    x_o = np.asarray(x_o, dtype=np.float64).reshape(-1, 3)
    blend = blend_matrices(weights_o, pose)
    cond = np.linalg.cond(blend)
    worst = float(np.max(cond))
    if not np.isfinite(worst) or worst > COND_LIMIT:
        raise DeformError(f"near-singular skinning blend (condition estimate {worst:.3e})")
    inv = np.linalg.inv(blend)
    return np.einsum("nij,nj->ni", inv[:, :3, :3], x_o) + inv[:, :3, 3]


# pose files ---------------------------------------------------------------------


def load_poses(path) -> list[Pose]:
    """Read per-frame poses: JSON list of frames, each a list of row-major 4x4."""
    raw = json.loads(Path(path).read_text())
    poses = []
    for frame in raw:
        mats = [np.array(m, dtype=np.float64).reshape(4, 4) for m in frame]
        poses.append(Pose(np.stack(mats)))
    return poses


def save_poses(path, poses: list[Pose]) -> None:
    out = [[[float(v) for v in m.ravel()] for m in p.bones] for p in poses]
    Path(path).write_text(json.dumps(out))
