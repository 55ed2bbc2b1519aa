"""Analytic occluded-video generator and the dataset directory contract.

Scenes are built from exact geometry: a posed capsule body, a textured
box between the camera and the body, and a textured environment sphere.
Frames are produced by dense ray marching against the analytic signed
distance fields (an order of magnitude denser than the trained
renderer's quadrature), with bisection refinement at each surface
crossing, so the images carry no learned approximation.

Dataset layout (the single contract between generation, training, and
evaluation):

    frames/NNNN.png      occluded RGB
    masks/NNNN.png       visible-body mask M (body present AND unoccluded)
    gt_human/NNNN.png    RGB with the occluder removed
    silhouette/NNNN.png  full-body occupancy, occluded or not
    cameras.json         per-frame pinhole cameras
    poses.json           per-frame bone transforms
    spec.json            the generating SceneSpec (includes skeleton, R)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import deform, geometry, render


class SceneSpecError(ValueError):
    pass


@dataclass
class SceneSpec:
    """Everything needed to regenerate a dataset deterministically."""

    n_frames: int = 20
    width: int = 64
    height: int = 64
    body_radius: float = 1.2  # outer sphere R; body stays inside
    env_radius: float = 6.0
    camera_distance: float = 3.0
    focal: float = 110.0
    occluder_center: tuple = (-0.12, -0.3, -1.55)
    occluder_half: tuple = (0.34, 0.28, 0.12)
    occluder_enabled: bool = True
    arm_swing: float = 0.5
    root_sway: float = 0.1
    noise_sigma: float = 0.0
    march_steps: int = 1280  # 10x the evaluation renderer's 128 per ray

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["occluder_center"] = list(self.occluder_center)
        d["occluder_half"] = list(self.occluder_half)
        sk = deform.make_default_skeleton()
        d["skeleton"] = {
            "ends_a": sk.ends_a.tolist(),
            "ends_b": sk.ends_b.tolist(),
            "radii": sk.radii.tolist(),
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        spec = SceneSpec()
        for k, v in d.items():
            if k == "skeleton":
                continue
            if not hasattr(spec, k):
                raise SceneSpecError(f"unknown scene spec key {k!r}")
            cur = getattr(spec, k)
            if isinstance(cur, tuple):
                setattr(spec, k, tuple(float(x) for x in v))
            else:
                setattr(spec, k, type(cur)(v))
        return spec


def make_camera(spec: SceneSpec) -> geometry.Camera:
    """Static camera on the -z axis looking at the origin."""
    return geometry.Camera(
        fx=spec.focal,
        fy=spec.focal,
        cx=(spec.width - 1) / 2.0,
        cy=(spec.height - 1) / 2.0,
        width=spec.width,
        height=spec.height,
        rotation=np.eye(3),
        origin=(0.0, 0.0, -spec.camera_distance),
    )


def make_poses(spec: SceneSpec, skeleton: deform.Skeleton) -> list[deform.Pose]:
    """Deterministic trajectory: arm swings, a head nod, and a root sway."""
    poses = []
    for f in range(spec.n_frames):
        phase = 2.0 * np.pi * f / max(spec.n_frames, 1)
        swing = spec.arm_swing * np.sin(phase)
        nod = 0.12 * np.sin(phase + 0.7)
        root = deform.translation((spec.root_sway * np.sin(phase + 1.0), 0.0, 0.0))
        mats = [
            np.eye(4),  # torso
            deform.rotation_about(skeleton.ends_a[1], (1, 0, 0), nod),
            deform.rotation_about(skeleton.ends_a[2], (0, 0, 1), swing),
            deform.rotation_about(skeleton.ends_a[3], (0, 0, 1), -swing),
        ]
        poses.append(deform.Pose(np.stack([root @ m for m in mats])))
    return poses


# analytic fields -----------------------------------------------------------------


def box_sdf(points: np.ndarray, center, half) -> np.ndarray:
    """Exact signed distance to an axis-aligned box."""
    p = np.abs(np.asarray(points, dtype=np.float64) - np.asarray(center)) - np.asarray(half)
    outside = np.linalg.norm(np.maximum(p, 0.0), axis=-1)
    inside = np.minimum(np.max(p, axis=-1), 0.0)
    return outside + inside


def body_texture(x_canonical: np.ndarray) -> np.ndarray:
    """Smooth procedural color over canonical body coordinates."""
    x = np.asarray(x_canonical, dtype=np.float64)
    r = 0.5 + 0.35 * np.sin(4.0 * x[..., 0] + 2.0 * x[..., 1])
    g = 0.5 + 0.35 * np.sin(3.0 * x[..., 1] + 1.5 * x[..., 2] + 1.0)
    b = 0.5 + 0.35 * np.sin(5.0 * x[..., 2] + 2.5 * x[..., 0] + 2.0)
    return np.stack([r, g, b], axis=-1)


def occluder_texture(x: np.ndarray) -> np.ndarray:
    """Diagonal stripes over world coordinates."""
    x = np.asarray(x, dtype=np.float64)
    stripe = np.sin(25.0 * (x[..., 0] + x[..., 1] + 0.5 * x[..., 2])) > 0
    a = np.array([0.85, 0.7, 0.25])
    b = np.array([0.25, 0.18, 0.1])
    return np.where(stripe[..., None], a, b)


def env_texture(dirs: np.ndarray) -> np.ndarray:
    """Low-frequency color over view direction for the environment sphere."""
    d = np.asarray(dirs, dtype=np.float64)
    r = 0.45 + 0.25 * np.sin(3.0 * d[..., 0] + 1.0)
    g = 0.45 + 0.25 * np.sin(2.0 * d[..., 1] + 2.0)
    b = 0.55 + 0.25 * np.sin(2.0 * d[..., 2] + 4.0)
    return np.stack([r, g, b], axis=-1)


def analytic_sdf_scene(
    points: np.ndarray, spec: SceneSpec, skeleton: deform.Skeleton, pose: deform.Pose
):
    """Oracle geometry at (N, 3) points.

    Returns (s_body, inside_occluder, background_hit): the posed capsule
    union SDF, a flag for points inside the box, and a flag for points at
    or beyond the environment sphere.
    """
    s_body = deform.body_sdf(points, skeleton, pose)
    s_box = box_sdf(points, spec.occluder_center, spec.occluder_half)
    inside = s_box < 0 if spec.occluder_enabled else np.zeros(len(points), dtype=bool)
    beyond = np.linalg.norm(points, axis=-1) >= spec.env_radius
    return s_body, inside, beyond


def _first_crossing(sdf_values: np.ndarray, t_grid: np.ndarray):
    """First sign change per ray: (found, index of the bracket start)."""
    neg = sdf_values < 0
    first_neg = np.argmax(neg, axis=1)
    found = neg.any(axis=1)
    idx = np.maximum(first_neg - 1, 0)
    return found, idx


def _bisect(sdf_fn, origins, dirs, t_lo, t_hi, iters: int = 40):
    """Vectorized bisection of sdf_fn(o + t d) = 0 over [t_lo, t_hi]."""
    lo, hi = t_lo.copy(), t_hi.copy()
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        v = sdf_fn(origins + mid[:, None] * dirs)
        neg = v < 0
        hi = np.where(neg, mid, hi)
        lo = np.where(neg, lo, mid)
    return 0.5 * (lo + hi)


@dataclass
class FrameRecord:
    """One generated frame with its ground truth."""

    rgb: np.ndarray
    mask: np.ndarray
    gt_human: np.ndarray
    silhouette: np.ndarray
    camera: geometry.Camera
    pose: deform.Pose
    index: int


def render_frame(
    spec: SceneSpec,
    skeleton: deform.Skeleton,
    pose: deform.Pose,
    camera: geometry.Camera,
) -> FrameRecord:
    """March the analytic scene for every pixel of one frame."""
    h, w = spec.height, spec.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    bundle = geometry.generate_rays(camera, np.stack([cols.ravel(), rows.ravel()], axis=-1))
    o, d = bundle.origins, bundle.directions
    n = len(bundle)

    # environment hit is analytic (camera is inside the sphere)
    od = np.einsum("ij,ij->i", o, d)
    t_env = -od + np.sqrt(od**2 - np.einsum("ij,ij->i", o, o) + spec.env_radius**2)

    t_grid = geometry.EPS_NEAR + (np.arange(spec.march_steps) + 0.5) / spec.march_steps * (
        t_env[:, None] - geometry.EPS_NEAR
    )
    pts = o[:, None, :] + t_grid[..., None] * d[:, None, :]
    flat = pts.reshape(-1, 3)

    body_fn = lambda x: deform.body_sdf(x, skeleton, pose)
    s_body = body_fn(flat).reshape(n, -1)
    body_found, body_idx = _first_crossing(s_body, t_grid)
    rows_i = np.arange(n)
    t_body = np.full(n, np.inf)
    if body_found.any():
        sel = body_found
        t_lo = t_grid[rows_i[sel], body_idx[sel]]
        t_hi = t_grid[rows_i[sel], np.minimum(body_idx[sel] + 1, spec.march_steps - 1)]
        t_body[sel] = _bisect(body_fn, o[sel], d[sel], t_lo, t_hi)

    t_box = np.full(n, np.inf)
    if spec.occluder_enabled:
        box_fn = lambda x: box_sdf(x, spec.occluder_center, spec.occluder_half)
        s_box = box_fn(flat).reshape(n, -1)
        box_found, box_idx = _first_crossing(s_box, t_grid)
        if box_found.any():
            sel = box_found
            t_lo = t_grid[rows_i[sel], box_idx[sel]]
            t_hi = t_grid[rows_i[sel], np.minimum(box_idx[sel] + 1, spec.march_steps - 1)]
            t_box[sel] = _bisect(box_fn, o[sel], d[sel], t_lo, t_hi)

    # colors for each surface
    env_rgb = env_texture(d)
    body_rgb = np.zeros((n, 3))
    if body_found.any():
        hit = o[body_found] + t_body[body_found, None] * d[body_found]
        w_obs = deform.compute_weights(hit, skeleton, "observation", pose)
        x_c = deform.backward_skin(hit, pose, w_obs)
        body_rgb[body_found] = body_texture(x_c)
    box_rgb = np.zeros((n, 3))
    box_hit_mask = np.isfinite(t_box)
    if box_hit_mask.any():
        hit = o[box_hit_mask] + t_box[box_hit_mask, None] * d[box_hit_mask]
        box_rgb[box_hit_mask] = occluder_texture(hit)

    silhouette = body_found
    occluded = t_box < t_body  # box wins the depth test
    mask = silhouette & ~occluded

    rgb = env_rgb.copy()
    rgb[silhouette] = body_rgb[silhouette]
    rgb[occluded] = box_rgb[occluded]

    gt_human = env_rgb.copy()
    gt_human[silhouette] = body_rgb[silhouette]

    def plane(a, ch=3):
        return a.reshape(h, w, ch) if ch == 3 else a.reshape(h, w)

    return FrameRecord(
        rgb=np.clip(plane(rgb), 0.0, 1.0),
        mask=plane(mask, 1),
        gt_human=np.clip(plane(gt_human), 0.0, 1.0),
        silhouette=plane(silhouette, 1),
        camera=camera,
        pose=pose,
        index=0,
    )


def validate_spec(spec: SceneSpec, skeleton: deform.Skeleton, poses: list[deform.Pose]) -> None:
    """Reject specs whose geometry breaks the layering assumptions."""
    for name in ("n_frames", "width", "height", "march_steps"):
        if getattr(spec, name) < 1:
            raise SceneSpecError(f"{name} must be at least 1")
    if spec.focal <= 0 or spec.body_radius <= 0:
        raise SceneSpecError("focal and body_radius must be positive")
    if not spec.body_radius < spec.camera_distance < spec.env_radius:
        # camera must sit outside the body sphere but inside the backdrop
        raise SceneSpecError("need body_radius < camera_distance < env_radius")
    cam = np.array([0.0, 0.0, -spec.camera_distance])
    if spec.occluder_enabled:
        c = np.asarray(spec.occluder_center)
        half = np.asarray(spec.occluder_half)
        corners = c + np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        ) * half
        if np.any(np.linalg.norm(corners, axis=1) <= spec.body_radius):
            raise SceneSpecError("occluder intersects the body bounding sphere")
        if np.any(np.linalg.norm(corners - cam, axis=1) >= spec.camera_distance - spec.body_radius):
            raise SceneSpecError("occluder is not strictly between camera and body sphere")
    for i, pose in enumerate(poses):
        for ends in (skeleton.ends_a, skeleton.ends_b):
            posed = deform.posed_points(ends, pose.bones)
            reach = np.linalg.norm(posed, axis=1) + skeleton.radii
            if np.any(reach >= spec.body_radius):
                raise SceneSpecError(f"body leaves the bounding sphere at frame {i}")


def generate(spec: SceneSpec, seed: int, out_dir) -> dict:
    """Write a full dataset; returns a summary with the occlusion fraction."""
    out = Path(out_dir)
    skeleton = deform.make_default_skeleton()
    poses = make_poses(spec, skeleton)
    camera = make_camera(spec)
    validate_spec(spec, skeleton, poses)
    rng = np.random.default_rng(seed)

    for sub in ("frames", "masks", "gt_human", "silhouette"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    occluded_fracs = []
    for f in range(spec.n_frames):
        rec = render_frame(spec, skeleton, poses[f], camera)
        rgb = rec.rgb
        gt = rec.gt_human
        if spec.noise_sigma > 0:
            rgb = np.clip(rgb + rng.normal(0.0, spec.noise_sigma, rgb.shape), 0.0, 1.0)
        name = f"{f:04d}.png"
        render.write_png(out / "frames" / name, rgb)
        render.write_png(out / "masks" / name, rec.mask.astype(np.float64))
        render.write_png(out / "gt_human" / name, gt)
        render.write_png(out / "silhouette" / name, rec.silhouette.astype(np.float64))
        sil = rec.silhouette.sum()
        occluded_fracs.append(float((rec.silhouette & ~rec.mask).sum() / max(sil, 1)))

    geometry.save_cameras(out / "cameras.json", [camera] * spec.n_frames)
    deform.save_poses(out / "poses.json", poses)
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True))
    return {
        "frames": spec.n_frames,
        "mean_occluded_fraction": float(np.mean(occluded_fracs)),
        "per_frame_occluded_fraction": occluded_fracs,
    }


# dataset loading ------------------------------------------------------------------


class DatasetError(FileNotFoundError):
    pass


@dataclass
class Dataset:
    """In-memory view of a generated dataset directory."""

    spec: SceneSpec
    skeleton: deform.Skeleton
    cameras: list[geometry.Camera]
    poses: list[deform.Pose]
    frames: np.ndarray  # (F, H, W, 3)
    masks: np.ndarray  # (F, H, W) bool
    gt_human: np.ndarray
    silhouettes: np.ndarray  # (F, H, W) bool
    root: Path = field(default_factory=lambda: Path("."))

    @property
    def n_frames(self) -> int:
        return len(self.cameras)

    def bbox(self, frame: int, dilation: float = 0.1) -> tuple[int, int, int, int]:
        """Dilated bounding box (x0, y0, x1, y1) of the visible-body mask.

        Dilation is a fraction of the box diagonal; an empty mask falls
        back to the full image so training never starves.
        """
        m = self.masks[frame]
        ys, xs = np.nonzero(m)
        h, w = m.shape
        if len(xs) == 0:
            return 0, 0, w - 1, h - 1
        x0, x1 = int(xs.min()), int(xs.max())
        y0, y1 = int(ys.min()), int(ys.max())
        diag = float(np.hypot(x1 - x0, y1 - y0))
        pad = int(np.ceil(dilation * diag))
        return (
            max(0, x0 - pad),
            max(0, y0 - pad),
            min(w - 1, x1 + pad),
            min(h - 1, y1 + pad),
        )

    def sample_rays(self, frame: int, n: int, rng: np.random.Generator, dilation: float = 0.1):
        """Uniform pixel draws inside the dilated visible-body box.

        Returns (pixels (n,2), colors (n,3), mask values (n,)).
        """
        x0, y0, x1, y1 = self.bbox(frame, dilation)
        px = rng.integers(x0, x1 + 1, size=n)
        py = rng.integers(y0, y1 + 1, size=n)
        pixels = np.stack([px, py], axis=-1)
        colors = self.frames[frame, py, px]
        m = self.masks[frame, py, px].astype(np.float64)
        return pixels, colors, m


def load_dataset(root) -> Dataset:
    """Read a dataset directory written by :func:`generate`."""
    root = Path(root)
    spec_path = root / "spec.json"
    if not spec_path.exists():
        raise DatasetError(f"no spec.json under {root}")
    raw = json.loads(spec_path.read_text())
    spec = SceneSpec.from_dict(raw)
    sk_raw = raw.get("skeleton")
    if sk_raw is None:
        skeleton = deform.make_default_skeleton()
    else:
        skeleton = deform.Skeleton(sk_raw["ends_a"], sk_raw["ends_b"], sk_raw["radii"])
    cameras = geometry.load_cameras(root / "cameras.json")
    poses = deform.load_poses(root / "poses.json")

    def stack(sub, gray=False):
        arrs = []
        for f in range(len(cameras)):
            p = root / sub / f"{f:04d}.png"
            if not p.exists():
                raise DatasetError(f"missing {p}")
            arrs.append(render.read_png(p))
        out = np.stack(arrs)
        return out > 0.5 if gray else out

    return Dataset(
        spec=spec,
        skeleton=skeleton,
        cameras=cameras,
        poses=poses,
        frames=stack("frames"),
        masks=stack("masks", gray=True),
        gt_human=stack("gt_human"),
        silhouettes=stack("silhouette", gray=True),
        root=root,
    )
