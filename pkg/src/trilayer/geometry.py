"""Cameras, rays, spheres, and the layered scene parameterization.

World space is split by two concentric spheres centered at the origin:
an outer sphere of radius ``R`` enclosing the body and an inner sphere of
radius ``r`` inscribed to every camera's outermost rays. Points between a
camera and the inner sphere form the occlusion region; points beyond the
outer sphere form the background. Both unbounded regions are mapped to a
compact 4-tuple (unit direction plus a signed inverse-depth channel) so a
single coordinate network can represent them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


# near bound keeping the first occlusion sample off the pinhole itself
EPS_NEAR = 1e-3


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation`` maps camera axes to world axes."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        if self.width <= 0 or self.height <= 0:
            raise GeometryError("image dimensions must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-9:
            raise GeometryError(f"rotation is not orthonormal (deviation {err:.2e})")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation @ np.array([0.0, 0.0, 1.0])

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "origin": [float(v) for v in self.origin],
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            origin=np.array(d["origin"], dtype=np.float64),
        )


def load_cameras(path) -> list[Camera]:
    """Read cameras from JSON: a list of records or a single record.

    Record keys: fx, fy, cx, cy, width, height, rotation (row-major 9
    floats), origin (3 floats).
    """
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, dict):
        raw = raw.get("cameras", [raw])
    return [Camera.from_dict(d) for d in raw]


def save_cameras(path, cameras: list[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cameras], indent=1, sort_keys=True))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64).reshape(3))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise GeometryError(f"ray direction is not unit length (norm {n:.12f})")
        object.__setattr__(self, "direction", d)

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


@dataclass(frozen=True)
class SphereLayout:
    """Concentric spheres at the origin: inner radius ``r`` < outer ``R``."""

    r: float
    R: float

    def __post_init__(self):
        if not (0.0 < self.r < self.R):
            raise GeometryError(f"need 0 < r < R, got r={self.r}, R={self.R}")


@dataclass(frozen=True)
class LayerSample4:
    """Compactified coordinate: unit direction plus signed inverse depth.

    The channel is +R/|x| in (0,1] for background points and -r/|x| in
    [-1,0) for occlusion points, so the two layers never overlap in sign.
    """

    direction: np.ndarray
    channel: float


@dataclass(frozen=True)
class RaySegment:
    """Sample positions along one layer of a ray.

    ``delta`` holds inter-sample spacings; the final entry extends to the
    segment boundary (occlusion/foreground) or to a far cap (background).
    """

    layer: str
    t: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(-1))
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64).reshape(-1))
        if self.t.size and np.any(np.diff(self.t) <= 0):
            raise GeometryError("segment samples must be strictly increasing")
        if np.any(self.delta <= 0):
            raise GeometryError("segment spacings must be positive")

    @property
    def empty(self) -> bool:
        return self.t.size == 0


# ray-sphere intersection ----------------------------------------------------


def _sphere_roots(origins: np.ndarray, dirs: np.ndarray, radius: float):
    """Vectorized roots of |o + t d| = radius for unit d.

    Returns (disc, t0, t1); where disc < 0 the roots are the closest
    approach point (chord of zero width).
    """
    od = np.einsum("...i,...i->...", origins, dirs)
    disc = od * od - np.einsum("...i,...i->...", origins, origins) + radius * radius
    root = np.sqrt(np.maximum(disc, 0.0))
    return disc, -od - root, -od + root


def ray_sphere_intersections(ray: Ray, radius: float):
    """Intersections of a ray's full line with a sphere at the origin.

    Returns (count, t) with t sorted ascending; count 1 means tangency.
    """
    if radius <= 0:
        raise GeometryError("radius must be positive")
    disc, t0, t1 = _sphere_roots(ray.origin, ray.direction, radius)
    if disc < 0:
        return 0, np.zeros(0)
    if disc == 0:
        return 1, np.array([t0])
    return 2, np.array([t0, t1])


def find_inner_radius(
    corner_rays: list[Ray],
    R: float,
    tol: float | None = None,
    min_fraction: float = 1e-3,
) -> float:
    """Largest sphere radius still pierced by every outermost ray.

    Binary search over (0, R) for the smallest radius every supplied ray
    hits at least once on its forward half-line; the result is clamped
    below by ``min_fraction * R`` so a ray through the origin cannot
    collapse the occlusion region to nothing.
    """
    if not corner_rays:
        raise GeometryError("need at least one corner ray")
    if tol is None:
        tol = 1e-6 * R
    origins = np.stack([ray.origin for ray in corner_rays])
    dirs = np.stack([ray.direction for ray in corner_rays])

    def all_hit(radius: float) -> bool:
        disc, t0, t1 = _sphere_roots(origins, dirs, radius)
        return bool(np.all((disc >= 0) & (t1 > 0)))

    if not all_hit(R):
        raise GeometryError("occluder sphere would engulf foreground sphere")
    lo, hi = 0.0, R
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if all_hit(mid):
            hi = mid
        else:
            lo = mid
    return max(hi, min_fraction * R)


def occlusion_first_hit(ray: Ray, layout: SphereLayout) -> float:
    """Nearest forward intersection with the inner sphere."""
    disc, t0, t1 = _sphere_roots(ray.origin, ray.direction, layout.r)
    if disc < 0 or t1 <= 0:
        raise GeometryError("ray does not pierce the inner sphere (inscription violated)")
    return float(t0 if t0 > 0 else t1)


# layer parameterizations ------------------------------------------------------


def param_occlusion(x: np.ndarray, layout: SphereLayout, tol: float = 1e-9) -> LayerSample4:
    """Map an occlusion-region point to (unit direction, -r/|x|)."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    n = np.linalg.norm(x)
    if n < layout.r - tol:
        raise GeometryError(f"point inside inner sphere (|x|={n:.6g} < r={layout.r:.6g})")
    return LayerSample4(direction=x / n, channel=-layout.r / n)


def param_background(x: np.ndarray, layout: SphereLayout, tol: float = 1e-9) -> LayerSample4:
    """Map a background point to (unit direction, +R/|x|)."""
    x = np.asarray(x, dtype=np.float64).reshape(3)
    n = np.linalg.norm(x)
    if n < layout.R - tol:
        raise GeometryError(f"point inside outer sphere (|x|={n:.6g} < R={layout.R:.6g})")
    return LayerSample4(direction=x / n, channel=layout.R / n)


def param_points(points: np.ndarray, layout: SphereLayout, layer: str) -> np.ndarray:
    """Vectorized 4-tuples for an (N, 3) block of one layer's points."""
    points = np.asarray(points, dtype=np.float64)
    n = np.linalg.norm(points, axis=-1, keepdims=True)
    n = np.maximum(n, 1e-12)
    direction = points / n
    if layer == "occlusion":
        channel = -layout.r / n
    elif layer == "background":
        channel = layout.R / n
    else:
        raise GeometryError(f"unknown compactified layer {layer!r}")
    return np.concatenate([direction, channel], axis=-1)


# ray generation ---------------------------------------------------------------


class RayBundle:
    """Rays stored as stacked arrays; indexes and iterates as Ray objects."""

    def __init__(self, origins: np.ndarray, directions: np.ndarray):
        self.origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        if self.origins.shape != self.directions.shape:
            raise GeometryError("origin/direction shape mismatch")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, i: int) -> Ray:
        return Ray(self.origins[i], self.directions[i])

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def generate_rays(camera: Camera, pixels: np.ndarray) -> RayBundle:
    """Unit-direction rays through pixel centers of a pinhole camera.

    ``pixels`` is (N, 2) as (column, row); integer indices address pixel
    centers directly. Out-of-bounds pixels are rejected.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < -0.5) or np.any(u > camera.width - 0.5) or np.any(v < -0.5) or np.any(v > camera.height - 0.5):
        raise GeometryError("pixel index outside image bounds")
    d_cam = np.stack(
        [(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)],
        axis=-1,
    )
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.origin, d_world.shape).copy()
    return RayBundle(origins, d_world)


def frustum_corner_rays(camera: Camera) -> list[Ray]:
    """Rays through the four extreme pixel centers."""
    w, h = camera.width - 1, camera.height - 1
    corners = np.array([[0, 0], [w, 0], [0, h], [w, h]], dtype=np.float64)
    return list(generate_rays(camera, corners))


# stratified layer sampling ------------------------------------------------------


@dataclass
class LayerSamples:
    """Batched per-layer quadrature nodes for N rays.

    t and delta are (N, k); ``occ_width`` and ``fg_width`` are the layer
    interval lengths. A zero width marks a degenerate row whose samples
    carry zero measure and contribute nothing (non-strict mode only).
    """

    t_occ: np.ndarray
    d_occ: np.ndarray
    t_fg: np.ndarray
    d_fg: np.ndarray
    t_bg: np.ndarray
    d_bg: np.ndarray
    occ_width: np.ndarray
    fg_width: np.ndarray


def _stratified(n: int, count: int, rng) -> np.ndarray:
    """(n, count) stratified offsets in [0, 1); bin centers when rng is None."""
    if rng is None:
        u = np.full((n, count), 0.5)
    else:
        u = rng.random((n, count))
    return (np.arange(count) + u) / count


BG_FAR_DELTA = 1e10


def sample_layers(
    origins: np.ndarray,
    dirs: np.ndarray,
    layout: SphereLayout,
    n_occ: int,
    n_fg: int,
    n_bg: int,
    rng: np.random.Generator | None = None,
    strict: bool = True,
) -> LayerSamples:
    """Stratified quadrature nodes for all three layers of N rays at once.

    Occlusion: uniform in t over [EPS_NEAR, first inner-sphere hit].
    Foreground: uniform in t over the outer-sphere chord.
    Background: uniform in inverse depth, then converted to t, so samples
    thin out toward infinity at a controlled rate.

    Under ``strict`` (the renderer's path) a ray that fails to pierce the
    inner sphere ahead of the camera is an error, since the inscribed
    radius should have ruled that out. Non-strict mode instead gives such
    rows zero-measure samples and a zero ``occ_width``/``fg_width``.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = origins.shape[0]
    od = np.einsum("ij,ij->i", origins, dirs)
    oo = np.einsum("ij,ij->i", origins, origins)

    disc_r = od * od - oo + layout.r**2
    root_r = np.sqrt(np.maximum(disc_r, 0.0))
    t_pi = -od - root_r
    no_occ = (disc_r <= 0) | (t_pi <= EPS_NEAR)
    if strict and np.any(no_occ):
        raise GeometryError("a ray does not pierce the inner sphere ahead of the camera")
    occ_width = np.where(no_occ, 0.0, t_pi - EPS_NEAR)

    disc_R = od * od - oo + layout.R**2
    root_R = np.sqrt(np.maximum(disc_R, 0.0))
    t_in = -od - root_R
    t_out = -od + root_R
    fg_hit = (disc_R > 0) & (t_out > EPS_NEAR)
    t_in = np.where(fg_hit, np.maximum(t_in, EPS_NEAR), EPS_NEAR)
    t_out = np.where(fg_hit, t_out, EPS_NEAR)
    fg_width = np.where(fg_hit, t_out - t_in, 0.0)

    u_occ = _stratified(n, n_occ, rng)
    t_occ = EPS_NEAR + u_occ * occ_width[:, None]
    d_occ = np.diff(t_occ, axis=1)
    d_occ = np.concatenate([d_occ, (EPS_NEAR + occ_width[:, None] - t_occ[:, -1:])], axis=1)

    u_fg = _stratified(n, n_fg, rng)
    t_fg = t_in[:, None] + u_fg * fg_width[:, None]
    d_fg = np.diff(t_fg, axis=1)
    d_fg = np.concatenate([d_fg, (t_out[:, None] - t_fg[:, -1:])], axis=1)
    # zero-width intervals get a tiny uniform spacing so segment invariants
    # hold while the measure stays ~0
    for width, t, d, anchor in (
        (occ_width, t_occ, d_occ, np.full(n, EPS_NEAR)),
        (fg_width, t_fg, d_fg, t_out),
    ):
        collapsed = width <= 0
        if np.any(collapsed):
            tiny = 1e-12 * (1.0 + np.arange(t.shape[1]))
            t[collapsed] = anchor[collapsed, None] + tiny
            d[collapsed] = 1e-12

    # background: farthest valid inverse depth is R / perpendicular distance
    perp = np.sqrt(np.maximum(oo - od * od, 0.0))
    s_hi = np.minimum(1.0, layout.R / np.maximum(perp, layout.R))
    u_bg = _stratified(n, n_bg, rng)
    s = (1.0 - u_bg) * s_hi[:, None]
    s = np.maximum(s, 1e-9)
    rad = layout.R / s
    t_bg = -od[:, None] + np.sqrt(np.maximum(od[:, None] ** 2 - oo[:, None] + rad**2, 0.0))
    # repair rare non-monotone rows (deep clamp regions) before taking diffs
    bad = np.any(np.diff(t_bg, axis=1) <= 0, axis=1)
    if np.any(bad):
        t_bg[bad] = np.maximum.accumulate(t_bg[bad], axis=1) + 1e-9 * np.arange(n_bg)
    d_bg = np.diff(t_bg, axis=1)
    d_bg = np.concatenate([d_bg, np.full((n, 1), BG_FAR_DELTA)], axis=1)

    return LayerSamples(t_occ, d_occ, t_fg, d_fg, t_bg, d_bg, occ_width, fg_width)


def stratified_segments(
    ray: Ray,
    layout: SphereLayout,
    n_occ: int,
    n_fg: int,
    n_bg: int,
    rng_seed: int | np.random.Generator | None = None,
) -> tuple[RaySegment, RaySegment, RaySegment]:
    """Per-ray segment view over :func:`sample_layers`.

    Degenerate layers (a tangent or missing chord, or no inner-sphere hit)
    come back as empty segments rather than errors. ``rng_seed`` of None
    uses deterministic bin centers; an int seeds a fresh generator so
    repeated calls reproduce bit-identically.
    """
    if isinstance(rng_seed, (int, np.integer)):
        rng = np.random.default_rng(int(rng_seed))
    else:
        rng = rng_seed
    s = sample_layers(
        ray.origin[None], ray.direction[None], layout, n_occ, n_fg, n_bg, rng, strict=False
    )

    def seg(layer, width, t, d):
        if width <= 0:
            return RaySegment(layer, np.zeros(0), np.zeros(0))
        return RaySegment(layer, t, d)

    occ = seg("occlusion", s.occ_width[0], s.t_occ[0], s.d_occ[0])
    fg = seg("foreground", s.fg_width[0], s.t_fg[0], s.d_fg[0])
    bg = RaySegment("background", s.t_bg[0], s.d_bg[0])
    return occ, fg, bg
