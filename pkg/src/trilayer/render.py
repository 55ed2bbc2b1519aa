"""SDF-to-density transform, quadrature, and layer composition.

Each layer is integrated independently with the same alpha-compositing
quadrature, then the three premultiplied colors are blended front to
back: occlusion first, body second, background last. Disabling the
occlusion layer reduces the blend exactly (bitwise) to the two-layer
form, which is what the ablation baseline relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import deform, geometry
from .autodiff import Tensor


@dataclass
class DensityParams:
    """Laplace scale for the SDF-to-density transform."""

    beta: float | Tensor
    trainable: bool = False

    def __post_init__(self):
        b = self.beta.data if isinstance(self.beta, Tensor) else self.beta
        if np.any(np.asarray(b) <= 0):
            raise ValueError("density scale beta must be positive")


def sdf_to_density(s, params: DensityParams):
    """Density from signed distance: CDF of a zero-mean Laplace over -s.

    sigma = (1/beta) * Psi_beta(-s); ranges over (0, 1/beta), hitting
    1/(2*beta) exactly at the surface.
    """
    s = ad.as_tensor(s)
    beta = params.beta if isinstance(params.beta, Tensor) else Tensor(params.beta)
    # exp(-|s|/beta) keeps both CDF branches overflow-free
    decay = ad.exp(-ad.absolute(s) / beta)
    inside = 1.0 - 0.5 * decay
    outside = 0.5 * decay
    return ad.where(s.data < 0, inside, outside) / beta


def integrate_batch(sigma: Tensor, rgb: Tensor, delta: np.ndarray):
    """Quadrature over (N, K) samples: premultiplied color and opacity.

    Returns (color (N,3), alpha (N,), tau (N,K), weights (N,K)) where
    tau_i is the transmittance before sample i and
    w_i = (1 - exp(-sigma_i delta_i)) * tau_i; alpha = sum w_i.
    """
    sigma = ad.as_tensor(sigma)
    rgb = ad.as_tensor(rgb)
    n, k = sigma.shape
    if k == 0:
        zero_c = Tensor(np.zeros((n, 3)))
        zero_a = Tensor(np.zeros(n))
        return zero_c, zero_a, Tensor(np.ones((n, 0))), Tensor(np.zeros((n, 0)))
    free = sigma * Tensor(np.asarray(delta, dtype=np.float64))
    # exclusive prefix by shifting, not inclusive-minus-free: the subtraction
    # cancels catastrophically when one term is huge (background far cap) and
    # the weight sum can then drift past one
    excl = ad.concatenate([Tensor(np.zeros((n, 1))), ad.cumsum(free[:, :-1], axis=1)], axis=1)
    tau = ad.exp(-excl)  # transmittance before sample i
    weights = (1.0 - ad.exp(-free)) * tau
    color = ad.sum_(ad.reshape(weights, (n, k, 1)) * rgb, axis=1)
    alpha = ad.sum_(weights, axis=1)
    return color, alpha, tau, weights


@dataclass(frozen=True)
class RayIntegral:
    """One ray's layer integral; ``color`` is premultiplied by opacity."""

    color: np.ndarray
    alpha: float
    tau: np.ndarray
    weights: np.ndarray

    @staticmethod
    def empty() -> "RayIntegral":
        return RayIntegral(np.zeros(3), 0.0, np.ones(0), np.zeros(0))


def integrate_ray(samples) -> RayIntegral:
    """Single-ray view over :func:`integrate_batch`.

    ``samples`` is a sequence of (sigma, color3, delta) triples; an empty
    sequence yields zero color, zero opacity, unit transmittance.
    """
    if len(samples) == 0:
        return RayIntegral.empty()
    sigma = np.array([s for s, _, _ in samples], dtype=np.float64)
    rgb = np.array([c for _, c, _ in samples], dtype=np.float64)
    delta = np.array([d for _, _, d in samples], dtype=np.float64)
    if np.any(delta <= 0) or np.any(sigma < 0):
        raise ValueError("need delta > 0 and sigma >= 0")
    with ad.no_grad():
        color, alpha, tau, weights = integrate_batch(
            Tensor(sigma[None]), Tensor(rgb[None]), delta[None]
        )
    return RayIntegral(color.data[0], float(alpha.data[0]), tau.data[0], weights.data[0])


def compose_batch(c_occ, a_occ, c_fg, a_fg, c_bg, a_bg):
    """Front-to-back blend of three premultiplied layers.

    Returns (color, total opacity); total opacity stays in [0,1] because
    each layer's contribution is gated by what earlier layers let through.
    """
    pass_occ = 1.0 - ad.as_tensor(a_occ)
    pass_fg = 1.0 - ad.as_tensor(a_fg)
    po = ad.reshape(pass_occ, (*pass_occ.shape, 1))
    pf = ad.reshape(pass_fg, (*pass_fg.shape, 1))
    color = ad.as_tensor(c_occ) + po * ad.as_tensor(c_fg) + po * pf * ad.as_tensor(c_bg)
    total = ad.as_tensor(a_occ) + pass_occ * ad.as_tensor(a_fg) + pass_occ * pass_fg * ad.as_tensor(a_bg)
    return color, total


def compose_two_batch(c_fg, a_fg, c_bg, a_bg):
    """Two-layer blend used when the occlusion layer is disabled."""
    pass_fg = 1.0 - ad.as_tensor(a_fg)
    pf = ad.reshape(pass_fg, (*pass_fg.shape, 1))
    color = ad.as_tensor(c_fg) + pf * ad.as_tensor(c_bg)
    total = ad.as_tensor(a_fg) + pass_fg * ad.as_tensor(a_bg)
    return color, total


def compose(occ: RayIntegral, fg: RayIntegral, bg: RayIntegral) -> np.ndarray:
    """Single-pixel composed color from three layer integrals."""
    with ad.no_grad():
        color, _ = compose_batch(
            Tensor(occ.color[None]),
            Tensor(np.array([occ.alpha])),
            Tensor(fg.color[None]),
            Tensor(np.array([fg.alpha])),
            Tensor(bg.color[None]),
            Tensor(np.array([bg.alpha])),
        )
    return color.data[0]


# full pipeline ----------------------------------------------------------------


@dataclass
class SampleCounts:
    """Per-ray quadrature sizes for the three layers."""

    occ: int = 32
    fg: int = 64
    bg: int = 32

    @property
    def total(self) -> int:
        return self.occ + self.fg + self.bg


MODE_THREE = "three"  # full occlusion-aware pipeline
MODE_TWO = "two"  # occlusion layer off, sampling unchanged
MODE_FLAT = "flat"  # no layered parameterization: body interval starts at camera


def forward_rays(
    model,
    origins: np.ndarray,
    dirs: np.ndarray,
    frame_ids: np.ndarray,
    layout: geometry.SphereLayout,
    skeleton: deform.Skeleton,
    pose: deform.Pose,
    counts: SampleCounts,
    mode: str = MODE_THREE,
    rng: np.random.Generator | None = None,
):
    """Evaluate and compose all layers for a ray batch.

    Returns a dict of Tensors: color, alphas per layer, the foreground
    sample bookkeeping the losses need (canonical points, signed
    distances), and the no-occlusion composition.
    """
    n = origins.shape[0]
    if mode == MODE_FLAT:
        sam = geometry.sample_layers(origins, dirs, layout, 1, counts.fg, counts.bg, rng)
        # body interval runs from the camera to the outer-sphere exit, so the
        # occluder region lands inside the body field (the baseline's flaw)
        t_exit = sam.t_fg[:, -1] + sam.d_fg[:, -1]
        u = _unit_grid(n, counts.occ + counts.fg, rng)
        t_fg = geometry.EPS_NEAR + u * (t_exit[:, None] - geometry.EPS_NEAR)
        d_fg = np.diff(t_fg, axis=1)
        d_fg = np.concatenate([d_fg, t_exit[:, None] - t_fg[:, -1:]], axis=1)
        d_fg = np.maximum(d_fg, 1e-12)
        t_occ, d_occ = sam.t_occ[:, :0], sam.d_occ[:, :0]
        t_bg, d_bg = sam.t_bg, sam.d_bg
    else:
        sam = geometry.sample_layers(origins, dirs, layout, counts.occ, counts.fg, counts.bg, rng)
        t_occ, d_occ = sam.t_occ, sam.d_occ
        t_fg, d_fg = sam.t_fg, sam.d_fg
        t_bg, d_bg = sam.t_bg, sam.d_bg

    out: dict = {}
    beta = model.beta()
    density = DensityParams(beta, trainable=True)

    # foreground: observation points -> canonical frame -> SDF field
    x_fg = origins[:, None, :] + t_fg[..., None] * dirs[:, None, :]
    flat_fg = x_fg.reshape(-1, 3)
    w_o = deform.compute_weights(flat_fg, skeleton, "observation", pose)
    x_c = deform.backward_skin(flat_fg, pose, w_o)
    s, _feat, rgb_fg = model.eval_fg(Tensor(x_c))
    sigma_fg = sdf_to_density(s, density)
    k_fg = t_fg.shape[1]
    c_fg, a_fg, _, _ = integrate_batch(
        ad.reshape(sigma_fg, (n, k_fg)), ad.reshape(rgb_fg, (n, k_fg, 3)), d_fg
    )
    out["x_canonical"] = x_c
    out["sdf"] = s
    out["alpha_fg"] = a_fg
    out["color_fg"] = c_fg

    # background: compactified 4-tuples through the scene field
    k_bg = t_bg.shape[1]
    x_bg = origins[:, None, :] + t_bg[..., None] * dirs[:, None, :]
    q_bg = geometry.param_points(x_bg.reshape(-1, 3), layout, "background")
    view = np.repeat(dirs, k_bg, axis=0)
    lat_bg = model.latent_rows("bg", np.repeat(frame_ids, k_bg))
    sigma_bg, rgb_bg = model.eval_scene(Tensor(q_bg), lat_bg, view)
    c_bg, a_bg, _, _ = integrate_batch(
        ad.reshape(sigma_bg, (n, k_bg)), ad.reshape(rgb_bg, (n, k_bg, 3)), d_bg
    )
    out["alpha_bg"] = a_bg
    out["color_bg"] = c_bg

    if mode == MODE_THREE:
        k_occ = t_occ.shape[1]
        x_occ = origins[:, None, :] + t_occ[..., None] * dirs[:, None, :]
        q_occ = geometry.param_points(x_occ.reshape(-1, 3), layout, "occlusion")
        view_o = np.repeat(dirs, k_occ, axis=0)
        lat_occ = model.latent_rows("occ", np.repeat(frame_ids, k_occ))
        sigma_occ, rgb_occ = model.eval_scene(Tensor(q_occ), lat_occ, view_o)
        c_occ, a_occ, _, _ = integrate_batch(
            ad.reshape(sigma_occ, (n, k_occ)), ad.reshape(rgb_occ, (n, k_occ, 3)), d_occ
        )
        out["alpha_occ"] = a_occ
        out["color_occ"] = c_occ
        color, total = compose_batch(c_occ, a_occ, c_fg, a_fg, c_bg, a_bg)
    else:
        out["alpha_occ"] = Tensor(np.zeros(n))
        out["color_occ"] = Tensor(np.zeros((n, 3)))
        color, total = compose_two_batch(c_fg, a_fg, c_bg, a_bg)

    out["color"] = color
    out["alpha_total"] = total
    no_occ_color, _ = compose_two_batch(c_fg, a_fg, c_bg, a_bg)
    out["color_no_occ"] = no_occ_color
    return out


def _unit_grid(n: int, count: int, rng) -> np.ndarray:
    if rng is None:
        u = np.full((n, count), 0.5)
    else:
        u = rng.random((n, count))
    return (np.arange(count) + u) / count


def render_image(
    model,
    camera: geometry.Camera,
    frame_id: int,
    layout: geometry.SphereLayout,
    skeleton: deform.Skeleton,
    pose: deform.Pose,
    counts: SampleCounts,
    mode: str = MODE_THREE,
    chunk: int = 2048,
) -> dict[str, np.ndarray]:
    """Deterministic full-frame render plus per-layer opacity maps.

    Sampling uses bin centers (no jitter), so repeated renders of the
    same checkpoint are bit-identical. Returns float arrays in [0, 1]:
    rgb, rgb_no_occ, rgb_fg, alpha_occ, alpha_fg, alpha_bg.
    """
    h, w = camera.height, camera.width
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    pixels = np.stack([cols.ravel(), rows.ravel()], axis=-1)
    bundle = geometry.generate_rays(camera, pixels)
    total = h * w
    planes = {
        "rgb": np.zeros((total, 3)),
        "rgb_no_occ": np.zeros((total, 3)),
        "rgb_fg": np.zeros((total, 3)),
        "alpha_occ": np.zeros(total),
        "alpha_fg": np.zeros(total),
        "alpha_bg": np.zeros(total),
    }
    ids = np.full(chunk, frame_id, dtype=np.int64)
    with ad.no_grad():
        for lo in range(0, total, chunk):
            hi = min(lo + chunk, total)
            out = forward_rays(
                model,
                bundle.origins[lo:hi],
                bundle.directions[lo:hi],
                ids[: hi - lo],
                layout,
                skeleton,
                pose,
                counts,
                mode=mode,
                rng=None,
            )
            planes["rgb"][lo:hi] = out["color"].data
            planes["rgb_no_occ"][lo:hi] = out["color_no_occ"].data
            planes["rgb_fg"][lo:hi] = out["color_fg"].data
            planes["alpha_occ"][lo:hi] = out["alpha_occ"].data
            planes["alpha_fg"][lo:hi] = out["alpha_fg"].data
            planes["alpha_bg"][lo:hi] = out["alpha_bg"].data
    result = {}
    for key, plane in planes.items():
        shape = (h, w, 3) if plane.ndim == 2 else (h, w)
        result[key] = np.clip(plane.reshape(shape), 0.0, 1.0)
    return result


# image io ----------------------------------------------------------------------


def write_png(path, image: np.ndarray) -> None:
    """Save a float image in [0,1] as 8-bit PNG (grayscale or RGB)."""
    from PIL import Image

    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_png(path) -> np.ndarray:
    """Load a PNG as float in [0,1]; RGB images come back (H, W, 3)."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_raw(path, image: np.ndarray) -> None:
    """32-bit float dump next to the PNG for exact metric computation."""
    np.save(path, np.asarray(image, dtype=np.float32))
