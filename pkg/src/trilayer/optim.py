"""Adam, the learning-rate schedule, and the training loop.

One optimizer instance covers every trainable array: both networks, the
per-frame latent banks, and the density scale. Each step draws rays
inside the dilated visible-body box of one random frame, pushes them
through sampling, fields, integration, and composition, evaluates the
five-term objective, and applies a bias-corrected Adam update.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import deform, fields, geometry, losses, render
from .autodiff import ParameterStore, Tensor


class OptimError(ArithmeticError):
    pass


class AdamState:
    """First/second moment accumulators keyed by parameter name."""

    def __init__(self, store: ParameterStore, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.b1 = b1
        self.b2 = b2
        self.eps = eps
        self.step = 0
        self.m = {n: np.zeros(p.shape) for n, p in store.items()}
        self.v = {n: np.zeros(p.shape) for n, p in store.items()}

    def extras(self) -> dict[str, np.ndarray]:
        out = {}
        for n, arr in self.m.items():
            out[f"adam.m.{n}"] = arr
        for n, arr in self.v.items():
            out[f"adam.v.{n}"] = arr
        return out

    def restore(self, arrays: dict[str, np.ndarray], step: int) -> None:
        self.step = step
        for n in self.m:
            self.m[n] = arrays[f"adam.m.{n}"].copy()
            self.v[n] = arrays[f"adam.v.{n}"].copy()


def adam_step(store: ParameterStore, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update from the gradients in ``.grad``."""
    state.step += 1
    t = state.step
    for name, p in store.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise OptimError(f"non-finite gradient in parameter group {name!r}")
        m = state.m[name] = state.b1 * state.m[name] + (1.0 - state.b1) * g
        v = state.v[name] = state.b2 * state.v[name] + (1.0 - state.b2) * g * g
        m_hat = m / (1.0 - state.b1**t)
        v_hat = v / (1.0 - state.b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class TrainConfig:
    """Training knobs; defaults mirror the reference setup."""

    steps: int = 2000
    rays_per_step: int = 512
    lr: float = 5.0e-4
    decay_steps: tuple = (200, 500)
    decay_factor: float = 0.5
    seed: int = 0
    n_occ: int = 16
    n_fg: int = 32
    n_bg: int = 16
    bbox_dilation: float = 0.1
    weight_pos: float = 5.0
    near_threshold: float = 0.05
    eik_points: int = 128
    checkpoint_every: int = 0  # 0: only at the end
    mode: str = render.MODE_THREE
    lam_eik: float = 0.1
    lam_dec: float = 0.003
    lam_occ: float = 0.1
    lam_comp: float = 0.2

    def __post_init__(self):
        self.decay_steps = tuple(sorted(int(s) for s in self.decay_steps))
        if self.steps < 0 or self.rays_per_step <= 0:
            raise ValueError("counts must be positive")
        if self.mode not in (render.MODE_THREE, render.MODE_TWO, render.MODE_FLAT):
            raise ValueError(f"unknown pipeline mode {self.mode!r}")

    def counts(self) -> render.SampleCounts:
        return render.SampleCounts(self.n_occ, self.n_fg, self.n_bg)

    def weights(self) -> losses.LossWeights:
        lam_occ = self.lam_occ if self.mode == render.MODE_THREE else 0.0
        return losses.LossWeights(
            lam_eik=self.lam_eik, lam_dec=self.lam_dec, lam_occ=lam_occ, lam_comp=self.lam_comp
        )

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["decay_steps"] = list(self.decay_steps)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        cfg = TrainConfig()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise ValueError(f"unknown train config key {k!r}")
            if k == "decay_steps":
                cfg.decay_steps = tuple(int(x) for x in v)
            elif k == "mode":
                cfg.mode = str(v)
            else:
                cfg.__dict__[k] = type(getattr(cfg, k))(v)
        cfg.__post_init__()
        return cfg


def lr_at(step: int, config: TrainConfig) -> float:
    """Base rate halved at each configured decay step (inclusive)."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    n = sum(1 for d in config.decay_steps if step >= d)
    return config.lr * config.decay_factor**n


def scene_layout(dataset) -> geometry.SphereLayout:
    """Outer radius from the dataset's scene description; inner radius inscribed to all frusta."""
    corner_rays = []
    for cam in dataset.cameras:
        corner_rays.extend(geometry.frustum_corner_rays(cam))
    R = dataset.spec.body_radius
    r = geometry.find_inner_radius(corner_rays, R)
    return geometry.SphereLayout(r=r, R=R)


@dataclass
class TrainResult:
    checkpoint: Path
    csv: Path
    final_step: int
    final_loss: float


def compute_losses(
    model: fields.TriLayerModel,
    out: dict,
    target_colors: np.ndarray,
    mask_batch: losses.MaskBatch,
    skeleton: deform.Skeleton,
    config: TrainConfig,
    rng: np.random.Generator,
) -> dict[str, Tensor]:
    """All five terms for one forward batch."""
    parts: dict[str, Tensor] = {}
    parts["rgb"] = losses.photometric(out["color"], target_colors)

    x_c = np.asarray(out["x_canonical"])
    n_pts = x_c.shape[0]
    k = min(config.eik_points, n_pts)
    idx = rng.choice(n_pts, size=k, replace=False)
    _, grads = fields.spatial_gradient(model.sdf_only, x_c[idx])
    parts["eik"] = losses.eikonal(grads)

    parts["dec"] = losses.decomposition(out["alpha_fg"], mask_batch)

    if config.mode == render.MODE_THREE:
        parts["occ"] = losses.occlusion_decoupling(out["alpha_occ"], out["alpha_fg"], mask_batch)
    else:
        parts["occ"] = Tensor(0.0)

    proxy = deform.body_sdf(x_c, skeleton)
    near = np.nonzero(np.abs(proxy) <= config.near_threshold)[0]
    parts["comp"] = losses.completeness(out["sdf"][near] if len(near) else None)
    return parts


def train(
    dataset,
    config: TrainConfig,
    field_config: fields.FieldConfig | None = None,
    out_dir=".",
    resume: str | None = None,
    progress=None,
) -> TrainResult:
    """Full training run; writes checkpoint(s) and the loss CSV.

    ``resume`` continues bit-exactly from a checkpoint written by this
    function (same dataset, config, and seed required for replay).
    A non-finite loss or gradient checkpoints to ``abort.ckpt`` and
    raises OptimError naming the step.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    layout = scene_layout(dataset)
    model = fields.TriLayerModel(dataset.n_frames, field_config, seed=config.seed)
    state = AdamState(model.store)
    rng = np.random.default_rng(config.seed)
    start = 0
    if resume is not None:
        header, arrays = fields.load_checkpoint(resume)
        fields.restore_model(model, arrays)
        state.restore(arrays, header["step"])
        start = header["step"]
        rng.bit_generator.state = header["rng"]

    logger = losses.LossLogger(out / "loss.csv")
    weights = config.weights()
    counts = config.counts()
    mask_cfg = config.weight_pos
    ckpt_path = out / "model.ckpt"

    meta = {
        "mode": config.mode,
        "n_frames": dataset.n_frames,
        "field": model.config.to_dict(),
        "train": config.to_dict(),
    }

    def save(path, step):
        fields.save_checkpoint(
            path,
            model.store,
            step,
            extras=state.extras(),
            rng_state=rng.bit_generator.state,
            meta=meta,
        )

    total_value = float("nan")
    for step in range(start, config.steps):
        frame = int(rng.integers(dataset.n_frames))
        pixels, colors, m = dataset.sample_rays(
            frame, config.rays_per_step, rng, config.bbox_dilation
        )
        bundle = geometry.generate_rays(dataset.cameras[frame], pixels)
        frame_ids = np.full(len(bundle), frame, dtype=np.int64)
        try:
            fwd = render.forward_rays(
                model,
                bundle.origins,
                bundle.directions,
                frame_ids,
                layout,
                dataset.skeleton,
                dataset.poses[frame],
                counts,
                mode=config.mode,
                rng=rng,
            )
            parts = compute_losses(
                model,
                fwd,
                colors,
                losses.MaskBatch(m, weight_pos=mask_cfg),
                dataset.skeleton,
                config,
                rng,
            )
            loss = losses.total(parts, weights)
            model.store.zero_grad()
            ad.backward(loss, model.store.tensors())
            adam_step(model.store, state, lr_at(step, config))
        except (losses.NumericError, OptimError) as e:
            save(out / "abort.ckpt", step)
            raise OptimError(f"aborted at step {step}: {e}") from e
        total_value = float(loss.data)
        logger.log(step, parts, total_value)
        if progress is not None:
            progress(step, total_value)
        if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save(ckpt_path, step + 1)
    save(ckpt_path, config.steps)
    return TrainResult(ckpt_path, out / "loss.csv", config.steps, total_value)
