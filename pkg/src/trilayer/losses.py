"""The five-term training objective.

Photometric reconstruction plus four regularizers: an Eikonal penalty
keeping the body field metric, mask-supervised decomposition of the body
layer, an occlusion-decoupling term that pushes occluded-body evidence
into the occlusion layer (with gradients to the body severed), and a
completeness term anchoring near-surface samples to the zero-level set.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ALPHA_CLAMP = 1e-5
OCCUPANCY_THRESHOLD = 0.1  # foreground opacity counting as "body present"


class NumericError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LossWeights:
    """Term weights; the defaults are the reference training values."""

    lam_eik: float = 0.1
    lam_dec: float = 0.003
    lam_occ: float = 0.1
    lam_comp: float = 0.2

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class MaskBatch:
    """Per-ray visibility labels and the positive-class weight for L_occ."""

    m: np.ndarray  # (N,) in {0,1}
    weight_pos: float = 5.0

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(-1)
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ValueError("mask must be binary")
        if self.weight_pos <= 0:
            raise ValueError("positive weight must be > 0")
        object.__setattr__(self, "m", m)


@dataclass(frozen=True)
class NearSurfaceSet:
    """Canonical sample points within ``threshold`` of the proxy surface."""

    points: np.ndarray  # (K, 3)
    threshold: float = 0.05


def photometric(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute color error over rays and channels."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, target {target.shape}")
    return ad.mean(ad.absolute(pred - Tensor(target)))


def eikonal(grads: Tensor) -> Tensor:
    """Mean squared deviation of the gradient norm from one."""
    if grads.shape[0] == 0:
        raise ValueError("eikonal needs a nonempty gradient sample set")
    return ad.mean((ad.norm(grads, axis=-1) - 1.0) ** 2)


def _bce(p: Tensor, target: np.ndarray) -> Tensor:
    p = ad.clip(p, ALPHA_CLAMP, 1.0 - ALPHA_CLAMP)
    t = Tensor(np.asarray(target, dtype=np.float64))
    return -(t * ad.log(p) + (1.0 - t) * ad.log(1.0 - p))


def decomposition(alpha_fg: Tensor, masks: MaskBatch) -> Tensor:
    """Binary cross entropy tying body-layer opacity to the visibility mask."""
    return ad.mean(_bce(alpha_fg, masks.m))


def occlusion_target(alpha_fg: Tensor | np.ndarray, masks: MaskBatch) -> np.ndarray:
    """Rays that should be occluder: body present but labeled invisible.

    Computed from detached opacities, so this is a constant of the step.
    """
    a = alpha_fg.data if isinstance(alpha_fg, Tensor) else np.asarray(alpha_fg)
    return ((masks.m == 0.0) & (a > OCCUPANCY_THRESHOLD)).astype(np.float64)


def occlusion_decoupling(alpha_occ: Tensor, alpha_fg: Tensor, masks: MaskBatch) -> Tensor:
    """Weighted BCE pushing occluder opacity high exactly where the body
    is present yet invisible; body gradients are stopped at the target."""
    target = occlusion_target(alpha_fg, masks)
    weights = np.where(target == 1.0, masks.weight_pos, 1.0)
    return ad.mean(Tensor(weights) * _bce(alpha_occ, target))


def completeness(sdf_near: Tensor | None) -> Tensor:
    """Mean |s| over near-surface samples; zero when the set is empty."""
    if sdf_near is None or sdf_near.shape[0] == 0:
        return Tensor(0.0)
    return ad.mean(ad.absolute(sdf_near))


TERM_ORDER = ("rgb", "eik", "dec", "occ", "comp")


def total(parts: dict[str, Tensor], weights: LossWeights) -> Tensor:
    """Weighted sum of the five terms; rejects non-finite contributions."""
    for name in TERM_ORDER:
        if name not in parts:
            raise ValueError(f"missing loss term {name!r}")
        if not np.all(np.isfinite(parts[name].data)):
            raise NumericError(f"loss term {name!r} is non-finite")
    return (
        parts["rgb"]
        + weights.lam_eik * parts["eik"]
        + weights.lam_dec * parts["dec"]
        + weights.lam_occ * parts["occ"]
        + weights.lam_comp * parts["comp"]
    )


class LossLogger:
    """Appends one CSV row per training step."""

    COLUMNS = ["step", "L_rgb", "L_eik", "L_dec", "L_occ", "L_comp", "total"]

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.COLUMNS)

    def log(self, step: int, parts: dict[str, Tensor], total_value: float) -> None:
        row = [step] + [float(parts[k].data) for k in TERM_ORDER] + [float(total_value)]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)
