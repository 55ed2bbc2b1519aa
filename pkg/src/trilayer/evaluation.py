"""Quantitative metrics and the multi-run comparison driver.

Three scores cover the reconstruction: PSNR on visible body pixels
(fit quality where supervision exists), silhouette IoU against the full
occupancy including hidden parts (completeness), and full-frame
PSNR/SSIM against the occluder-free ground truth (how well the model
separates the body and background from the obstacle).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import render

PSNR_CAP = 99.0


class MissingDataError(FileNotFoundError):
    pass


def masked_psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> float | None:
    """PSNR in dB over masked pixels; None when the mask is empty.

    Colors are in [0,1]; exact matches are capped at 99 dB.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != pred.shape[: mask.ndim]:
            raise ValueError("mask shape does not match image")
        if not mask.any():
            return None
        pred = pred[mask]
        target = target[mask]
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def silhouette_iou(opacity: np.ndarray, gt_silhouette: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of the thresholded opacity and the GT mask.

    An empty union counts as perfect agreement (1.0).
    """
    a = np.asarray(opacity, dtype=np.float64) > threshold
    b = np.asarray(gt_silhouette, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(ax**2) / (2.0 * sigma**2))
    return k / k.sum()


def _filter2(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode convolution with a 1-D kernel on both axes."""
    size = len(kernel)
    h, w = img.shape
    out_h, out_w = h - size + 1, w - size + 1
    tmp = np.zeros((out_h, w))
    for i in range(size):
        tmp += kernel[i] * img[i : i + out_h, :]
    out = np.zeros((out_h, out_w))
    for j in range(size):
        out += kernel[j] * tmp[:, j : j + out_w]
    return out


def ssim(pred: np.ndarray, target: np.ndarray, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on luma, 11x11 Gaussian window, dynamic range 1."""
    x = _luma(pred)
    y = _luma(target)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    size = 11
    if min(x.shape) < size:
        raise ValueError(f"image smaller than the {size}x{size} SSIM window")
    kernel = _gaussian_kernel(size, 1.5)
    c1 = k1**2
    c2 = k2**2
    mu_x = _filter2(x, kernel)
    mu_y = _filter2(y, kernel)
    xx = _filter2(x * x, kernel) - mu_x**2
    yy = _filter2(y * y, kernel) - mu_y**2
    xy = _filter2(x * y, kernel) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-run metric summary with per-frame breakdown."""

    run: str
    psnr_visible: list
    iou_completeness: list
    psnr_full: list
    ssim_full: list

    def summary(self) -> dict[str, float]:
        def mean(vals):
            present = [v for v in vals if v is not None]
            return float(np.mean(present)) if present else float("nan")

        return {
            "psnr_visible": mean(self.psnr_visible),
            "iou": mean(self.iou_completeness),
            "psnr_full": mean(self.psnr_full),
            "ssim": mean(self.ssim_full),
        }


def _load_run_frame(run_dir: Path, sub: str, f: int) -> np.ndarray:
    p = run_dir / sub / f"{f:04d}.png"
    if not p.exists():
        raise MissingDataError(f"run {run_dir} is missing {sub}/{f:04d}.png")
    return render.read_png(p)


def evaluate_run(run_dir, dataset) -> MetricReport:
    """Score one rendered run directory against its dataset."""
    run_dir = Path(run_dir)
    n = dataset.n_frames
    report = MetricReport(str(run_dir), [], [], [], [])
    for f in range(n):
        rgb = _load_run_frame(run_dir, "rgb", f)
        no_occ = _load_run_frame(run_dir, "rgb_no_occ", f)
        a_fg = _load_run_frame(run_dir, "alpha_fg", f)
        report.psnr_visible.append(masked_psnr(rgb, dataset.frames[f], dataset.masks[f]))
        report.iou_completeness.append(silhouette_iou(a_fg, dataset.silhouettes[f]))
        report.psnr_full.append(masked_psnr(no_occ, dataset.gt_human[f]))
        report.ssim_full.append(ssim(no_occ, dataset.gt_human[f]))
    return report


def compare_runs(run_dirs, dataset, csv_path=None) -> str:
    """Metric table for several runs; deltas are against the first run.

    Returns the aligned text table; optionally writes the per-frame CSV.
    """
    reports = [evaluate_run(d, dataset) for d in run_dirs]
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["run", "frame", "psnr_visible", "iou", "psnr_full", "ssim"])
            for rep in reports:
                for f in range(dataset.n_frames):
                    writer.writerow(
                        [
                            rep.run,
                            f,
                            _fmt(rep.psnr_visible[f]),
                            _fmt(rep.iou_completeness[f]),
                            _fmt(rep.psnr_full[f]),
                            _fmt(rep.ssim_full[f]),
                        ]
                    )
                s = rep.summary()
                writer.writerow(
                    [rep.run, "mean", _fmt(s["psnr_visible"]), _fmt(s["iou"]), _fmt(s["psnr_full"]), _fmt(s["ssim"])]
                )

    # label rows by basename, backing off to the full path on collision
    names = [Path(r.run).name for r in reports]
    if len(set(names)) != len(names):
        names = [r.run for r in reports]

    base = reports[0].summary()
    header = ["run", "psnr_vis", "iou", "psnr_full", "ssim", "d_psnr_vis", "d_iou"]
    rows = [header]
    for rep, label in zip(reports, names):
        s = rep.summary()
        rows.append(
            [
                label,
                f"{s['psnr_visible']:.2f}",
                f"{s['iou']:.3f}",
                f"{s['psnr_full']:.2f}",
                f"{s['ssim']:.3f}",
                f"{s['psnr_visible'] - base['psnr_visible']:+.2f}",
                f"{s['iou'] - base['iou']:+.3f}",
            ]
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in rows]
    return "\n".join(lines)


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"
