"""Depth/disparity evaluation metrics and flip-merge post-processing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CSV_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all",
               "delta1", "delta2", "delta3")

# Floor applied before logs and divisions; LIDAR-style ground truth uses 0
# for gaps, which the validity mask must exclude anyway.
MIN_DEPTH = 1e-3


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    d1_all: float | None = None
    valid_count: int = 0
    cap: float = 0.0

    def as_text(self) -> str:
        lines = []
        for key in CSV_COLUMNS:
            value = getattr(self, key)
            if value is None:
                continue
            lines.append(f"{key}={value:.6f}")
        lines.append(f"valid_count={self.valid_count}")
        lines.append(f"cap={self.cap:g}")
        return "\n".join(lines)

    def as_csv_row(self) -> str:
        cells = []
        for key in CSV_COLUMNS:
            value = getattr(self, key)
            cells.append("" if value is None else f"{value:.6f}")
        return ",".join(cells)


def eigen_metrics(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray | None = None,
                  cap: float = 80.0) -> MetricReport:
    """The standard monocular-depth error suite over valid pixels.

    Both maps are clamped to [1e-3, cap] before comparison.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if valid is None:
        valid = np.ones(gt.shape, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid ground-truth pixels")
    p = np.clip(pred[valid], MIN_DEPTH, cap)
    g = np.clip(gt[valid], MIN_DEPTH, cap)

    abs_rel = float(np.mean(np.abs(p - g) / g))
    sq_rel = float(np.mean((p - g) ** 2 / g))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    rmse_log = float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2)))
    ratio = np.maximum(p / g, g / p)
    return MetricReport(abs_rel=abs_rel, sq_rel=sq_rel, rmse=rmse, rmse_log=rmse_log,
                        delta1=float(np.mean(ratio < 1.25)),
                        delta2=float(np.mean(ratio < 1.25 ** 2)),
                        delta3=float(np.mean(ratio < 1.25 ** 3)),
                        valid_count=n, cap=cap)


def d1_all(pred_disp: np.ndarray, gt_disp: np.ndarray,
           valid: np.ndarray | None = None) -> float:
    """KITTI stereo outlier percentage: error > 3 px and > 5% of truth."""
    pred_disp = np.asarray(pred_disp, dtype=np.float64)
    gt_disp = np.asarray(gt_disp, dtype=np.float64)
    if pred_disp.shape != gt_disp.shape:
        raise ValueError(f"shape mismatch {pred_disp.shape} vs {gt_disp.shape}")
    if valid is None:
        valid = np.ones(gt_disp.shape, dtype=bool)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("no valid ground-truth pixels")
    err = np.abs(pred_disp[valid] - gt_disp[valid])
    outlier = (err > 3.0) & (err > 0.05 * gt_disp[valid])
    return float(100.0 * outlier.mean())


def flip_merge_weights(width: int) -> np.ndarray:
    """Per-column weight of the flipped-source map.

    1 at the left edge, ramping linearly to 0.5 over the first 5% of the
    width, 0.5 across the middle, and mirrored (down to 0) on the right so
    the unflipped map owns the right edge.
    """
    stripe = 0.05 * width
    x = np.arange(width, dtype=np.float64)
    w = np.full(width, 0.5)
    if stripe > 0:
        left = x <= stripe
        w[left] = 1.0 - 0.5 * x[left] / stripe
        xr = (width - 1) - x
        right = xr <= stripe
        w[right] = 0.5 * xr[right] / stripe
    return w


def flip_merge(disp: np.ndarray, disp_from_flipped: np.ndarray) -> np.ndarray:
    """Blend a disparity map with its flipped-inference twin.

    ``disp_from_flipped`` must already be re-flipped into the original
    orientation. The flipped-source map owns the left occlusion stripe, the
    unflipped map the right one; the middle is their average.
    """
    disp = np.asarray(disp, dtype=np.float64)
    disp_from_flipped = np.asarray(disp_from_flipped, dtype=np.float64)
    if disp.shape != disp_from_flipped.shape:
        raise ValueError(f"shape mismatch {disp.shape} vs {disp_from_flipped.shape}")
    w = flip_merge_weights(disp.shape[1])[None, :]
    return w * disp_from_flipped + (1.0 - w) * disp


def select_eval_map(state, use_left: bool = False):
    """The disparity field evaluated by default: the right view's.

    The left view's map inflates near objects (background pixels interpolate
    across occluders), so the right-view map is the published choice;
    ``use_left`` overrides.
    """
    return state.disp["left" if use_left else "right"]
