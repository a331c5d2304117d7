"""The complete training objective with analytic gradients.

Terms, each averaged over valid pixels:

- image loss: per-pixel ``E * (alpha * (1 - SSIM)/2 + (1 - alpha) * |diff|)``
  between each reconstructed view and its real image, weighted by the
  explainability mask and channel-averaged;
- smoothness: first differences of normalized disparity, attenuated by
  ``exp(-|image gradient|)``, for every disparity field against its image;
- consistency: the anchor view's disparity field, resampled through each
  direction's inverse warp (the same grid the photometric term uses),
  compared L1 against that direction's own field;
- explainability: cross-entropy of the mask against a target of one,
  computed from logits in softplus form so it stays finite.

``total_loss`` evaluates all terms over an image pyramid (equal weight per
scale) for the three reconstruction directions (stereo, temporal, and the
diagonal direction using the summed pose) and, on request, returns exact
gradients with respect to the four disparity logit fields, both pose
vectors, and the mask logits.

SSIM uses 3x3 uniform windows; windows are cropped at the image border (a
corner pixel sees a 2x2 window), so the map covers every pixel.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .geometry import Intrinsics, _warp_forward, _warp_vjp
from .sampler import (SampledImage, _sample_forward, _sample_vjp,
                      downsample2x_mean, downsample2x_mean_vjp)

if TYPE_CHECKING:  # pragma: no cover
    from .optim import SceneState

VIEWS = ("left", "right", "left_next", "right_next")

# Reconstruction directions: target view and how its pose is assembled from
# the stereo (right->left) and temporal (next->current) parameter blocks.
DIRECTIONS = ("right", "left_next", "right_next")

# A pyramid level narrower or shorter than this is dropped.
MIN_LEVEL_SIZE = 4

# Relaxed-subgradient dead zone for the L1 regularizers, in normalized
# disparity units (~0.03 px at width 256). Loss values are exact |x|; the
# reported subgradient ramps linearly through zero so that differences
# jittering at the optimizer's step scale do not emit full-magnitude
# alternating signs (which would saturate Adam's second moment and stall
# every shared descent direction). Outside the zone the subgradient is the
# exact sign.
L1_SIGN_KNEE = 1e-4


def _l1_sign(x: np.ndarray) -> np.ndarray:
    return np.clip(x / L1_SIGN_KNEE, -1.0, 1.0)


@dataclass
class ExplainabilityMask:
    """Per-pixel confidence that a target pixel is explained by warping."""

    logits: np.ndarray

    def probabilities(self) -> np.ndarray:
        return _sigmoid(self.logits)


@dataclass
class LossWeights:
    """Term weights and SSIM configuration.

    ``c1``/``c2`` default to the plain stabilizers 0.01 and 0.03; pass the
    squared-and-scaled variants explicitly if you want the classic SSIM
    constants instead.
    """

    w_image: float = 1.0
    w_ds: float = 1.0
    w_lr: float = 1.0
    w_exp: float = 1.0
    alpha: float = 0.85
    c1: float = 0.01
    c2: float = 0.03


@dataclass
class LossBreakdown:
    image: float = 0.0
    smooth: float = 0.0
    consistency: float = 0.0
    explainability: float = 0.0
    total: float = 0.0
    per_scale: list = field(default_factory=list)


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _disp_sigmoid(x):
    """Sigmoid clamped a hair inside (0, 1) so that saturated logits still
    give strictly-bounded disparity and finite depth."""
    return np.clip(_sigmoid(x), 1e-12, 1.0 - 1e-12)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _box3_sum(x: np.ndarray) -> np.ndarray:
    """Sum over 3x3 windows cropped at the border, over the two leading
    spatial axes (trailing axes ride along). Self-adjoint."""
    H, W = x.shape[:2]
    p = np.zeros((H + 2, W + 2) + x.shape[2:])
    p[1:-1, 1:-1] = x
    rows = p[:-2] + p[1:-1] + p[2:]
    return rows[:, :-2] + rows[:, 1:-1] + rows[:, 2:]


_BOX_COUNTS: dict = {}


def _box3_count(shape) -> np.ndarray:
    """Window population per pixel (4/6/9), shaped to broadcast over ``shape``."""
    return _box3_count_pair(shape)[0]


def _box3_count_pair(shape):
    key = shape
    pair = _BOX_COUNTS.get(key)
    if pair is None:
        counts = _box3_sum(np.ones(shape[:2]))
        if len(shape) == 3:
            counts = counts[..., None]
        pair = (counts, 1.0 / counts)
        _BOX_COUNTS[key] = pair
    return pair


def ssim_map(x: np.ndarray, y: np.ndarray, c1: float = 0.01, c2: float = 0.03) -> np.ndarray:
    """Per-pixel structural similarity over 3x3 border-cropped windows.

    Accepts (H, W) or (H, W, C); channels are scored independently.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    s, _ = _ssim_forward(x, y, c1, c2)
    return s


def _ssim_x_moments(x, counts):
    inv = 1.0 / counts
    return _box3_sum(x) * inv, _box3_sum(x * x) * inv


def _ssim_forward(x, y, c1, c2, x_moments=None):
    _, inv_counts = _box3_count_pair(x.shape)
    if x_moments is None:
        x_moments = (_box3_sum(x) * inv_counts, _box3_sum(x * x) * inv_counts)
    mx, mxx = x_moments
    my = _box3_sum(y) * inv_counts
    myy = _box3_sum(y * y) * inv_counts
    mxy = _box3_sum(x * y) * inv_counts
    vx = mxx - mx * mx
    vy = myy - my * my
    cov = mxy - mx * my
    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * cov + c2
    b1 = mx * mx + my * my + c1
    b2 = vx + vy + c2
    s = (a1 * a2) / (b1 * b2)
    cache = (x, y, mx, my, a1, a2, b1, b2, s)
    return s, cache


def _ssim_vjp(cache, gs, need_gx=False):
    """Gradient of the SSIM map w.r.t. ``y`` (and optionally ``x``)."""
    x, y, mx, my, a1, a2, b1, b2, s = cache
    inv_b1 = 1.0 / b1
    inv_b2 = 1.0 / b2
    inv_b1b2 = inv_b1 * inv_b2
    s_inv_b2 = s * inv_b2
    # Partials w.r.t. the five window moments (mx, my, mxx, myy, mxy).
    d_mxy = gs * (2.0 * a1 * inv_b1b2)
    d_myy = -gs * s_inv_b2
    d_my = gs * (2.0 * (mx * ((a2 - a1) * inv_b1b2) - s * my * (inv_b1 - inv_b2)))
    _, inv_counts = _box3_count_pair(x.shape)
    gy = (_box3_sum(d_my * inv_counts)
          + 2.0 * y * _box3_sum(d_myy * inv_counts)
          + x * _box3_sum(d_mxy * inv_counts))
    if not need_gx:
        return gy, None
    d_mxx = -gs * s_inv_b2
    d_mx = gs * (2.0 * (my * ((a2 - a1) * inv_b1b2) - s * mx * (inv_b1 - inv_b2)))
    gx = (_box3_sum(d_mx * inv_counts)
          + 2.0 * x * _box3_sum(d_mxx * inv_counts)
          + y * _box3_sum(d_mxy * inv_counts))
    return gy, gx


def l1_loss(recon: SampledImage, target: np.ndarray) -> float:
    """Mean absolute difference over valid pixels and channels."""
    target = np.asarray(target, dtype=np.float64)
    if recon.values.shape != target.shape:
        raise ValueError(f"shape mismatch {recon.values.shape} vs {target.shape}")
    m = recon.valid
    n = int(m.sum())
    if n == 0:
        warnings.warn("l1_loss: no valid pixels, returning 0", RuntimeWarning)
        return 0.0
    diff = np.abs(target - recon.values)
    if diff.ndim == 3:
        diff = diff.mean(axis=-1)
    return float(diff[m].sum() / n)


def image_loss(recon: SampledImage, target: np.ndarray, mask: ExplainabilityMask,
               w: LossWeights) -> float:
    """Explainability-weighted SSIM+L1 photometric loss over valid pixels.

    Invalid reconstruction pixels are neutralized with the target's values
    before the windowed SSIM so they neither contribute error nor bias the
    windows of adjacent valid pixels.
    """
    target = np.asarray(target, dtype=np.float64)
    if recon.values.shape != target.shape:
        raise ValueError(f"shape mismatch {recon.values.shape} vs {target.shape}")
    m = recon.valid
    n = int(m.sum())
    if n == 0:
        warnings.warn("image_loss: no valid pixels, returning 0", RuntimeWarning)
        return 0.0
    E = mask.probabilities()
    vals = np.where(m[..., None] if target.ndim == 3 else m, recon.values, target)
    err = _photometric_error(vals, target, w)
    return float((E[m] * err[m]).sum() / n)


def _photometric_error(recon: np.ndarray, target: np.ndarray, w: LossWeights) -> np.ndarray:
    """Channel-averaged per-pixel alpha*(1-SSIM)/2 + (1-alpha)*|diff|."""
    s, _ = _ssim_forward(target, recon, w.c1, w.c2)
    err = w.alpha * (1.0 - s) / 2.0 + (1.0 - w.alpha) * np.abs(target - recon)
    return err.mean(axis=-1) if err.ndim == 3 else err


def smoothness_loss(disp: np.ndarray, img: np.ndarray) -> float:
    """Edge-aware first-difference penalty on a disparity field.

    Forward differences d[i,j]-d[i+1,j] / d[i,j]-d[i,j+1]; the weighting
    image gradient magnitude is averaged over channels; normalizer is the
    full pixel count.
    """
    disp = np.asarray(disp, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    if disp.shape != img.shape[:2]:
        raise ValueError(f"disparity {disp.shape} does not match image {img.shape[:2]}")
    value, _ = _smoothness_forward(disp, img)
    return value


def _image_grad_weights(img: np.ndarray):
    """exp(-|forward image difference|), channel-averaged, per axis."""
    if img.ndim == 2:
        img = img[..., None]
    gx = np.abs(img[:, :-1] - img[:, 1:]).mean(axis=-1)
    gy = np.abs(img[:-1, :] - img[1:, :]).mean(axis=-1)
    return np.exp(-gx), np.exp(-gy)


def _smoothness_forward(disp, img, weights=None):
    wx, wy = _image_grad_weights(img) if weights is None else weights
    dx = disp[:, :-1] - disp[:, 1:]
    dy = disp[:-1, :] - disp[1:, :]
    n = disp.size
    value = float((np.abs(dx) * wx).sum() / n + (np.abs(dy) * wy).sum() / n)
    return value, (_l1_sign(dx) * wx / n, _l1_sign(dy) * wy / n)


def _smoothness_grad(disp_shape, sign_weights):
    sx, sy = sign_weights
    g = np.zeros(disp_shape)
    g[:, :-1] += sx
    g[:, 1:] -= sx
    g[:-1, :] += sy
    g[1:, :] -= sy
    return g


def explainability_loss(mask: ExplainabilityMask) -> float:
    """Mean cross-entropy against a target of one: mean(-log E)."""
    return float(_softplus(-np.asarray(mask.logits, dtype=np.float64)).mean())


def consistency_loss(d_target_view: np.ndarray, d_other_view: np.ndarray,
                     pose, K: Intrinsics) -> float:
    """Warp the anchor depth map with itself as warp depth and compare.

    The anchor map supplies both the warp geometry and the sampled values;
    the result is compared L1 against the other view's map over valid
    pixels. Exact for fronto-parallel scenes under pure-baseline motion.
    """
    d_target_view = np.asarray(d_target_view, dtype=np.float64)
    d_other_view = np.asarray(d_other_view, dtype=np.float64)
    if d_target_view.shape != (K.height, K.width) or d_other_view.shape != (K.height, K.width):
        raise ValueError("depth map shape does not match intrinsics")
    pose_vec = pose.as_vector() if hasattr(pose, "as_vector") else np.asarray(pose, dtype=np.float64)
    u, v, valid, _ = _warp_forward(d_target_view, pose_vec, K)
    sampled, _ = _sample_forward(d_target_view, u, v, valid)
    n = int(valid.sum())
    if n == 0:
        warnings.warn("consistency_loss: no valid pixels, returning 0", RuntimeWarning)
        return 0.0
    return float(np.abs(sampled - d_other_view)[valid].sum() / n)


def pyramid_dims(height: int, width: int, scales: int):
    """Successive halvings of the base dims, dropping levels below 4 px."""
    dims = [(height, width)]
    for _ in range(scales - 1):
        h, w = dims[-1]
        h2, w2 = h // 2, w // 2
        if min(h2, w2) < MIN_LEVEL_SIZE:
            break
        dims.append((h2, w2))
    return dims


def _direction_pose(direction: str, pose_stereo: np.ndarray, pose_temporal: np.ndarray):
    """Pose vector mapping the direction's view into the anchor view, plus
    the per-block multipliers used to route pose gradients."""
    if direction == "right":
        return pose_stereo, (1.0, 0.0)
    if direction == "left_next":
        return pose_temporal, (0.0, 1.0)
    if direction == "right_next":
        return pose_stereo + pose_temporal, (1.0, 1.0)
    raise ValueError(direction)


class _Level:
    """Constant per-level data reused across iterations."""

    __slots__ = ("hw", "K", "images", "smooth_w", "target_moments")

    def __init__(self, hw, K, images):
        self.hw = hw
        self.K = K
        self.images = images
        self.smooth_w = {view: _image_grad_weights(images[view]) for view in VIEWS}
        c_counts = _box3_count(images["left"].shape)
        self.target_moments = {d: _ssim_x_moments(images[d], c_counts) for d in DIRECTIONS}


class SceneContext:
    """Precomputed image pyramid and per-level constants for one scene.

    Levels are built by successive 2x2 mean pooling (anti-aliased), with
    intrinsics following the same half-pixel convention. Building one of
    these and passing it to :func:`total_loss` avoids recomputing image-side
    quantities on every optimizer iteration.
    """

    def __init__(self, images: dict, K: Intrinsics, scales: int):
        base_hw = images["left"].shape[:2]
        self.base_hw = base_hw
        self.scales = scales
        self.levels = []
        ims = images
        K_s = K
        for j, hw in enumerate(pyramid_dims(*base_hw, scales)):
            if j > 0:
                ims = {view: downsample2x_mean(ims[view]) for view in VIEWS}
                K_s = K_s.halved()
            self.levels.append(_Level(hw, K_s, ims))


def total_loss(state: "SceneState", images: dict, K: Intrinsics, baseline: float,
               weights: LossWeights | None = None, scales: int = 4,
               want_grads: bool = True, ctx: SceneContext | None = None):
    """Full multi-scale objective and, optionally, its exact gradients.

    ``images`` maps each view name to its (H, W, C) array at the resolution
    of the state's parameter fields. Pass a prebuilt :class:`SceneContext`
    (for the same images/intrinsics) to amortize image-side work across
    iterations. Returns ``(LossBreakdown, grads)`` where ``grads`` has one
    entry per parameter block (``disp_left`` .. ``mask``) or None when
    ``want_grads`` is false.
    """
    w = weights or LossWeights()
    base_hw = state.mask_logits.shape
    for view in VIEWS:
        if images[view].shape[:2] != base_hw:
            raise ValueError(f"image '{view}' shape {images[view].shape[:2]} "
                             f"does not match state {base_hw}")
    if ctx is None or ctx.base_hw != base_hw or ctx.scales != scales:
        ctx = SceneContext(images, K, scales)
    n_levels = len(ctx.levels)

    d_max = state.disp["left"].d_max
    pose_s = state.pose_stereo
    pose_t = state.pose_temporal

    # Parameter pyramids by the same successive mean pooling as the images.
    logits_pyr = {view: [state.disp[view].logits] for view in VIEWS}
    mask_pyr = [state.mask_logits]
    for _ in range(n_levels - 1):
        for view in VIEWS:
            logits_pyr[view].append(downsample2x_mean(logits_pyr[view][-1]))
        mask_pyr.append(downsample2x_mean(mask_pyr[-1]))

    grads = None
    if want_grads:
        grads = {"pose_stereo": np.zeros(6), "pose_temporal": np.zeros(6)}
        g_logits_pyr = {view: [np.zeros(lv.hw) for lv in ctx.levels] for view in VIEWS}
        g_mask_pyr = [np.zeros(lv.hw) for lv in ctx.levels]

    parts = np.zeros(4)  # image, smooth, consistency, explainability
    per_scale = []
    level_w = 1.0 / n_levels

    for j, lv in enumerate(ctx.levels):
        hw = lv.hw
        K_s = lv.K
        ims = lv.images
        logits = {view: logits_pyr[view][j] for view in VIEWS}
        mask_logits = mask_pyr[j]

        sig = {view: _disp_sigmoid(logits[view]) for view in VIEWS}
        disp_n = {view: d_max * sig[view] for view in VIEWS}
        depth = {view: K_s.fx * baseline / (disp_n[view] * K_s.width) for view in VIEWS}
        E = _sigmoid(mask_logits)

        if want_grads:
            g_logits = {view: g_logits_pyr[view][j] for view in VIEWS}
            g_mask = g_mask_pyr[j]
            g_depth = {view: np.zeros(hw) for view in VIEWS}
            g_dispn = {view: np.zeros(hw) for view in VIEWS}

        lvl = np.zeros(4)

        # --- photometric + consistency along the three directions ---
        # Both use the same inverse-warp grid (from the direction view's
        # depth): the photometric term resamples the anchor image, the
        # consistency term resamples the anchor disparity field and compares
        # it against the direction's own field, in normalized disparity
        # units so its stiffness is commensurate with the photometric term.
        src = ims["left"]
        anchor_disp = disp_n["left"]
        for direction in DIRECTIONS:
            pose_vec, route = _direction_pose(direction, pose_s, pose_t)
            u, v, valid, wcache = _warp_forward(depth[direction], pose_vec, K_s)
            recon, scache = _sample_forward(src, u, v, valid)
            n = int(valid.sum())
            if n == 0:
                continue
            target = ims[direction]
            C = target.shape[2]
            # Give unobservable pixels the target's own value so the SSIM
            # windows of their valid neighbors see no artificial edge; they
            # stay out of the denominator and carry no gradient.
            recon = np.where(valid[..., None], recon, target)
            s, scache_ssim = _ssim_forward(target, recon, w.c1, w.c2,
                                           lv.target_moments[direction])
            absdiff = np.abs(target - recon)
            err = (w.alpha * (1.0 - s) / 2.0 + (1.0 - w.alpha) * absdiff).sum(axis=-1) / C
            lvl[0] += float((E * err)[valid].sum() / n)

            sampled, scache_d = _sample_forward(anchor_disp, u, v, valid)
            diff = sampled - disp_n[direction]
            lvl[2] += float(np.abs(diff)[valid].sum() / n)

            if want_grads:
                # Photometric: d(term)/d(err map) restricted to valid pixels.
                coeff = w.w_image * level_w / n
                g_err = np.where(valid, E * coeff, 0.0)
                g_mask += np.where(valid, err * coeff, 0.0) * E * (1.0 - E)
                gs = (-g_err * (w.alpha / (2.0 * C)))[..., None]
                g_recon, _ = _ssim_vjp(scache_ssim, gs)
                g_recon -= (g_err * ((1.0 - w.alpha) / C))[..., None] * np.sign(target - recon)
                _, gu, gv = _sample_vjp(scache, g_recon, need_src_grad=False)

                # Consistency: both value sides plus the shared grid.
                coeff_c = w.w_lr * level_w / n
                g_diff = np.where(valid, _l1_sign(diff) * coeff_c, 0.0)
                g_dispn[direction] -= g_diff
                g_src, gu_c, gv_c = _sample_vjp(scache_d, g_diff, need_src_grad=True)
                g_dispn["left"] += g_src

                gd, gp = _warp_vjp(wcache, gu + gu_c, gv + gv_c)
                g_depth[direction] += gd
                grads["pose_stereo"] += route[0] * gp
                grads["pose_temporal"] += route[1] * gp

        # --- edge-aware smoothness of each disparity field ---
        for view in VIEWS:
            value, sw = _smoothness_forward(disp_n[view], None, lv.smooth_w[view])
            lvl[1] += value
            if want_grads:
                g_dispn[view] += _smoothness_grad(hw, sw) * (w.w_ds * level_w)

        # --- explainability cross-entropy toward one ---
        lvl[3] += float(_softplus(-mask_logits).mean())
        if want_grads:
            g_mask += (E - 1.0) * (w.w_exp * level_w / mask_logits.size)

            # Chain both value spaces back to the logits:
            # d(disp_n)/d(logit) = d_max * sig * (1 - sig),
            # d(depth)/d(logit) = -depth * (1 - sig).
            for view in VIEWS:
                g_logits[view] += (g_dispn[view] * (d_max * sig[view] * (1.0 - sig[view]))
                                   + g_depth[view] * (-depth[view] * (1.0 - sig[view])))

        parts += lvl
        per_scale.append({"dims": hw, "image": lvl[0], "smooth": lvl[1],
                          "consistency": lvl[2], "explainability": lvl[3]})

    if want_grads:
        # Collapse the pooling chains coarsest-first.
        for j in range(n_levels - 1, 0, -1):
            up_hw = ctx.levels[j - 1].hw
            for view in VIEWS:
                g_logits_pyr[view][j - 1] += downsample2x_mean_vjp(g_logits_pyr[view][j], up_hw)
            g_mask_pyr[j - 1] += downsample2x_mean_vjp(g_mask_pyr[j], up_hw)
        for view in VIEWS:
            grads[f"disp_{view}"] = g_logits_pyr[view][0]
        grads["mask"] = g_mask_pyr[0]

    parts *= level_w
    breakdown = LossBreakdown(
        image=float(parts[0]), smooth=float(parts[1]), consistency=float(parts[2]),
        explainability=float(parts[3]),
        total=float(w.w_image * parts[0] + w.w_ds * parts[1]
                    + w.w_lr * parts[2] + w.w_exp * parts[3]),
        per_scale=per_scale)
    return breakdown, grads
