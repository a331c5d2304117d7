"""Scene parameterization and the per-scene optimization loop.

Instead of a learned network, every scene is solved directly: four
sigmoid-parameterized disparity fields, two 6-DoF poses, and an
explainability mask are optimized by Adam against the full objective,
coarse to fine over an image pyramid. Disparity logits are upsampled
bilinearly to seed each finer stage; Adam moments restart per stage while
the learning-rate schedule runs over the global step count.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .geometry import Intrinsics
from .losses import (VIEWS, LossBreakdown, LossWeights, SceneContext, pyramid_dims,
                     total_loss, _disp_sigmoid, _sigmoid)
from .sampler import get_resize_plan

PARAM_BLOCKS = ("disp_left", "disp_right", "disp_left_next", "disp_right_next",
                "pose_stereo", "pose_temporal", "mask")


class OptimizationError(RuntimeError):
    """Raised when the loop encounters a non-finite loss or gradient."""


@dataclass
class DisparityField:
    """Unconstrained logits mapped through a scaled sigmoid.

    Normalized disparity is ``sigmoid(logits) * d_max`` (a fraction of image
    width, strictly inside (0, d_max)); metric depth follows from the
    rectified-stereo relation ``depth = fx * baseline / (disparity * width)``.
    """

    logits: np.ndarray
    d_max: float = 0.3

    def normalized(self) -> np.ndarray:
        return self.d_max * _disp_sigmoid(self.logits)

    def pixel_disparity(self, width: int | None = None) -> np.ndarray:
        w = self.logits.shape[1] if width is None else width
        return self.normalized() * w

    def depth(self, K: Intrinsics, baseline: float) -> np.ndarray:
        return disparity_to_depth(self.normalized(), K, baseline)


def disparity_to_depth(s, K: Intrinsics, baseline: float):
    """Metric depth from normalized (width-fraction) disparity."""
    s = np.asarray(s, dtype=np.float64)
    if not np.all(s > 0):
        raise ValueError("normalized disparity must be positive")
    out = K.fx * baseline / (s * K.width)
    return float(out) if out.ndim == 0 else out


def depth_to_disparity(depth, K: Intrinsics, baseline: float):
    """Inverse of :func:`disparity_to_depth`."""
    depth = np.asarray(depth, dtype=np.float64)
    if not np.all(depth > 0):
        raise ValueError("depth must be positive")
    out = K.fx * baseline / (depth * K.width)
    return float(out) if out.ndim == 0 else out


@dataclass
class OptimizeConfig:
    iterations: int = 300
    scales: int = 4
    lr: float = 1e-4
    schedule_breakpoints: tuple = (0.6, 0.8)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weights: LossWeights = dataclass_field(default_factory=LossWeights)
    d_max: float = 0.3
    mask_init_logit: float = 3.0
    seed: int = 0
    deterministic: bool = True
    # Joint pose+depth optimization has a scale gauge (stereo translation
    # against inverse depth); the calibrated baseline anchors metric scale,
    # so the stereo pose stays frozen unless explicitly released.
    freeze_stereo_pose: bool = True

    def __post_init__(self):
        if self.scales < 1:
            raise ValueError("scales must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must be in (0, 1)")


@dataclass
class SceneState:
    """All optimized parameters plus Adam buffers and the step counter."""

    disp: dict
    pose_stereo: np.ndarray
    pose_temporal: np.ndarray
    mask_logits: np.ndarray
    adam_m: dict
    adam_v: dict
    adam_t: int = 0
    step: int = 0

    def params(self) -> dict:
        return {"disp_left": self.disp["left"].logits,
                "disp_right": self.disp["right"].logits,
                "disp_left_next": self.disp["left_next"].logits,
                "disp_right_next": self.disp["right_next"].logits,
                "pose_stereo": self.pose_stereo,
                "pose_temporal": self.pose_temporal,
                "mask": self.mask_logits}

    def copy(self) -> "SceneState":
        return SceneState(
            disp={v: DisparityField(f.logits.copy(), f.d_max) for v, f in self.disp.items()},
            pose_stereo=self.pose_stereo.copy(),
            pose_temporal=self.pose_temporal.copy(),
            mask_logits=self.mask_logits.copy(),
            adam_m={k: m.copy() for k, m in self.adam_m.items()},
            adam_v={k: v.copy() for k, v in self.adam_v.items()},
            adam_t=self.adam_t, step=self.step)


def init_state(height: int, width: int, baseline: float,
               config: OptimizeConfig) -> SceneState:
    """Fresh state: mid-range disparity, rig baseline, confident mask."""
    disp = {v: DisparityField(np.zeros((height, width)), config.d_max) for v in VIEWS}
    pose_stereo = np.array([baseline, 0, 0, 0, 0, 0], dtype=np.float64)
    pose_temporal = np.zeros(6)
    mask_logits = np.full((height, width), config.mask_init_logit, dtype=np.float64)
    state = SceneState(disp, pose_stereo, pose_temporal, mask_logits, {}, {})
    _reset_adam(state)
    return state


def _reset_adam(state: SceneState):
    state.adam_m = {k: np.zeros_like(p) for k, p in state.params().items()}
    state.adam_v = {k: np.zeros_like(p) for k, p in state.params().items()}
    state.adam_t = 0


def adam_step(params: dict, grads: dict, moments, t: int, config: OptimizeConfig,
              lr: float | None = None) -> None:
    """One bias-corrected Adam update, in place, for every parameter block.

    ``moments`` is the (m, v) pair of dicts; ``t`` is the 1-based step index.
    """
    if t < 1:
        raise ValueError("Adam step index must be >= 1")
    m, v = moments
    step_size = config.lr if lr is None else lr
    c1 = 1.0 - config.beta1 ** t
    c2 = 1.0 - config.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise OptimizationError(f"non-finite gradient in block '{name}'")
        m[name] = config.beta1 * m[name] + (1.0 - config.beta1) * g
        v[name] = config.beta2 * v[name] + (1.0 - config.beta2) * g * g
        p -= step_size * (m[name] / c1) / (np.sqrt(v[name] / c2) + config.eps)


def lr_schedule(step: int, config: OptimizeConfig, total_steps: int | None = None) -> float:
    """Constant-then-halving schedule over the whole run.

    The first span covers the fraction of steps up to the first breakpoint
    (default 60%); the rate halves at each subsequent breakpoint (defaults
    80%, i.e. two trailing 20% spans at half and quarter rate).
    """
    if step < 0:
        raise ValueError("step must be >= 0")
    total = config.iterations * config.scales if total_steps is None else total_steps
    if total <= 0:
        return config.lr
    frac = step / total
    halvings = sum(1 for b in config.schedule_breakpoints if frac >= b)
    return config.lr * (0.5 ** halvings)


@dataclass
class TraceRow:
    iteration: int
    scale: int
    lr: float
    image: float
    smooth: float
    consistency: float
    explainability: float
    total: float


def _check_finite(breakdown: LossBreakdown, iteration: int):
    for term in ("image", "smooth", "consistency", "explainability", "total"):
        if not np.isfinite(getattr(breakdown, term)):
            raise OptimizationError(
                f"non-finite loss at iteration {iteration}: term '{term}'")


def optimize_scene(sample, config: OptimizeConfig):
    """Coarse-to-fine direct optimization of one scene.

    ``sample`` provides images (dict over views), intrinsics, and baseline
    (see :class:`depthopt.dataio.SceneSample`). Returns the final full-
    resolution state and the per-iteration loss trace.
    """
    K_full = sample.intrinsics
    H, W = K_full.height, K_full.width
    dims = pyramid_dims(H, W, config.scales)  # index 0 = full resolution
    n_stages = len(dims)
    total_steps = config.iterations * config.scales

    # Anti-aliased image pyramid and matching intrinsics chain.
    from .sampler import downsample2x_mean
    pyramid = [dict(sample.images)]
    K_chain = [K_full]
    for j in range(1, n_stages):
        pyramid.append({view: downsample2x_mean(pyramid[j - 1][view]) for view in VIEWS})
        K_chain.append(K_chain[j - 1].halved())

    state = init_state(*dims[n_stages - 1], sample.baseline, config)
    trace: list[TraceRow] = []

    for stage in range(n_stages):
        level = n_stages - 1 - stage
        hw = dims[level]
        if stage > 0:
            plan = get_resize_plan(dims[level + 1], hw)
            for view in VIEWS:
                state.disp[view] = DisparityField(plan.forward(state.disp[view].logits),
                                                  config.d_max)
            state.mask_logits = plan.forward(state.mask_logits)
            _reset_adam(state)
        K_stage = K_chain[level]
        images = pyramid[level]
        ctx = SceneContext(images, K_stage, config.scales)

        for _ in range(config.iterations):
            lr = lr_schedule(state.step, config, total_steps)
            breakdown, grads = total_loss(state, images, K_stage, sample.baseline,
                                          config.weights, config.scales, ctx=ctx)
            _check_finite(breakdown, state.step)
            trace.append(TraceRow(state.step, stage, lr, breakdown.image,
                                  breakdown.smooth, breakdown.consistency,
                                  breakdown.explainability, breakdown.total))
            if config.freeze_stereo_pose:
                grads["pose_stereo"][:] = 0.0
            state.adam_t += 1
            try:
                adam_step(state.params(), grads, (state.adam_m, state.adam_v),
                          state.adam_t, config, lr)
            except OptimizationError as exc:
                raise OptimizationError(f"iteration {state.step}: {exc}") from exc
            state.step += 1

    return state, trace


# ---------------------------------------------------------------------------
# Gradient checking


def make_gradcheck_scene(seed: int, size: int = 8, d_max: float = 0.3):
    """A small randomized scene engineered for finite-difference checking.

    Construction keeps the objective smooth within the FD stencil: disparity
    logits carry a diagonal ramp so field differences stay sign-definite,
    target views get a constant brightness offset so photometric residuals
    stay away from zero, and pose/baseline magnitudes keep warp coordinates
    clear of integer lattice lines and the image border.
    """
    rng = np.random.default_rng(seed)
    H = W = size
    K = Intrinsics(float(W), float(W), (W - 1) / 2.0, (H - 1) / 2.0, W, H)
    baseline = 0.55

    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    ramp = 0.26 * (ii + jj) / (2.0 * (size - 1))
    offsets = {"left": 0.0, "right": 0.2, "left_next": 0.4, "right_next": 0.6}
    disp = {}
    for view in VIEWS:
        noise = rng.uniform(-0.006, 0.006, (H, W))
        disp[view] = DisparityField(ramp + offsets[view] + noise, d_max)

    lattice = rng.uniform(0.2, 0.6, (3, 3, 3))
    from .sampler import resize_bilinear
    base_img = resize_bilinear(lattice, (H, W))
    images = {"left": base_img}
    for view in VIEWS[1:]:
        images[view] = base_img + 0.25

    pose_stereo = np.array([baseline, 0.05, 0.004, 0.002, -0.001, 0.0008])
    pose_temporal = np.array([0.02, 0.03, 0.008, 0.002, 0.004, 0.002])
    mask_logits = rng.uniform(-0.5, 1.5, (H, W))

    state = SceneState(disp, pose_stereo, pose_temporal, mask_logits, {}, {})
    _reset_adam(state)
    return state, images, K, baseline


def gradcheck(state: SceneState, images: dict, K: Intrinsics, baseline: float,
              weights: LossWeights | None = None, scales: int = 4,
              eps: float = 1e-4, negate_block: str | None = None) -> dict:
    """Central finite differences of the total loss versus analytic gradients.

    Returns the per-block relative error ``max|a - f| / max(|a|_inf, |f|_inf)``
    (0 when both sides vanish). ``negate_block`` flips one analytic gradient
    block first, to confirm the harness catches wrong gradients.
    """
    weights = weights or LossWeights()
    ctx = SceneContext(images, K, scales)
    _, grads = total_loss(state, images, K, baseline, weights, scales, ctx=ctx)
    if negate_block is not None:
        grads[negate_block] = -grads[negate_block]

    def value_at(params_override: dict) -> float:
        s = state.copy()
        for name, arr in params_override.items():
            if name.startswith("disp_"):
                s.disp[name[5:]] = DisparityField(arr, state.disp[name[5:]].d_max)
            elif name == "pose_stereo":
                s.pose_stereo = arr
            elif name == "pose_temporal":
                s.pose_temporal = arr
            else:
                s.mask_logits = arr
        bd, _ = total_loss(s, images, K, baseline, weights, scales,
                           want_grads=False, ctx=ctx)
        return bd.total

    report = {}
    for name, p in state.params().items():
        fd = np.zeros_like(p)
        flat = p.ravel()
        fd_flat = fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            plus = p.copy()
            plus.ravel()[i] = orig + eps
            minus = p.copy()
            minus.ravel()[i] = orig - eps
            fd_flat[i] = (value_at({name: plus}) - value_at({name: minus})) / (2.0 * eps)
        a = grads[name]
        scale = max(np.abs(a).max(), np.abs(fd).max())
        report[name] = 0.0 if scale == 0.0 else float(np.abs(a - fd).max() / scale)
    return report


def run_gradcheck(seeds=range(20), size: int = 8, eps: float = 1e-4,
                  weights: LossWeights | None = None, scales: int = 4,
                  negate_block: str | None = None):
    """Gradcheck over several seeded scenes; returns {seed: {block: err}}."""
    results = {}
    for seed in seeds:
        state, images, K, baseline = make_gradcheck_scene(seed, size)
        results[seed] = gradcheck(state, images, K, baseline, weights, scales,
                                  eps, negate_block)
    return results
