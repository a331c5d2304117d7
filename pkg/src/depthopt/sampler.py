"""Differentiable bilinear sampling and resizing.

Sampling reads a source image at the continuous coordinates of a
:class:`~depthopt.geometry.CoordGrid`; invalid grid entries produce value 0
and are excluded from downstream loss denominators. Analytic gradients are
provided with respect to both the source values and the coordinates.

The interpolation is written in the form ``a + f * (b - a)`` so that integer
coordinates reproduce source pixels bit-exactly (f = 0) and constant fields
resize to constant fields bit-exactly. The derivative at exact integer
coordinates follows the forward-difference (right/upper neighbor) convention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CoordGrid


@dataclass
class SampledImage:
    """Sampled values plus the per-pixel validity inherited from the grid."""

    values: np.ndarray
    valid: np.ndarray


class _SampleCache:
    __slots__ = ("shape_src", "idx00", "idx01", "idx10", "idx11", "fu", "fv",
                 "c00", "c01", "c10", "c11", "valid")

    def __init__(self, **kw):
        for k, v in kw.items():
            setattr(self, k, v)


def _sample_forward(src: np.ndarray, u: np.ndarray, v: np.ndarray,
                    valid: np.ndarray):
    H, W = src.shape[:2]
    x0 = np.floor(u).astype(np.intp)
    y0 = np.floor(v).astype(np.intp)
    fu = u - x0
    fv = v - y0
    x0 = np.clip(x0, 0, W - 1, out=x0)
    y0 = np.clip(y0, 0, H - 1, out=y0)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)

    # Flat row-major corner indices; gathers on the flattened source are
    # faster than 2-D fancy indexing and the VJP reuses them.
    idx00 = y0 * W + x0
    idx01 = idx00 + (x1 - x0)
    idx10 = y1 * W + x0
    idx11 = idx10 + (x1 - x0)
    flat = src.reshape(-1, src.shape[2]) if src.ndim == 3 else src.ravel()
    c00 = flat[idx00]
    c01 = flat[idx01]
    c10 = flat[idx10]
    c11 = flat[idx11]

    if src.ndim == 3:
        fu_b = fu[..., None]
        fv_b = fv[..., None]
        mask = valid[..., None]
    else:
        fu_b, fv_b, mask = fu, fv, valid

    top = c00 + fu_b * (c01 - c00)
    bot = c10 + fu_b * (c11 - c10)
    out = top + fv_b * (bot - top)
    out = np.where(mask, out, 0.0)

    cache = _SampleCache(shape_src=src.shape, idx00=idx00, idx01=idx01,
                         idx10=idx10, idx11=idx11, fu=fu, fv=fv,
                         c00=c00, c01=c01, c10=c10, c11=c11, valid=valid)
    return out, cache


def _scatter_corners(cache: _SampleCache, gw00, gw01, gw10, gw11):
    """Deterministic (row-major) scatter-add of corner cotangents."""
    H, W = cache.shape_src[:2]
    idx00 = cache.idx00.ravel()
    idx01 = cache.idx01.ravel()
    idx10 = cache.idx10.ravel()
    idx11 = cache.idx11.ravel()
    if len(cache.shape_src) == 3:
        C = cache.shape_src[2]
        grad = np.zeros((H * W, C))
        for c in range(C):
            grad[:, c] = (np.bincount(idx00, weights=gw00[..., c].ravel(), minlength=H * W)
                          + np.bincount(idx01, weights=gw01[..., c].ravel(), minlength=H * W)
                          + np.bincount(idx10, weights=gw10[..., c].ravel(), minlength=H * W)
                          + np.bincount(idx11, weights=gw11[..., c].ravel(), minlength=H * W))
        return grad.reshape(cache.shape_src)
    grad = (np.bincount(idx00, weights=gw00.ravel(), minlength=H * W)
            + np.bincount(idx01, weights=gw01.ravel(), minlength=H * W)
            + np.bincount(idx10, weights=gw10.ravel(), minlength=H * W)
            + np.bincount(idx11, weights=gw11.ravel(), minlength=H * W))
    return grad.reshape(H, W)


def _sample_vjp(cache: _SampleCache, g: np.ndarray, need_src_grad: bool = True):
    """Backward pass of :func:`_sample_forward`.

    Returns (grad_src or None, grad_u, grad_v); the upstream cotangent ``g``
    is zeroed at invalid pixels before use.
    """
    channels = len(cache.shape_src) == 3
    if channels:
        g = np.where(cache.valid[..., None], g, 0.0)
        fu = cache.fu[..., None]
        fv = cache.fv[..., None]
    else:
        g = np.where(cache.valid, g, 0.0)
        fu, fv = cache.fu, cache.fv

    c00, c01, c10, c11 = cache.c00, cache.c01, cache.c10, cache.c11

    du = (1.0 - fv) * (c01 - c00) + fv * (c11 - c10)
    dv = (1.0 - fu) * (c10 - c00) + fu * (c11 - c01)
    if channels:
        grad_u = (g * du).sum(axis=-1)
        grad_v = (g * dv).sum(axis=-1)
    else:
        grad_u = g * du
        grad_v = g * dv

    grad_src = None
    if need_src_grad:
        w00 = (1.0 - fu) * (1.0 - fv)
        w01 = fu * (1.0 - fv)
        w10 = (1.0 - fu) * fv
        w11 = fu * fv
        grad_src = _scatter_corners(cache, w00 * g, w01 * g, w10 * g, w11 * g)
    return grad_src, grad_u, grad_v


def bilinear_sample(src: np.ndarray, grid: CoordGrid) -> SampledImage:
    """Sample ``src`` at the grid coordinates; invalid pixels become 0."""
    src = np.asarray(src, dtype=np.float64)
    if src.size == 0:
        raise ValueError("source image is empty")
    if grid.u.shape != grid.v.shape or grid.u.shape != grid.valid.shape:
        raise ValueError("grid component shapes disagree")
    out, _ = _sample_forward(src, grid.u, grid.v, grid.valid)
    return SampledImage(out, grid.valid.copy())


def bilinear_sample_vjp(src: np.ndarray, grid: CoordGrid, upstream: np.ndarray):
    """Analytic gradients of :func:`bilinear_sample`.

    Returns ``(grad_src, (grad_u, grad_v))`` for an upstream cotangent of the
    sampled output; gradients vanish at invalid pixels.
    """
    src = np.asarray(src, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _, cache = _sample_forward(src, grid.u, grid.v, grid.valid)
    grad_src, gu, gv = _sample_vjp(cache, upstream, need_src_grad=True)
    return grad_src, (gu, gv)


class _AxisPlan:
    """Gather/scatter plan for bilinear resampling along one axis."""

    def __init__(self, n_in: int, n_out: int):
        self.n_in = n_in
        self.n_out = n_out
        if n_out == 1:
            pos = np.zeros(1)
        else:
            pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        i0 = np.minimum(np.floor(pos).astype(np.intp), max(n_in - 2, 0))
        self.i0 = i0
        self.i1 = np.minimum(i0 + 1, n_in - 1)
        self.f = pos - i0
        self._flat_cache = {}

    def gather(self, x: np.ndarray) -> np.ndarray:
        a = x[self.i0]
        f = self.f.reshape((-1,) + (1,) * (x.ndim - 1))
        return a + f * (x[self.i1] - a)

    def _flat_idx(self, rest: int):
        key = rest
        cached = self._flat_cache.get(key)
        if cached is None:
            lane = np.arange(rest, dtype=np.intp)
            cached = ((self.i0[:, None] * rest + lane).ravel(),
                      (self.i1[:, None] * rest + lane).ravel())
            self._flat_cache[key] = cached
        return cached

    def scatter(self, g: np.ndarray) -> np.ndarray:
        rest_shape = g.shape[1:]
        rest = int(np.prod(rest_shape)) if rest_shape else 1
        f = self.f.reshape((-1,) + (1,) * (g.ndim - 1))
        w0 = ((1.0 - f) * g).ravel()
        w1 = (f * g).ravel()
        idx0, idx1 = self._flat_idx(rest)
        out = (np.bincount(idx0, weights=w0, minlength=self.n_in * rest)
               + np.bincount(idx1, weights=w1, minlength=self.n_in * rest))
        return out.reshape((self.n_in,) + rest_shape)


class ResizePlan:
    """Separable bilinear resize between two grids, with its adjoint."""

    def __init__(self, in_hw, out_hw):
        self.in_hw = tuple(in_hw)
        self.out_hw = tuple(out_hw)
        self.rows = _AxisPlan(in_hw[0], out_hw[0])
        self.cols = _AxisPlan(in_hw[1], out_hw[1])

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = self.rows.gather(x)
        y = np.moveaxis(self.cols.gather(np.moveaxis(y, 1, 0)), 0, 1)
        return y

    def vjp(self, g: np.ndarray) -> np.ndarray:
        gy = np.moveaxis(self.cols.scatter(np.moveaxis(g, 1, 0)), 0, 1)
        return self.rows.scatter(gy)


_PLANS: dict = {}


def get_resize_plan(in_hw, out_hw) -> ResizePlan:
    key = (tuple(in_hw), tuple(out_hw))
    plan = _PLANS.get(key)
    if plan is None:
        plan = ResizePlan(in_hw, out_hw)
        _PLANS[key] = plan
    return plan


def resize_bilinear(x: np.ndarray, out_hw) -> np.ndarray:
    """Resample a (H, W) or (H, W, C) array to a new grid.

    Corner-aligned: output corners coincide with input corners, and constant
    inputs produce bit-identical constant outputs at any size.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[:2] == tuple(out_hw):
        return x.copy()
    return get_resize_plan(x.shape[:2], out_hw).forward(x)


def downsample2x_mean(x: np.ndarray) -> np.ndarray:
    """Halve both spatial dims by averaging 2x2 blocks (anti-aliased).

    Odd trailing rows/columns are dropped, matching floor-halved pyramid
    dims. Constant inputs stay bit-identical constants.
    """
    H, W = x.shape[:2]
    h, w = H // 2, W // 2
    v = x[:2 * h, :2 * w]
    return 0.25 * (v[0::2, 0::2] + v[0::2, 1::2] + v[1::2, 0::2] + v[1::2, 1::2])


def downsample2x_mean_vjp(g: np.ndarray, in_shape) -> np.ndarray:
    """Adjoint of :func:`downsample2x_mean`; dropped rows/cols get zero."""
    out = np.zeros(in_shape)
    h, w = g.shape[:2]
    q = 0.25 * g
    out[0:2 * h:2, 0:2 * w:2] = q
    out[0:2 * h:2, 1:2 * w:2] = q
    out[1:2 * h:2, 0:2 * w:2] = q
    out[1:2 * h:2, 1:2 * w:2] = q
    return out
