"""Independent brute-force reference implementations used as test oracles.

These deliberately use explicit scalar loops so they share no code with the
vectorized paths they check.
"""

import numpy as np


def scalar_ssim_oracle(x, y, c1=0.01, c2=0.03):
    """3x3-window SSIM with border cropping, one window at a time."""
    H, W = x.shape
    out = np.zeros((H, W))
    for i in range(H):
        for j in range(W):
            xs, ys = [], []
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if 0 <= a < H and 0 <= b < W:
                        xs.append(x[a, b])
                        ys.append(y[a, b])
            xs = np.array(xs)
            ys = np.array(ys)
            mx, my = xs.mean(), ys.mean()
            vx = (xs * xs).mean() - mx * mx
            vy = (ys * ys).mean() - my * my
            cov = (xs * ys).mean() - mx * my
            out[i, j] = ((2 * mx * my + c1) * (2 * cov + c2)
                         / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return out


def scalar_eigen_oracle(pred, gt, valid, cap):
    """Per-pixel loops of the depth error metric definitions."""
    ps, gs = [], []
    for i in range(gt.shape[0]):
        for j in range(gt.shape[1]):
            if valid[i, j]:
                ps.append(min(max(pred[i, j], 1e-3), cap))
                gs.append(min(max(gt[i, j], 1e-3), cap))
    ps, gs = np.array(ps), np.array(gs)
    ratio = np.maximum(ps / gs, gs / ps)
    return dict(
        abs_rel=np.mean(np.abs(ps - gs) / gs),
        sq_rel=np.mean((ps - gs) ** 2 / gs),
        rmse=np.sqrt(np.mean((ps - gs) ** 2)),
        rmse_log=np.sqrt(np.mean((np.log(ps) - np.log(gs)) ** 2)),
        delta1=np.mean(ratio < 1.25),
        delta2=np.mean(ratio < 1.25 ** 2),
        delta3=np.mean(ratio < 1.25 ** 3),
    )
