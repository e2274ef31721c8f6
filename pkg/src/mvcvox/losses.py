"""Occupancy losses with analytic gradients.

Predictions are handled as arrays of shape ``(K, N, R, R, R)``: ``K`` stacks
of the predictor, ``N`` views, each a grid indexed ``[z, y, x]`` in its own
view frame.  Ground truth has shape ``(N, R, R, R)``.  Index ``i`` runs over
views and ``j`` over stacks.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .geometry import CameraPose, VoxelGrid, poses_of, relative_transform, resample_operator

DEFAULT_LAMBDA = 0.2
GAMMA_CLIP = (0.01, 0.99)


@dataclass(frozen=True)
class LossConfig:
    """``gamma=None`` balances classes per sample (fraction of empty voxels)."""

    gamma: Optional[float] = None
    lam: float = DEFAULT_LAMBDA
    eps: float = 1e-7
    extent: float = 1.0

    def __post_init__(self):
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0.0 < self.eps < 0.5:
            raise ValueError("eps must lie in (0, 0.5)")


@dataclass
class LossValue:
    total: float
    l3d: float
    lmvc: float
    grad: np.ndarray


def _stack(x, ndim: int) -> np.ndarray:
    if isinstance(x, VoxelGrid):
        return np.asarray(x.values, dtype=np.float64)
    if isinstance(x, (list, tuple)):
        return np.stack([_stack(e, ndim - 1) for e in x])
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != ndim:
        raise ValueError(f"expected {ndim}-d array of grids, got shape {a.shape}")
    return a


def _scatter_add(grad, views, values):
    """``grad[..., views] += values``, correct for repeated view indices."""
    for col, v in enumerate(views):
        grad[:, :, v] += values[:, :, col]


def balance_weight(gt: np.ndarray) -> float:
    """Fraction of unoccupied voxels, clipped into ``GAMMA_CLIP``."""
    gt = np.asarray(gt)
    return float(np.clip(1.0 - gt.mean(), *GAMMA_CLIP))


def l3d(pred, gt, cfg: LossConfig = LossConfig()):
    """Class-weighted binary cross entropy summed over stacks and views.

    Per grid: ``-mean(g*V*log(P) + (1-g)*(1-V)*log(1-P))`` with ``P`` clamped
    to ``[eps, 1-eps]``.  Returns ``(loss, dloss/dpred)``.
    """
    p = _stack(pred, 5)
    v = _stack(gt, 4)
    if p.shape[1:] != v.shape:
        raise ValueError(f"prediction shape {p.shape} does not match ground truth {v.shape}")
    if not np.isin(v, (0.0, 1.0)).all():
        raise ValueError("ground-truth occupancy must be 0 or 1")
    g = cfg.gamma if cfg.gamma is not None else balance_weight(v)
    m = v[0].size
    pc = np.clip(p, cfg.eps, 1.0 - cfg.eps)
    per_voxel = g * v * np.log(pc) + (1.0 - g) * (1.0 - v) * np.log1p(-pc)
    loss = -per_voxel.sum() / m
    grad = -(g * v / pc - (1.0 - g) * (1.0 - v) / (1.0 - pc)) / m
    grad = np.where((p >= cfg.eps) & (p <= 1.0 - cfg.eps), grad, 0.0)
    return float(loss), grad


@lru_cache(maxsize=64)
def _operator_pair(res, extent, rot_bytes, trans_bytes, dtype):
    xf = CameraPose(np.frombuffer(rot_bytes).reshape(3, 3), np.frombuffer(trans_bytes))
    mat, mask = resample_operator(res, extent, xf)
    mat = mat.astype(dtype)
    return mat, mat.T.tocsr(), mask


def _pair_groups(poses, res, extent, dtype=np.float64):
    """Group ordered view pairs ``(i, l)`` sharing the same resampling operator.

    The operator brings view ``l``'s grid into view ``i``'s frame, i.e. it
    evaluates grid ``l`` at ``P(x)`` where ``P`` maps frame ``i`` to frame ``l``.
    Returns ``[((S, S^T, mask), pairs), ...]``.
    """
    groups = defaultdict(list)
    for i, pi in enumerate(poses):
        for l, pl in enumerate(poses):
            if i == l:
                continue
            xf = relative_transform(pl, pi)
            key = (np.round(xf.rotation, 12).tobytes(), np.round(xf.translation, 12).tobytes())
            groups[key].append((i, l))
    return [(_operator_pair(res, float(extent), *key, np.dtype(dtype)), pairs) for key, pairs in groups.items()]


def lmvc(pred, rig, cfg: LossConfig = LossConfig()):
    """Multi-view consistency: squared disagreement between each view's grid
    and every other view's grid resampled into its frame.

    Each ordered pair contributes the mean over in-bounds voxels; pairs are
    summed over views and stacks.  Gradients reach both the reference grid
    and, through the trilinear weights, the resampled one.  float32 input is
    kept in float32; anything else is evaluated in float64.
    """
    p = pred if isinstance(pred, np.ndarray) and pred.dtype == np.float32 else _stack(pred, 5)
    if p.ndim != 5:
        raise ValueError(f"expected 5-d array of grids, got shape {p.shape}")
    poses = poses_of(rig)
    k_stacks, n_views = p.shape[:2]
    if len(poses) != n_views:
        raise ValueError(f"rig has {len(poses)} poses but predictions have {n_views} views")
    res = p.shape[2]
    # voxel-major layout keeps the sparse products on contiguous operands
    vox = np.ascontiguousarray(p.reshape(k_stacks, n_views, -1).transpose(2, 0, 1))
    grad = np.zeros_like(vox)
    loss = 0.0
    if n_views < 2:
        return 0.0, grad.transpose(1, 2, 0).reshape(p.shape)
    m = vox.shape[0]
    for (mat, mat_t, mask), pairs in _pair_groups(poses, res, cfg.extent, vox.dtype):
        cnt = int(mask.sum())
        if cnt == 0:
            continue
        ii = np.array([i for i, _ in pairs])
        ll = np.array([l for _, l in pairs])
        moved = (mat @ vox[:, :, ll].reshape(m, -1)).reshape(m, k_stacks, len(pairs))
        diff = (vox[:, :, ii] - moved) * mask[:, None, None]
        loss += float(np.square(diff, dtype=np.float64).sum()) / cnt
        d = diff * (2.0 / cnt)
        back = (mat_t @ d.reshape(m, -1)).reshape(m, k_stacks, len(pairs))
        _scatter_add(grad, ii, d)
        _scatter_add(grad, ll, -back)
    return loss, grad.transpose(1, 2, 0).reshape(p.shape)


def combined(pred, gt, rig, cfg: LossConfig = LossConfig()) -> LossValue:
    """``l3d + lam * lmvc`` with the matching gradient."""
    a, ga = l3d(pred, gt, cfg)
    if cfg.lam == 0.0:
        # consistency term is not evaluated when it carries no weight
        if len(poses_of(rig)) != ga.shape[1]:
            raise ValueError("rig size does not match number of views")
        b, gb = 0.0, 0.0
    else:
        b, gb = lmvc(pred, rig, cfg)
    return LossValue(total=a + cfg.lam * b, l3d=a, lmvc=b, grad=ga + cfg.lam * gb)
