"""Central finite-difference checks shared by the unit and acceptance tests."""

import numpy as np
from scipy.spatial.transform import Rotation

from mvcvox.geometry import CameraPose, look_at
from mvcvox.losses import LossConfig, combined, l3d, lmvc
from mvcvox.model import Arch, _forward, backward, init_params

H = 1e-4
FLOOR = 1e-6


def rel_error(analytic, numeric, floor=FLOOR):
    """Max relative error over entries where either gradient exceeds ``floor``."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    big = np.maximum(np.abs(analytic), np.abs(numeric))
    sel = big > floor
    if not sel.any():
        return 0.0
    return float((np.abs(analytic - numeric)[sel] / big[sel]).max())


def fd_entries(f, x, idx, h=H):
    """Central differences of scalar ``f`` at flat positions ``idx`` of ``x``."""
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        out[n] = (up - down) / (2 * h)
    return out


def random_instance(seed):
    """Small random loss problem: predictions, binary gt and a pose list."""
    rng = np.random.default_rng(seed)
    res = int(rng.integers(4, 9))
    k = int(rng.integers(1, 3))
    n = int(rng.integers(2, 4))
    pred = rng.uniform(0.05, 0.95, size=(k, n, res, res, res))
    gt = (rng.random((n, res, res, res)) < rng.uniform(0.1, 0.5)).astype(float)
    if seed % 2:
        # a circular rig
        poses = [look_at(2 * np.pi * i / n) for i in range(n)]
    else:
        poses = [CameraPose(Rotation.random(random_state=seed * 7 + i).as_matrix()) for i in range(n)]
    cfg = LossConfig(gamma=float(rng.uniform(0.2, 0.8)) if seed % 3 else None, lam=float(rng.uniform(0.05, 1.0)))
    return pred, gt, poses, cfg


def _sample_idx(size, seed, count=48):
    rng = np.random.default_rng(seed + 99)
    return np.sort(rng.choice(size, size=min(count, size), replace=False))


def check_l3d(seed):
    pred, gt, _, cfg = random_instance(seed)
    _, g = l3d(pred, gt, cfg)
    idx = _sample_idx(pred.size, seed)
    num = fd_entries(lambda p: l3d(p, gt, cfg)[0], pred, idx)
    return rel_error(g.reshape(-1)[idx], num)


def check_lmvc(seed):
    pred, _, poses, cfg = random_instance(seed)
    _, g = lmvc(pred, poses, cfg)
    idx = _sample_idx(pred.size, seed)
    num = fd_entries(lambda p: lmvc(p, poses, cfg)[0], pred, idx)
    return rel_error(g.reshape(-1)[idx], num)


def check_combined(seed):
    pred, gt, poses, cfg = random_instance(seed)
    g = combined(pred, gt, poses, cfg).grad
    idx = _sample_idx(pred.size, seed)
    num = fd_entries(lambda p: combined(p, gt, poses, cfg).total, pred, idx)
    return rel_error(g.reshape(-1)[idx], num)


TINY_ARCH = dict(img=16, res=8, k_stacks=2, channels=(3, 4, 4), dec=4)


def tiny_problem(seed):
    """A net with fewer than 2k parameters, float64, and one N-view scene."""
    rng = np.random.default_rng(seed)
    arch = Arch(**TINY_ARCH)
    assert arch.n_params <= 2000
    params = init_params(arch, seed, dtype=np.float64)
    params.values[:] += rng.normal(scale=0.05, size=params.values.shape)  # non-zero biases too
    n = int(rng.integers(1, 4))
    images = (rng.random((n, 1, 16, 16)) < 0.4).astype(float)
    gts = (rng.random((n, 8, 8, 8)) < 0.3).astype(float)
    poses = [look_at(2 * np.pi * i / n) for i in range(n)]
    cfg = LossConfig(gamma=0.6 if seed % 2 else None, lam=0.2 if seed % 3 else 0.0)
    return params, images, gts, poses, cfg


def _relu_pattern(params, images):
    _, cache = _forward(params, images)
    acts = [cache[k] for k in ("a1", "a2", "a3", "a4", "a5")] + [h for h in cache["hidden"] if h is not None]
    return np.concatenate([(a > 0).reshape(-1) for a in acts])


MODEL_H = 1e-5


def check_model(seed, count=40):
    """Max relative error of the parameter gradient of a tiny net.

    Entries whose +-h perturbation flips any ReLU are skipped: the loss is
    not differentiable across such a kink and a difference quotient there
    says nothing about the analytic gradient.  Returns ``(error, skipped)``.
    """
    params, images, gts, poses, cfg = tiny_problem(seed)
    _, grad = backward(params, images, gts, poses, cfg)
    idx = _sample_idx(params.values.size, seed, count)
    base = _relu_pattern(params, images)
    keep, num = [], []
    for i in idx:
        vals = []
        smooth = True
        for sign in (1, -1):
            p = params.copy()
            p.values[i] += sign * MODEL_H
            smooth &= np.array_equal(_relu_pattern(p, images), base)
            vals.append(backward(p, images, gts, poses, cfg)[0].total)
        if smooth:
            keep.append(i)
            num.append((vals[0] - vals[1]) / (2 * MODEL_H))
    return rel_error(grad[keep], num), len(idx) - len(keep)
