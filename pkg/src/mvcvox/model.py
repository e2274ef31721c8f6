"""Toy image -> occupancy-slice predictor with stacked intermediate supervision.

The network is a small strided conv encoder/decoder.  Its last layer emits
``res`` channels on a ``res x res`` map: channel ``z`` is the occupancy slice
at depth ``z`` of the view-frame grid, so pixel columns line up with voxel
columns.  Each further stack refines the previous stack's probabilities
together with the decoder features, and every stack is supervised.

All ``N`` views of a scene go through the same parameters; their gradients
accumulate into one update.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .geometry import TriangleMesh, VoxelGrid
from .losses import LossConfig, LossValue, combined
from .losses import lmvc as lmvc_loss
from .nn import conv2d, conv2d_backward, sigmoid, upsample2, upsample2_backward
from .surface import marching_cubes

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "lr", "total", "l3d", "lmvc", "val_iou", "val_cd")


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, msg="non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {msg}")
        self.epoch = epoch


@dataclass(frozen=True)
class Arch:
    img: int = 64
    res: int = 32
    k_stacks: int = 2
    channels: tuple = (16, 32, 48)
    dec: int = 32
    inputs: tuple = ("silhouette",)
    coords: bool = True

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.img != 2 * self.res:
            raise ValueError("image size must be twice the grid resolution")
        if self.res % 4:
            raise ValueError("grid resolution must be a multiple of 4")
        if self.k_stacks < 1:
            raise ValueError("k_stacks must be >= 1")
        if len(self.channels) != 3:
            raise ValueError("channels must list three encoder widths")

    @property
    def in_channels(self) -> int:
        return len(self.inputs) + (2 if self.coords else 0)

    def layers(self) -> list:
        """``(name, kernel, cin, cout)`` for every conv layer in order."""
        c1, c2, c3 = self.channels
        out = [
            ("enc1", 3, self.in_channels, c1),
            ("enc2", 3, c1, c2),
            ("enc3", 3, c2, c3),
            ("dec2", 3, c3 + c2, c2),
            ("dec1", 3, c2 + c1, self.dec),
            ("head1", 1, self.dec, self.res),
        ]
        for k in range(2, self.k_stacks + 1):
            out += [(f"mix{k}", 3, self.res + self.dec, self.dec), (f"head{k}", 1, self.dec, self.res)]
        return out

    @property
    def n_params(self) -> int:
        return sum(k * k * ci * co + co for _, k, ci, co in self.layers())

    def descriptor(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_descriptor(cls, text: str) -> "Arch":
        d = json.loads(text)
        return cls(**d)


@dataclass
class PredictorParams:
    arch: Arch
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape != (self.arch.n_params,):
            raise ValueError(f"expected {self.arch.n_params} parameters, got {self.values.shape}")

    def copy(self) -> "PredictorParams":
        return PredictorParams(self.arch, self.values.copy())


def init_params(arch: Arch, seed: int = 0, dtype=np.float32) -> PredictorParams:
    """Uniform fan-in scaled weights (He-uniform), zero biases."""
    rng = np.random.default_rng(seed)
    chunks = []
    for _, k, ci, co in arch.layers():
        bound = math.sqrt(6.0 / (k * k * ci))
        chunks.append(rng.uniform(-bound, bound, size=k * k * ci * co))
        chunks.append(np.zeros(co))
    return PredictorParams(arch, np.concatenate(chunks).astype(dtype))


def _unpack(arch: Arch, values: np.ndarray) -> dict:
    out, pos = {}, 0
    for name, k, ci, co in arch.layers():
        n = k * k * ci * co
        out[name] = (values[pos:pos + n].reshape(k, k, ci, co), values[pos + n:pos + n + co])
        pos += n + co
    return out


def _prepare(arch: Arch, images: np.ndarray, dtype) -> np.ndarray:
    """(B, C, H, W) images -> NHWC input with optional coordinate channels."""
    x = np.asarray(images, dtype=dtype)
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != (len(arch.inputs), arch.img, arch.img):
        raise ValueError(f"expected images of shape (B, {len(arch.inputs)}, {arch.img}, {arch.img}), got {x.shape}")
    x = np.transpose(x, (0, 2, 3, 1))
    if arch.coords:
        c = ((np.arange(arch.img) + 0.5) / arch.img * 2.0 - 1.0).astype(dtype)
        yy = np.broadcast_to(c[None, :, None, None], x.shape[:3] + (1,))
        xx = np.broadcast_to(c[None, None, :, None], x.shape[:3] + (1,))
        x = np.concatenate([x, xx, yy], axis=-1)
    return np.ascontiguousarray(x)


def _forward(params: PredictorParams, images):
    arch = params.arch
    dtype = params.values.dtype
    L = _unpack(arch, params.values)
    x = _prepare(arch, images, dtype)
    cache = {}
    z, cache["enc1"] = conv2d(x, *L["enc1"], stride=2)
    a1 = np.maximum(z, 0)
    z, cache["enc2"] = conv2d(a1, *L["enc2"], stride=2)
    a2 = np.maximum(z, 0)
    z, cache["enc3"] = conv2d(a2, *L["enc3"], stride=2)
    a3 = np.maximum(z, 0)
    z, cache["dec2"] = conv2d(np.concatenate([upsample2(a3), a2], axis=-1), *L["dec2"])
    a4 = np.maximum(z, 0)
    z, cache["dec1"] = conv2d(np.concatenate([upsample2(a4), a1], axis=-1), *L["dec1"])
    a5 = np.maximum(z, 0)
    logits, cache["head1"] = conv2d(a5, *L["head1"])
    probs = [sigmoid(logits)]
    hidden = [None]
    for k in range(2, arch.k_stacks + 1):
        z, cache[f"mix{k}"] = conv2d(np.concatenate([probs[-1], a5], axis=-1), *L[f"mix{k}"])
        h = np.maximum(z, 0)
        logits, cache[f"head{k}"] = conv2d(h, *L[f"head{k}"])
        probs.append(sigmoid(logits))
        hidden.append(h)
    cache.update(a1=a1, a2=a2, a3=a3, a4=a4, a5=a5, probs=probs, hidden=hidden)
    # NHWC with channel = depth -> (K, B, z, y, x)
    grids = np.stack([np.transpose(p, (0, 3, 1, 2)) for p in probs])
    return grids, cache


def _backward(params: PredictorParams, cache: dict, dgrids: np.ndarray) -> np.ndarray:
    """Parameter gradient given d(loss)/d(probabilities) of shape (K, B, z, y, x)."""
    arch = params.arch
    dtype = params.values.dtype
    c1, c2, c3 = arch.channels
    grads = {}
    probs, hidden, a5 = cache["probs"], cache["hidden"], cache["a5"]
    da5 = np.zeros_like(a5)
    carry = 0.0
    for k in range(arch.k_stacks, 0, -1):
        p = probs[k - 1]
        dp = np.transpose(dgrids[k - 1], (0, 2, 3, 1)).astype(dtype) + carry
        dz = dp * p * (1 - p)
        dh, *grads[f"head{k}"] = conv2d_backward(dz, cache[f"head{k}"])
        if k == 1:
            da5 += dh
        else:
            dh = dh * (hidden[k - 1] > 0)
            dm, *grads[f"mix{k}"] = conv2d_backward(dh, cache[f"mix{k}"])
            carry = dm[..., :arch.res]
            da5 += dm[..., arch.res:]
    da5 *= cache["a5"] > 0
    dcat, *grads["dec1"] = conv2d_backward(da5, cache["dec1"])
    da4 = upsample2_backward(dcat[..., :c2]) * (cache["a4"] > 0)
    da1 = dcat[..., c2:]
    dcat, *grads["dec2"] = conv2d_backward(da4, cache["dec2"])
    da3 = upsample2_backward(dcat[..., :c3]) * (cache["a3"] > 0)
    da2 = dcat[..., c3:]
    d, *grads["enc3"] = conv2d_backward(da3, cache["enc3"])
    da2 = (da2 + d) * (cache["a2"] > 0)
    d, *grads["enc2"] = conv2d_backward(da2, cache["enc2"])
    da1 = (da1 + d) * (cache["a1"] > 0)
    _, *grads["enc1"] = conv2d_backward(da1, cache["enc1"], need_dx=False)
    out = []
    for name, *_ in arch.layers():
        dw, db = grads[name]
        out += [dw.reshape(-1), db.reshape(-1)]
    return np.concatenate(out).astype(dtype)


def forward(params: PredictorParams, image, extent: float = 1.0, frame: str = "view0") -> list:
    """Predict ``K`` occupancy grids (one per stack) from one image.

    ``image`` is ``(C, H, W)`` or, for a single channel, ``(H, W)``.
    """
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    grids, _ = _forward(params, image[None])
    return [VoxelGrid(g[0].astype(np.float64), extent, frame) for g in grids]


def predict(params: PredictorParams, images, batch: int = 32) -> np.ndarray:
    """Final-stack probabilities for a stack of images ``(B, C, H, W)``."""
    images = np.asarray(images)
    out = []
    for s in range(0, len(images), batch):
        grids, _ = _forward(params, images[s:s + batch])
        out.append(grids[-1])
    return np.concatenate(out)


def _shared_rig(samples) -> bool:
    first = samples[0]
    return all(s.spec.extent == first.spec.extent and len(s.rig.poses) == len(first.rig.poses)
               and all(np.array_equal(a.rotation, b.rotation) and np.array_equal(a.translation, b.translation)
                       for a, b in zip(s.rig.poses, first.rig.poses))
               for s in samples[1:])


def _batch_loss(params, samples, loss_cfg: LossConfig, with_grad: bool = True):
    """Mean combined loss over ``samples`` (each with the same view count)."""
    arch = params.arch
    n = samples[0].n_views
    images = np.concatenate([s.images(arch.inputs) for s in samples])
    grids, cache = _forward(params, images)
    dgrids = np.zeros(grids.shape, dtype=np.float64) if with_grad else None
    scale = 1.0 / len(samples)
    batched = loss_cfg.lam > 0 and _shared_rig(samples)
    # with a common rig the consistency term of the whole batch is one call:
    # samples simply become extra stacks
    cfg_each = replace(loss_cfg, lam=0.0) if batched else loss_cfg
    total = l3d = lmvc = 0.0
    for b, s in enumerate(samples):
        sl = slice(b * n, (b + 1) * n)
        lv = combined(grids[:, sl], s.gt_occ, s.rig, replace(cfg_each, extent=s.spec.extent))
        l3d += lv.l3d * scale
        lmvc += lv.lmvc * scale
        if with_grad:
            dgrids[:, sl] = lv.grad * scale
    if batched:
        k = grids.shape[0]
        stacked = grids.reshape((k * len(samples), n) + grids.shape[2:])
        value, g = lmvc_loss(stacked, samples[0].rig, replace(loss_cfg, extent=samples[0].spec.extent))
        lmvc = value * scale
        if with_grad:
            dgrids += (loss_cfg.lam * scale) * g.reshape(grids.shape)
    total = l3d + loss_cfg.lam * lmvc
    grad = _backward(params, cache, dgrids) if with_grad else None
    return LossValue(total, l3d, lmvc, dgrids), grad


def backward(params: PredictorParams, images, gts, rig, cfg: LossConfig = LossConfig()):
    """Loss and parameter gradient for one scene seen from ``N`` views.

    Every view runs through the same parameters and the parameter gradient
    is the sum of the per-view contributions.  Returns ``(LossValue, grad)``
    where ``LossValue.grad`` is the gradient w.r.t. the predicted grids.
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    gt = np.stack([np.asarray(g, dtype=np.float64) for g in gts])
    if len(gt) != len(images):
        raise ValueError("need one ground-truth grid per image")
    grids, cache = _forward(params, images)
    lv = combined(grids, gt, rig, cfg)
    return lv, _backward(params, cache, lv.grad)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params))


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    grad = np.asarray(grad)
    if grad.shape != params.shape or state.m.shape != params.shape:
        raise ValueError("params, gradient and optimizer moments must be co-shaped")
    bad = ~np.isfinite(grad)
    if bad.any():
        raise FloatingPointError(
            f"non-finite gradient in {int(bad.sum())} entries (first at index {int(np.argmax(bad))}); step aborted"
        )
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    mhat = m / (1 - state.beta1 ** t)
    vhat = v / (1 - state.beta2 ** t)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    new = new.astype(params.dtype)
    if not np.isfinite(new).all():
        raise FloatingPointError("Adam produced non-finite parameters")
    return new, AdamState(m.astype(params.dtype), v.astype(params.dtype), t,
                          state.beta1, state.beta2, state.eps)


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    lr_decay_every: int = 20
    lr_decay_factor: float = 0.1
    epochs: int = 40
    batch_size: int = 4
    n_views: int = 2
    k_stacks: int = 2
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    channels: tuple = (16, 32, 48)
    dec: int = 32
    inputs: tuple = ("silhouette",)
    eval_every: int = 1
    val_points: int = 2000

    def __post_init__(self):
        if self.n_views < 1 or self.k_stacks < 1 or not self.lr > 0:
            raise ValueError("need n_views >= 1, k_stacks >= 1 and lr > 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        """Learning rate used during 1-based ``epoch``."""
        return self.lr * self.lr_decay_factor ** ((epoch - 1) // self.lr_decay_every)

    def arch_for(self, sample) -> Arch:
        return Arch(img=sample.silhouettes.shape[-1], res=sample.gt_occ.shape[-1], k_stacks=self.k_stacks,
                    channels=self.channels, dec=self.dec, inputs=self.inputs)


def occluded_mask(res: int) -> np.ndarray:
    """Voxels behind the subject centre as seen from the camera (``z > 0``)."""
    m = np.zeros((res, res, res), dtype=bool)
    m[res // 2:] = True
    return m


def evaluate_model(params: PredictorParams, samples, views: str = "first", iso: float = 0.5,
                   chamfer_points: int = 0, seed: int = 0) -> list:
    """Per-item IoU (full grid and occluded half) and optional Chamfer distance.

    ``views="first"`` evaluates view 0 of each sample, ``"all"`` every view.
    """
    from .metrics import iou_arrays, mesh_to_points, chamfer

    arch = params.arch
    occ_mask = occluded_mask(arch.res)
    rows = []
    for si, s in enumerate(samples):
        idx = range(s.n_views) if views == "all" else [0]
        imgs = s.images(arch.inputs)[list(idx)]
        pred = predict(params, imgs)
        for j, k in enumerate(idx):
            gt = s.gt_occ[k]
            row = {"sample": si, "view": k,
                   "iou": iou_arrays(pred[j], gt, iso),
                   "iou_occluded": iou_arrays(pred[j], gt, iso, occ_mask)}
            if chamfer_points:
                mp = marching_cubes(VoxelGrid(pred[j].astype(np.float64), s.spec.extent), iso)
                mg = marching_cubes(VoxelGrid(gt.astype(np.float64), s.spec.extent), iso)
                if mp.is_empty() or mg.is_empty():
                    row["cd"] = float("inf")
                else:
                    row["cd"] = chamfer(mesh_to_points(mp, chamfer_points, seed),
                                        mesh_to_points(mg, chamfer_points, seed))
            rows.append(row)
    return rows


def train(dataset: Sequence, cfg: TrainConfig, val: Optional[Sequence] = None,
          params: Optional[PredictorParams] = None):
    """Adam training with step decay; returns ``(params, history)``.

    ``dataset`` holds ``SceneSample``s; each is reduced to ``cfg.n_views``
    equidistant views.  History row 0 is the loss of the initial parameters;
    row ``e`` holds the mean training losses during epoch ``e`` and, every
    ``eval_every`` epochs, validation IoU / Chamfer on view 0 of ``val``.
    """
    if not len(dataset):
        raise ValueError("dataset is empty")
    samples = [s.views(cfg.n_views) for s in dataset]
    if params is None:
        params = init_params(cfg.arch_for(samples[0]), cfg.seed)
    else:
        params = params.copy()
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState.zeros_like(params.values)
    batches = lambda order: [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
    nan = float("nan")

    def epoch_row(epoch, lr, sums, count):
        row = {"epoch": epoch, "lr": lr, "total": sums[0] / count, "l3d": sums[1] / count,
               "lmvc": sums[2] / count, "val_iou": nan, "val_cd": nan}
        if not all(math.isfinite(row[k]) for k in ("total", "l3d", "lmvc")):
            raise TrainingDiverged(epoch)
        if val and epoch > 0 and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            ev = evaluate_model(params, val, chamfer_points=cfg.val_points, seed=cfg.seed)
            row["val_iou"] = float(np.mean([r["iou"] for r in ev]))
            row["val_cd"] = float(np.mean([r["cd"] for r in ev]))
        return row

    history = []
    if cfg.epochs > 0:
        sums = np.zeros(3)
        for idx in batches(np.arange(len(samples))):
            lv, _ = _batch_loss(params, [samples[i] for i in idx], cfg.loss, with_grad=False)
            sums += np.array([lv.total, lv.l3d, lv.lmvc]) * len(idx)
        history.append(epoch_row(0, cfg.lr, sums, len(samples)))
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        sums = np.zeros(3)
        for idx in batches(rng.permutation(len(samples))):
            lv, grad = _batch_loss(params, [samples[i] for i in idx], cfg.loss)
            if not math.isfinite(lv.total):
                raise TrainingDiverged(epoch)
            try:
                values, state = adam_step(params.values, grad, state, lr)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, str(exc)) from exc
            params = PredictorParams(params.arch, values)
            sums += np.array([lv.total, lv.l3d, lv.lmvc]) * len(idx)
        history.append(epoch_row(epoch, lr, sums, len(samples)))
        row = history[-1]
        log.info("epoch %d lr %.2e loss %.5f l3d %.5f lmvc %.5f", epoch, lr, row["total"], row["l3d"], row["lmvc"])
    return params, history


def reconstruct(params: PredictorParams, image, iso: float = 0.5, extent: float = 1.0) -> TriangleMesh:
    """Final-stack prediction turned into a surface mesh."""
    return marching_cubes(forward(params, image, extent)[-1], iso)


def save_checkpoint(path, params: PredictorParams) -> None:
    fileio.write_prm(path, params.arch.descriptor(), params.values)


def load_checkpoint(path) -> PredictorParams:
    desc, values = fileio.read_prm(path)
    try:
        arch = Arch.from_descriptor(desc)
    except (ValueError, TypeError) as exc:
        raise fileio.FormatError(path, f"bad architecture descriptor ({exc})") from exc
    if values.size != arch.n_params:
        raise fileio.FormatError(path, f"{values.size} parameters, descriptor needs {arch.n_params}")
    return PredictorParams(arch, values)


def history_csv(history: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for row in history:
        w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
    return buf.getvalue()
