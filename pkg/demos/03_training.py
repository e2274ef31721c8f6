# coding: utf-8

# # Training the toy predictor
#
# A short run on a small dataset, once with the 3D loss only and once with the
# consistency term added. Expect numbers to move around; this is a few epochs
# on a few dozen scenes. The full comparison lives in `mvcvox ablate`.

import numpy as np

from mvcvox.dataset import DatasetConfig, generate_dataset
from mvcvox.losses import LossConfig
from mvcvox.model import TrainConfig, evaluate_model, reconstruct, train


data = generate_dataset(DatasetConfig(scenes=36, test_scenes=6, views=4, res=16, img=32, seed=2))
train_set, test_set = data.split("train"), data.split("test")
print(len(train_set), "training scenes,", len(test_set), "test scenes")


# Each training sample carries all four views. The same weights predict every
# view and their gradients add up.

results = {}
for name, lam in (("3d", 0.0), ("mvc", 0.2)):
    cfg = TrainConfig(epochs=8, lr=2e-3, lr_decay_every=6, n_views=4, channels=(8, 16, 16), dec=16,
                      loss=LossConfig(gamma=0.5, lam=lam), eval_every=4, val_points=500)
    params, history = train(train_set, cfg, val=test_set)
    rows = evaluate_model(params, test_set, views="all")
    results[name] = params
    print(f"{name}: loss {history[0]['total']:.3f} -> {history[-1]['total']:.3f}, "
          f"lmvc {history[-1]['lmvc']:.4f}, test IoU {np.mean([r['iou'] for r in rows]):.3f}, "
          f"occluded {np.mean([r['iou_occluded'] for r in rows]):.3f}")


# ## A reconstruction
#
# The last stack's grid goes through marching cubes.

mesh = reconstruct(results["mvc"], test_set[0].silhouettes[0])
print("mesh:", mesh.n_triangles, "triangles, closed:", mesh.is_closed())
