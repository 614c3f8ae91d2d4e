"""
Multi-view training and the consistency loss
============================================

Pixels from different views that land on the same surface point (according
to ground truth NOCS) are mined as pairs; the consistency loss pulls their
predicted 3D points together. Feature max-pooling lets every view see the
others, and the code given to the surface network is the view's own code
next to the pooled one.
"""
import tempfile

import numpy as np
import torch

from surfchart.losses import LossWeights, mine_pairs
from surfchart.netcore import NetConfig, SurfaceModel
from surfchart.synthcam import build_dataset, load_dataset
from surfchart.trainer import TrainConfig, TrainingData, init_state, train

torch.set_num_threads(1)
root = tempfile.mkdtemp()
build_dataset(2, 5, (64, 64), seed=1, out_dir=root)
dataset = load_dataset(root)

views = dataset.shapes["shape_000"]
for eps in (1e-3, 1e-2):
    pairs = mine_pairs([v.nocs_visible.coords for v in views], [v.mask for v in views], eps)
    print(f"eps {eps:g}: {len(pairs)} pairs over {len(pairs.view_pairs())} view pairs")

model = SurfaceModel(NetConfig(channel_scale=0.25, multiview=True)).eval()
images = torch.from_numpy(np.stack([v.rgb for v in views])).float().permute(0, 3, 1, 2)
with torch.no_grad():
    _, code = model.run(images[None])
half = model.config.code_dim
print("pooled half shared by all views:", bool((code[:, half:] == code[0, half:]).all()))

data = TrainingData.from_dataset(dataset)
cfg = TrainConfig(epochs1=2, epochs2=4, nofuse_epochs=2, multiview=True, views=5, batch_size=2,
                  lr1=1e-3, lr2=1e-3)
state = init_state(NetConfig(channel_scale=0.25), cfg, LossWeights.multiview(K=512, eps_corr=1e-2))
train(state, data)
for epoch in range(1, state.epoch + 1):
    row = {t: round(v, 4) for e, t, v in state.history if e == epoch}
    print(epoch, cfg.phase_of(epoch - 1), row)
