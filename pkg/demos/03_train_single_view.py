"""
Training a single-view model
============================

A short run on a handful of synthetic views: NOCS/mask pretraining of the
image branch, then end-to-end training with the surface loss. The metric
protocol evaluates the surface network at every predicted foreground pixel.
Raise EPOCHS for a useful model; 40 epochs only shows the trend.
"""
import tempfile

import torch

from surfchart.chart2mesh import predict_nocs_maps
from surfchart.losses import LossWeights
from surfchart.metrics import evaluate
from surfchart.netcore import NetConfig
from surfchart.synthcam import build_dataset, load_dataset
from surfchart.trainer import TrainConfig, TrainingData, init_state, train

EPOCHS = 40
torch.set_num_threads(1)

root = tempfile.mkdtemp()
build_dataset(4, 5, (64, 64), seed=0, out_dir=root)
dataset = load_dataset(root)
data = TrainingData.from_dataset(dataset)

net = NetConfig(channel_scale=0.25)
cfg = TrainConfig(epochs1=10, epochs2=EPOCHS - 10, lr1=1e-3, lr2=1e-3)
state = init_state(net, cfg, LossWeights(K=1024))


def report():
    preds = {}
    for v in dataset.views():
        (vis, _), = predict_nocs_maps(state.model, [v.rgb])
        preds[(v.shape_id, v.view_id)] = vis
    return evaluate(preds, dataset).mean("E_rec")


for stop in range(10, EPOCHS + 1, 10):
    train(state, data, stop_at=stop)
    last = {t: round(val, 4) for e, t, val in state.history if e == state.epoch}
    print(f"epoch {state.epoch:3d} {cfg.phase_of(state.epoch - 1):8s} {last}  E_rec {report():.4f}")
