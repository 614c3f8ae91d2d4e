"""Two-phase training: NOCS/mask pretraining of the image branch, then
end-to-end training with the surface loss (and, for multi-view models, a
no-pooling warm-up followed by fused training with the consistency loss).

All sampling draws from one ``numpy.random.Generator`` stored in the
training state, so a run resumed from a checkpoint continues exactly as the
uninterrupted run would.
"""
from dataclasses import asdict, dataclass, field, fields
import csv
import logging
import math
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import checkpoint
from .errors import ConfigurationError, IncompatibleCheckpointError, TrainingDivergedError
from .losses import (LossWeights, consistency_losses, mask_loss, mine_pairs, nocs_loss,
                     surface_loss, total_multi, total_single)
from .netcore import (NetConfig, SurfaceModel, check_config, load_state_arrays, model_dtype,
                      state_arrays)

log = logging.getLogger(__name__)

ABLATIONS = ("no_uv_amplifier", "no_nocs_pretrain", "no_consistency_loss", "single_view_only")


@dataclass
class TrainConfig:
    epochs1: int = 30
    epochs2: int = 150
    lr1: float = 1e-4
    lr2: float = 1e-4
    batch_size: int = 8  # views per batch, or objects per batch when multi-view
    views: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 10.0
    seed: int = 0
    multiview: bool = False
    nofuse_epochs: int = 30  # multi-view warm-up without pooling, counted inside epochs2
    predict_hidden: bool = False
    no_uv_amplifier: bool = False
    no_nocs_pretrain: bool = False
    no_consistency_loss: bool = False
    single_view_only: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 0  # 0 keeps only phase-end and final checkpoints

    def __post_init__(self):
        if self.lr1 <= 0 or self.lr2 <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.epochs1 < 0 or self.epochs2 < 0 or self.nofuse_epochs < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.views < 1:
            raise ConfigurationError("batch_size and views must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unsupported dtype {self.dtype!r}")

    @property
    def use_multiview(self):
        return self.multiview and not self.single_view_only

    @property
    def pretrain_epochs(self):
        return 0 if self.no_nocs_pretrain else self.epochs1

    @property
    def total_epochs(self):
        return self.pretrain_epochs + self.epochs2

    def phase_of(self, epoch):
        """Phase name for the epoch with 0-based index ``epoch``."""
        if epoch < self.pretrain_epochs:
            return "pretrain"
        if self.use_multiview:
            return "nofuse" if epoch < self.pretrain_epochs + self.nofuse_epochs else "fused"
        return "surface"

    def apply_to(self, net: NetConfig) -> NetConfig:
        """Net config with the ablation and mode switches applied."""
        d = net.to_dict()
        d["multiview"] = self.use_multiview
        d["predict_hidden"] = self.predict_hidden or net.predict_hidden
        if self.no_uv_amplifier:
            d["use_uv_amplifier"] = False
        return NetConfig.from_dict(d)

    def effective_weights(self, weights: LossWeights) -> LossWeights:
        if self.no_consistency_loss:
            return LossWeights(**{**asdict(weights), "w3": 0.0})
        return weights

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TrainingData:
    """Dataset views as tensors, grouped by shape."""
    images: torch.Tensor  # (N, 3, H, W)
    nocs: torch.Tensor  # (N, H, W, 3)
    hidden: torch.Tensor  # (N, H, W, 3)
    masks: torch.Tensor  # (N, H, W) bool
    groups: List[np.ndarray]  # view indices per shape
    shape_ids: List[str]

    @classmethod
    def from_dataset(cls, dataset, dtype=torch.float32):
        views, groups, ids = [], [], []
        for sid in dataset.shape_ids:
            vs = dataset.shapes[sid]
            groups.append(np.arange(len(views), len(views) + len(vs)))
            ids.append(sid)
            views.extend(vs)
        if not views:
            raise ConfigurationError("dataset has no views")
        t = lambda a: torch.from_numpy(np.stack(a)).to(dtype)
        return cls(t([v.rgb for v in views]).permute(0, 3, 1, 2).contiguous(),
                   t([v.nocs_visible.coords for v in views]),
                   t([v.nocs_hidden.coords for v in views]),
                   torch.from_numpy(np.stack([v.mask for v in views])),
                   groups, ids)

    def __len__(self):
        return len(self.images)

    @property
    def resolution(self):
        return tuple(self.images.shape[-2:])


@dataclass
class ForegroundSample:
    pixels: np.ndarray  # (K, 2) row, col
    empty: bool


def sample_foreground(mask, K, rng):
    """``K`` foreground pixels as (row, col); with replacement when fewer than ``K`` exist.

    ``rng`` is a seed or a ``numpy.random.Generator``.
    """
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    mask = np.asarray(mask, dtype=bool)
    fg = np.flatnonzero(mask.ravel())
    if len(fg) == 0:
        return ForegroundSample(np.zeros((0, 2), dtype=np.int64), True)
    pick = rng.choice(fg, size=K, replace=len(fg) < K)
    w = mask.shape[1]
    return ForegroundSample(np.stack([pick // w, pick % w], axis=1).astype(np.int64), False)


def _flat_samples(masks, K, rng):
    """Flat pixel indices ``(B, K)``; views without foreground get index 0 and weight 0."""
    out = np.zeros((len(masks), K), dtype=np.int64)
    valid = np.ones(len(masks), dtype=bool)
    w = masks.shape[-1]
    for i, m in enumerate(masks):
        s = sample_foreground(m, K, rng)
        if s.empty:
            valid[i] = False
        else:
            out[i] = s.pixels[:, 0] * w + s.pixels[:, 1]
    return out, valid


@dataclass
class TrainState:
    model: SurfaceModel
    config: TrainConfig
    weights: LossWeights
    rng: np.random.Generator
    epoch: int = 0  # completed epochs
    optimizer: Optional[torch.optim.Optimizer] = None
    optimizer_phase: str = ""  # "pretrain" or "end_to_end"
    history: list = field(default_factory=list)  # (epoch, term, value)
    notes: list = field(default_factory=list)

    @property
    def phase(self):
        if self.epoch >= self.config.total_epochs:
            return "done"
        return self.config.phase_of(self.epoch)


def init_state(net_config: NetConfig, train_config: TrainConfig,
               weights: Optional[LossWeights] = None) -> TrainState:
    net_config = train_config.apply_to(net_config)
    if weights is None:
        weights = LossWeights.multiview() if train_config.use_multiview else LossWeights()
    torch.manual_seed(train_config.seed)
    model = SurfaceModel(net_config).to(getattr(torch, train_config.dtype))
    state = TrainState(model, train_config, train_config.effective_weights(weights),
                       np.random.default_rng(train_config.seed))
    if train_config.no_nocs_pretrain:
        state.notes.append("phase 1 skipped (no_nocs_pretrain)")
    return state


# ---------------------------------------------------------------------------
# optimizer bookkeeping


def _param_list(model, which):
    return model.nocs_uv_parameters() if which == "pretrain" else list(model.parameters())


def _ensure_optimizer(state: TrainState, which):
    if state.optimizer is not None and state.optimizer_phase == which:
        return state.optimizer
    cfg = state.config
    lr = cfg.lr1 if which == "pretrain" else cfg.lr2
    state.optimizer = torch.optim.Adam(_param_list(state.model, which), lr=lr,
                                       betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    state.optimizer_phase = which
    return state.optimizer


def _step(state, loss, params, terms, where):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={_scalar(v):.6g}" for k, v in terms.items())
        raise TrainingDivergedError(f"non-finite loss at {where}: {detail}")
    opt = state.optimizer
    opt.zero_grad(set_to_none=True)
    loss.backward()
    for p in params:
        if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
            raise TrainingDivergedError(f"non-finite gradient at {where}")
    if state.config.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, state.config.grad_clip)
    opt.step()


def _channels_last(x):
    return x.permute(0, 2, 3, 1)


def _batches(rng, n, size):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _scalar(t):
    return float(t.detach()) if torch.is_tensor(t) else float(t)


def _record(state, sums, count):
    for k, v in sums.items():
        state.history.append((state.epoch, k, v / max(count, 1)))


# ---------------------------------------------------------------------------
# phases


def _image_terms(out, data, idx, hidden):
    ln = nocs_loss(_channels_last(out.nocs), data.nocs[idx], data.masks[idx]).value
    if hidden and out.nocs_hidden is not None:
        ln = ln + nocs_loss(_channels_last(out.nocs_hidden), data.hidden[idx], data.masks[idx]).value
    lm = mask_loss(out.mask_logits, data.masks[idx])
    return ln, lm


def pretrain_epoch(state: TrainState, data: TrainingData):
    model, w, cfg = state.model, state.weights, state.config
    model.train()
    _ensure_optimizer(state, "pretrain")
    params = _param_list(model, "pretrain")
    sums, count = {"L_n": 0.0, "L_m": 0.0, "pretrain": 0.0}, 0
    for b, idx in enumerate(_batches(state.rng, len(data), cfg.batch_size)):
        images = data.images[idx]
        if model.config.multiview:
            out, _ = model.run(images[:, None], fuse=False)
        else:
            out = model.decode(model.encode(images))
        ln, lm = _image_terms(out, data, idx, model.config.predict_hidden)
        loss = w.wn * ln + w.wm * lm
        _step(state, loss, params, {"L_n": ln, "L_m": lm}, f"epoch {state.epoch + 1} batch {b}")
        sums["L_n"] += _scalar(ln)
        sums["L_m"] += _scalar(lm)
        sums["pretrain"] += _scalar(loss)
        count += 1
    state.epoch += 1
    _record(state, sums, count)


def _surface_terms(model, out, code, data, idx, pix, ok):
    """Surface loss at sampled pixels; also returns the predicted points."""
    pix_t = torch.from_numpy(pix)
    xyz = model.surface_at_pixels(code, out.chart, pix_t)
    gt = data.nocs[idx].reshape(len(idx), -1, 3)
    gt = torch.gather(gt, 1, pix_t[..., None].expand(-1, -1, 3))
    okt = torch.from_numpy(ok)
    ls = surface_loss(xyz[okt], gt[okt]).value
    if model.config.predict_hidden:
        xyz_h = model.surface_at_pixels(code, out.chart_hidden, pix_t)
        gt_h = torch.gather(data.hidden[idx].reshape(len(idx), -1, 3), 1,
                            pix_t[..., None].expand(-1, -1, 3))
        ls = ls + surface_loss(xyz_h[okt], gt_h[okt]).value
    return ls, xyz


def surface_epoch(state: TrainState, data: TrainingData):
    model, w, cfg = state.model, state.weights, state.config
    model.train()
    _ensure_optimizer(state, "end_to_end")
    params = _param_list(model, "end_to_end")
    sums, count = {"L_n": 0.0, "L_m": 0.0, "L_s": 0.0, "L_I": 0.0}, 0
    for b, idx in enumerate(_batches(state.rng, len(data), cfg.batch_size)):
        out, code = model.run(data.images[idx])
        ln, lm = _image_terms(out, data, idx, model.config.predict_hidden)
        pix, ok = _flat_samples(data.masks[idx].numpy(), w.K, state.rng)
        ls, _ = _surface_terms(model, out, code, data, idx, pix, ok)
        loss = total_single(ln, lm, ls, w)
        _step(state, loss, params, {"L_n": ln, "L_m": lm, "L_s": ls},
              f"epoch {state.epoch + 1} batch {b}")
        for k, v in (("L_n", ln), ("L_m", lm), ("L_s", ls), ("L_I", loss)):
            sums[k] += _scalar(v)
        count += 1
    state.epoch += 1
    _record(state, sums, count)


def multiview_epoch(state: TrainState, data: TrainingData, fuse: bool):
    model, w, cfg = state.model, state.weights, state.config
    model.train()
    _ensure_optimizer(state, "end_to_end")
    params = _param_list(model, "end_to_end")
    v = cfg.views
    if any(len(g) < v for g in data.groups):
        raise ConfigurationError(f"views per iteration ({v}) exceeds views available per shape")
    sums = {"L_n": 0.0, "L_m": 0.0, "L_s": 0.0, "L_I": 0.0, "L_C": 0.0, "L_M": 0.0, "pairs": 0.0}
    count = 0
    for b, objs in enumerate(_batches(state.rng, len(data.groups), cfg.batch_size)):
        idx = np.concatenate([state.rng.choice(data.groups[o], size=v, replace=False) for o in objs])
        images = data.images[idx].reshape(len(objs), v, *data.images.shape[1:])
        out, code = model.run(images, fuse=fuse)
        ln, lm = _image_terms(out, data, idx, model.config.predict_hidden)
        pix, ok = _flat_samples(data.masks[idx].numpy(), w.K, state.rng)
        ls, xyz = _surface_terms(model, out, code, data, idx, pix, ok)
        l_i = total_single(ln, lm, ls, w)
        lcs, n_pairs = [], 0
        if w.w3 > 0:
            for j in range(len(objs)):
                sl = slice(j * v, (j + 1) * v)
                vid = idx[sl]
                pairs = mine_pairs(data.nocs[vid].numpy(), data.masks[vid].numpy(), w.eps_corr,
                                   w.max_pairs, samples=pix[sl], rng=state.rng)
                n_pairs += len(pairs)
                lcs.extend(consistency_losses(pairs, xyz[sl]))
        loss = total_multi(l_i, lcs, w)
        lc = sum(lcs) / len(lcs) if lcs else torch.zeros(())
        _step(state, loss, params, {"L_I": l_i, "L_C": lc}, f"epoch {state.epoch + 1} batch {b}")
        for k, val in (("L_n", ln), ("L_m", lm), ("L_s", ls), ("L_I", l_i), ("L_C", lc),
                       ("L_M", loss)):
            sums[k] += _scalar(val)
        sums["pairs"] += n_pairs
        count += 1
    state.epoch += 1
    _record(state, sums, count)
    state.history.append((state.epoch, "view_pairs_per_object", float(math.comb(v, 2))))


# ---------------------------------------------------------------------------
# drivers


def _checkpoint_due(state, run_dir, phase_end):
    if run_dir is None:
        return False
    every = state.config.checkpoint_every
    return phase_end or (every > 0 and state.epoch % every == 0)


def pretrain_nocs_uv(state: TrainState, data: TrainingData, run_dir=None, stop_at=None):
    """Run the remaining phase-1 epochs (NOCS and mask losses, image branch only)."""
    if len(data) == 0:
        raise ConfigurationError("dataset is empty")
    end = state.config.pretrain_epochs
    if stop_at is not None:
        end = min(end, stop_at)
    while state.epoch < end:
        pretrain_epoch(state, data)
        _log_epoch(state)
        if _checkpoint_due(state, run_dir, state.epoch == state.config.pretrain_epochs):
            save_training(state, run_dir)
    return state


def train_end_to_end(state: TrainState, data: TrainingData, run_dir=None, stop_at=None):
    """Run the remaining end-to-end epochs; multi-view models warm up without pooling first."""
    if len(data) == 0:
        raise ConfigurationError("dataset is empty")
    cfg = state.config
    if cfg.use_multiview and any(len(g) < cfg.views for g in data.groups):
        raise ConfigurationError(f"views per iteration ({cfg.views}) exceeds views available per shape")
    end = cfg.total_epochs if stop_at is None else min(cfg.total_epochs, stop_at)
    state.epoch = max(state.epoch, cfg.pretrain_epochs)
    while state.epoch < end:
        phase = cfg.phase_of(state.epoch)
        if phase == "surface":
            surface_epoch(state, data)
        else:
            multiview_epoch(state, data, fuse=phase == "fused")
        _log_epoch(state)
        if _checkpoint_due(state, run_dir, state.epoch == cfg.total_epochs):
            save_training(state, run_dir)
    return state


def train(state: TrainState, data: TrainingData, run_dir=None, stop_at=None):
    """Both phases, resuming from ``state.epoch``."""
    pretrain_nocs_uv(state, data, run_dir, stop_at)
    if stop_at is None or state.epoch < stop_at:
        train_end_to_end(state, data, run_dir, stop_at)
    if run_dir is not None:
        write_losses(state, Path(run_dir) / "losses.csv")
    return state


def _log_epoch(state):
    last = [h for h in state.history if h[0] == state.epoch]
    log.info("epoch %d %s", state.epoch, " ".join(f"{t}={v:.5g}" for _, t, v in last))


def write_losses(state, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["epoch", "term", "value"])
        for e, t, v in state.history:
            wr.writerow([e, t, repr(float(v))])


# ---------------------------------------------------------------------------
# checkpoints


def _optimizer_arrays(state):
    if state.optimizer is None:
        return {}, None
    sd = state.optimizer.state_dict()
    arrays = {}
    for pid, st in sd["state"].items():
        for k, v in st.items():
            arrays[f"optim/{pid}/{k}"] = v.detach().cpu().numpy() if torch.is_tensor(v) \
                else np.asarray(v)
    return arrays, sd["param_groups"]


def training_payload(state: TrainState):
    arrays = state_arrays(state.model)
    opt_arrays, groups = _optimizer_arrays(state)
    arrays.update(opt_arrays)
    header = {
        "kind": "training",
        "net_config": state.model.config.to_dict(),
        "dtype": model_dtype(state.model),
        "train_config": state.config.to_dict(),
        "loss_weights": asdict(state.weights),
        "epoch": state.epoch,
        "phase": state.phase,
        "optimizer_phase": state.optimizer_phase,
        "optimizer_groups": groups,
        "rng_state": state.rng.bit_generator.state,
        "history": [[e, t, float(v)] for e, t, v in state.history],
        "notes": list(state.notes),
    }
    return header, arrays


def training_bytes(state):
    return checkpoint.encode(*training_payload(state))


def checkpoint_path(run_dir, epoch):
    return Path(run_dir) / f"ckpt_{epoch}"


def save_checkpoint(state: TrainState, path):
    checkpoint.write(path, *training_payload(state))


def save_training(state, run_dir):
    path = checkpoint_path(run_dir, state.epoch)
    save_checkpoint(state, path)
    write_losses(state, Path(run_dir) / "losses.csv")
    return path


def load_checkpoint(path, expected_net: Optional[NetConfig] = None) -> TrainState:
    header, arrays = checkpoint.read(path)
    if header.get("kind") != "training":
        raise IncompatibleCheckpointError(f"{path} holds a {header.get('kind')!r} checkpoint, "
                                          "not a training state")
    if expected_net is not None:
        check_config(expected_net, header["net_config"])
    cfg = TrainConfig.from_dict(header["train_config"])
    model = SurfaceModel(NetConfig.from_dict(header["net_config"])).to(getattr(torch, header["dtype"]))
    load_state_arrays(model, arrays)
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(model, cfg, LossWeights(**header["loss_weights"]), rng,
                       epoch=header["epoch"], history=[tuple(h) for h in header["history"]],
                       notes=list(header.get("notes", [])))
    if header.get("optimizer_phase"):
        opt = _ensure_optimizer(state, header["optimizer_phase"])
        per_param = {}
        for name, a in arrays.items():
            if name.startswith("optim/"):
                _, pid, key = name.split("/", 2)
                per_param.setdefault(int(pid), {})[key] = torch.from_numpy(a)
        opt.load_state_dict({"state": per_param, "param_groups": header["optimizer_groups"]})
    return state
