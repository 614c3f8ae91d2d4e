"""Learnable components: SegNet-style encoder/decoder that emits NOCS, mask and
a free 2-channel chart, a code extractor, the UV amplifier and the surface
parametrization MLP, plus max-pool fusion across views.

Images are ``(B, 3, H, W)`` tensors; multi-view batches are ``(B, V, 3, H, W)``.
"""
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import torch
from torch import nn
import torch.nn.functional as F

from . import checkpoint
from .errors import (CheckpointCorruptError, ConfigurationError, IncompatibleCheckpointError,
                     ShapeMismatchError)

VGG_CHANNELS = (64, 128, 256, 512)
CE_CHANNELS = 512


@dataclass
class NetConfig:
    resolution: tuple = (64, 64)
    latent_dim: int = 1024
    amp_dims: tuple = (64, 128, 256)
    sp_width: int = 512
    sp_depth: int = 9
    predict_hidden: bool = False
    channel_scale: float = 1.0
    n_pool: int = 4
    convs_per_stage: int = 1
    multiview: bool = False
    use_uv_amplifier: bool = True
    chart_mode: str = "learned"  # "learned" or "image"

    def __post_init__(self):
        self.resolution = tuple(int(r) for r in self.resolution)
        self.amp_dims = tuple(int(d) for d in self.amp_dims)
        if self.latent_dim <= 0 or self.sp_width <= 0 or any(d <= 0 for d in self.amp_dims):
            raise ConfigurationError("latent dim, amplifier dims and widths must be positive")
        if self.sp_depth < 3:
            raise ConfigurationError("sp_depth must be >= 3")
        if self.channel_scale <= 0:
            raise ConfigurationError("channel_scale must be positive")
        if self.n_pool < 1 or self.convs_per_stage < 1:
            raise ConfigurationError("n_pool and convs_per_stage must be >= 1")
        if self.chart_mode not in ("learned", "image"):
            raise ConfigurationError(f"unknown chart_mode {self.chart_mode!r}")
        step = 2 ** self.n_pool
        if any(r % step for r in self.resolution):
            raise ConfigurationError(f"resolution {self.resolution} not divisible by {step}")

    def _scaled(self, c):
        return max(1, int(round(c * self.channel_scale)))

    @property
    def encoder_channels(self):
        base = list(VGG_CHANNELS) + [VGG_CHANNELS[-1]] * max(0, self.n_pool - len(VGG_CHANNELS))
        return [self._scaled(c) for c in base[:self.n_pool]]

    @property
    def code_dim(self):
        if not self.use_uv_amplifier:
            return 256
        return self._scaled(self.latent_dim)

    @property
    def ce_channels(self):
        return self._scaled(CE_CHANNELS)

    @property
    def sp_hidden(self):
        return self._scaled(self.sp_width)

    @property
    def uv_dim(self):
        return self.amp_dims[-1] if self.use_uv_amplifier else 2

    @property
    def sp_code_dim(self):
        return self.code_dim * (2 if self.multiview else 1)

    @property
    def out_channels(self):
        return 6 + (5 if self.predict_hidden else 0)

    def to_dict(self):
        d = asdict(self)
        d["resolution"] = list(self.resolution)
        d["amp_dims"] = list(self.amp_dims)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Encoding:
    feature: torch.Tensor
    indices: List[torch.Tensor]
    skips: List[torch.Tensor]


@dataclass
class DecoderOutput:
    nocs: torch.Tensor  # (B, 3, H, W) in [0, 1]
    mask_logits: torch.Tensor  # (B, H, W)
    chart: torch.Tensor  # (B, 2, H, W) in [0, 1]
    nocs_hidden: Optional[torch.Tensor] = None
    chart_hidden: Optional[torch.Tensor] = None

    def index(self, sel):
        pick = lambda t: None if t is None else t[sel]
        return DecoderOutput(pick(self.nocs), pick(self.mask_logits), pick(self.chart),
                             pick(self.nocs_hidden), pick(self.chart_hidden))


def conv_block(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def _stage(cin, cout, n):
    return nn.Sequential(*[conv_block(cin if i == 0 else cout, cout) for i in range(n)])


class SurfaceMLP(nn.Module):
    """Input layer, residual pairs of hidden layers, sigmoid output in the unit cube."""

    def __init__(self, code_dim, uv_dim, width, depth):
        super().__init__()
        self.code_dim = code_dim
        self.inp = nn.Linear(code_dim + uv_dim, width)
        n_hidden = depth - 2
        self.hidden = nn.ModuleList([nn.Linear(width, width) for _ in range(n_hidden)])
        self.out = nn.Linear(width, 3)

    def forward(self, code, p):
        # split first layer so the code term is computed once per batch item
        w = self.inp.weight
        h = F.linear(code, w[:, :self.code_dim], self.inp.bias)[:, None, :]
        h = F.relu(h + F.linear(p, w[:, self.code_dim:]))
        i = 0
        while i < len(self.hidden):
            if i + 1 < len(self.hidden):
                r = F.relu(self.hidden[i](h))
                h = F.relu(h + self.hidden[i + 1](r))
                i += 2
            else:
                h = F.relu(self.hidden[i](h))
                i += 1
        return torch.sigmoid(self.out(h))


class SurfaceModel(nn.Module):
    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        ch = config.encoder_channels
        cps = config.convs_per_stage
        self.enc = nn.ModuleList([_stage(cin, cout, cps) for cin, cout in zip([3] + ch[:-1], ch)])
        self.fuse_conv = conv_block(2 * ch[-1], ch[-1]) if config.multiview else None
        outs = [ch[0]] + ch[:-1]
        self.dec = nn.ModuleList([_stage(2 * c, o, cps) for c, o in zip(ch, outs)])
        self.head = nn.Conv2d(ch[0], config.out_channels, 1)
        ce = config.ce_channels
        self.code_extractor = nn.Sequential(
            nn.Conv2d(ch[-1], ce, 3, padding=1), nn.BatchNorm2d(ce), nn.ELU(inplace=True),
            nn.Conv2d(ce, config.code_dim, 3, padding=1), nn.BatchNorm2d(config.code_dim),
            nn.ELU(inplace=True),
        )
        if config.use_uv_amplifier:
            dims = (2,) + config.amp_dims
            layers = []
            for a, b in zip(dims[:-1], dims[1:]):
                layers += [nn.Linear(a, b), nn.ReLU(inplace=True)]
            self.uv_amplifier = nn.Sequential(*layers)
        else:
            self.uv_amplifier = None
        self.sp = SurfaceMLP(config.sp_code_dim, config.uv_dim, config.sp_hidden, config.sp_depth)

    # parameter groups ---------------------------------------------------
    def nocs_uv_parameters(self):
        mods = [self.enc, self.dec, self.head] + ([self.fuse_conv] if self.fuse_conv is not None else [])
        return [p for m in mods for p in m.parameters()]

    def surface_parameters(self):
        mods = [self.code_extractor, self.sp] + ([self.uv_amplifier] if self.uv_amplifier is not None else [])
        return [p for m in mods for p in m.parameters()]

    # components ---------------------------------------------------------
    def encode(self, images):
        if images.dim() != 4 or tuple(images.shape[-2:]) != self.config.resolution or images.shape[1] != 3:
            raise ShapeMismatchError(
                f"expected (B, 3, {self.config.resolution[0]}, {self.config.resolution[1]}) images, "
                f"got {tuple(images.shape)}")
        x = images
        indices, skips = [], []
        for stage in self.enc:
            x = stage(x)
            skips.append(x)
            x, idx = F.max_pool2d(x, 2, 2, return_indices=True)
            indices.append(idx)
        return Encoding(x, indices, skips)

    def decode(self, enc: Encoding, fused=None):
        if len(enc.indices) != len(self.dec) or enc.indices[-1].shape != enc.feature.shape:
            raise ShapeMismatchError("pool indices do not match the feature map")
        x = enc.feature
        if self.fuse_conv is not None:
            x = self.fuse_conv(torch.cat([x, x if fused is None else fused], dim=1))
        for stage, idx, skip in zip(reversed(self.dec), reversed(enc.indices), reversed(enc.skips)):
            x = F.max_unpool2d(x, idx, 2, 2, output_size=skip.shape[-2:])
            x = stage(torch.cat([x, skip], dim=1))
        y = self.head(x)
        out = DecoderOutput(torch.sigmoid(y[:, 0:3]), y[:, 3], torch.sigmoid(y[:, 4:6]))
        if self.config.predict_hidden:
            out.nocs_hidden = torch.sigmoid(y[:, 6:9])
            out.chart_hidden = torch.sigmoid(y[:, 9:11])
        if self.config.chart_mode == "image":
            out.chart = image_chart(out.mask_logits.detach())
            if out.chart_hidden is not None:
                out.chart_hidden = out.chart
        return out

    def extract_code(self, feature):
        return self.code_extractor(feature).mean(dim=(2, 3))

    def amplify_uv(self, uv):
        if self.uv_amplifier is None:
            return uv
        return self.uv_amplifier(uv)

    def sp_forward(self, code_input, p):
        """Surface points for codes ``(B, C)`` and amplified coordinates ``(B, N, D)``."""
        if code_input.shape[-1] != self.config.sp_code_dim:
            raise ShapeMismatchError(
                f"code dimension {code_input.shape[-1]} != {self.config.sp_code_dim}")
        if p.shape[-1] != self.config.uv_dim:
            raise ShapeMismatchError(f"uv feature dimension {p.shape[-1]} != {self.config.uv_dim}")
        return self.sp(code_input, p)

    @staticmethod
    def fuse_multiview(codes, dim=0):
        """Elementwise maximum over views."""
        if isinstance(codes, (list, tuple)):
            if len(codes) == 0:
                raise ValueError("cannot fuse an empty list of codes")
            codes = torch.stack(list(codes), dim=dim)
        if codes.shape[dim] == 0:
            raise ValueError("cannot fuse an empty list of codes")
        return codes.max(dim=dim).values

    # pipelines ----------------------------------------------------------
    def run(self, images, fuse=True):
        """Decoder outputs and SP code inputs for every image.

        Single-view models take ``(B, 3, H, W)``. Multi-view models take
        ``(B, V, 3, H, W)`` (or ``(V, 3, H, W)`` for one object); outputs are
        flattened to ``B * V`` items. With ``fuse=False`` every view is treated
        as its own group, which is the pre-pooling warm-up configuration.
        """
        if not self.config.multiview:
            enc = self.encode(images)
            return self.decode(enc), self.extract_code(enc.feature)
        if images.dim() == 4:
            images = images[None]
        if images.dim() != 5:
            raise ShapeMismatchError(f"expected (B, V, 3, H, W) images, got {tuple(images.shape)}")
        b, v = images.shape[:2]
        enc = self.encode(images.reshape(b * v, *images.shape[2:]))
        feat = enc.feature
        z = self.extract_code(feat)
        if fuse:
            fused = self.fuse_multiview(feat.reshape(b, v, *feat.shape[1:]), dim=1)
            fused = fused[:, None].expand(b, v, *feat.shape[1:]).reshape(feat.shape)
            zm = self.fuse_multiview(z.reshape(b, v, -1), dim=1)
            zm = zm[:, None].expand(b, v, zm.shape[-1]).reshape(z.shape)
        else:
            fused, zm = feat, z
        return self.decode(enc, fused), torch.cat([z, zm], dim=-1)

    def surface_at(self, code_input, uv):
        return self.sp_forward(code_input, self.amplify_uv(uv))

    def surface_at_pixels(self, code_input, chart, pixels):
        """SP outputs at flat pixel indices ``(B, N)`` using the predicted chart."""
        b = chart.shape[0]
        uv = chart.reshape(b, 2, -1).gather(2, pixels[:, None, :].expand(b, 2, pixels.shape[1]))
        return self.surface_at(code_input, uv.transpose(1, 2))

    def forward_single(self, image, uv_samples):
        """Decoder output and surface points at explicit chart coordinates for one image."""
        if image.dim() == 3:
            image = image[None]
        if uv_samples.dim() == 2:
            uv_samples = uv_samples[None]
        out, code = self.run(image[:, None] if self.config.multiview else image)
        return out, self.surface_at(code, uv_samples)

    def forward_multi(self, images, uv_samples=None, fuse=True):
        """Per-view decoder outputs and surface points for one object seen in ``V`` views.

        ``uv_samples`` is ``(V, N, 2)``; when omitted the surface is evaluated
        at every pixel's predicted chart coordinates.
        """
        if not self.config.multiview:
            raise ShapeMismatchError("forward_multi needs a multi-view model")
        if images.dim() != 4:
            raise ShapeMismatchError(f"expected (V, 3, H, W) images, got {tuple(images.shape)}")
        out, code = self.run(images[None], fuse=fuse)
        if uv_samples is None:
            uv_samples = out.chart.flatten(2).transpose(1, 2)
        return out, self.surface_at(code, uv_samples)


def image_chart(mask_logits):
    """Pixel coordinates normalized to the bounding box of the predicted mask."""
    b, h, w = mask_logits.shape
    fg = mask_logits > 0
    rows = torch.arange(h, dtype=mask_logits.dtype, device=mask_logits.device) + 0.5
    cols = torch.arange(w, dtype=mask_logits.dtype, device=mask_logits.device) + 0.5
    charts = []
    for i in range(b):
        r_any = fg[i].any(dim=1).nonzero()
        c_any = fg[i].any(dim=0).nonzero()
        if len(r_any) == 0:
            r0, r1, c0, c1 = 0, h, 0, w
        else:
            r0, r1 = int(r_any.min()), int(r_any.max()) + 1
            c0, c1 = int(c_any.min()), int(c_any.max()) + 1
        u = ((cols - c0) / (c1 - c0)).clamp(0, 1)
        v = ((rows - r0) / (r1 - r0)).clamp(0, 1)
        charts.append(torch.stack([u[None, :].expand(h, w), v[:, None].expand(h, w)]))
    return torch.stack(charts)


def state_arrays(model: nn.Module, prefix="model/"):
    return {prefix + k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays, prefix="model/"):
    state = model.state_dict()
    missing = [k for k in state if prefix + k not in arrays]
    if missing:
        raise CheckpointCorruptError(f"checkpoint lacks parameters {missing[:3]}")
    loaded = {}
    for k, ref in state.items():
        a = arrays[prefix + k]
        if tuple(a.shape) != tuple(ref.shape):
            raise IncompatibleCheckpointError(f"parameter {k} has shape {a.shape}, model expects "
                                              f"{tuple(ref.shape)}")
        loaded[k] = torch.from_numpy(a)
    model.load_state_dict(loaded)
    return model


def model_dtype(model):
    return str(next(model.parameters()).dtype).replace("torch.", "")


def check_config(expected: NetConfig, found: dict):
    key = checkpoint.config_difference(expected.to_dict(), NetConfig.from_dict(found).to_dict())
    if key is not None:
        raise IncompatibleCheckpointError(
            f"net config mismatch on {key!r}: expected {expected.to_dict().get(key)!r}, "
            f"checkpoint has {found.get(key)!r}")


def model_header(model):
    return {"kind": "model", "net_config": model.config.to_dict(), "dtype": model_dtype(model)}


def model_to_bytes(model: SurfaceModel) -> bytes:
    return checkpoint.encode(model_header(model), state_arrays(model))


def save_model(model: SurfaceModel, path):
    checkpoint.write(path, model_header(model), state_arrays(model))


def model_from_checkpoint(header, arrays, expected: Optional[NetConfig] = None):
    if "net_config" not in header:
        raise CheckpointCorruptError("checkpoint header has no net_config")
    if expected is not None:
        check_config(expected, header["net_config"])
    model = SurfaceModel(NetConfig.from_dict(header["net_config"]))
    model = model.to(getattr(torch, header.get("dtype", "float32")))
    load_state_arrays(model, arrays)
    model.eval()
    return model


def load_model(path, expected: Optional[NetConfig] = None) -> SurfaceModel:
    """Model from a model or training checkpoint, in eval mode."""
    header, arrays = checkpoint.read(path)
    return model_from_checkpoint(header, arrays, expected)
