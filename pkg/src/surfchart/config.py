"""Flat run configuration: ``[section]`` blocks of ``key = value`` lines,
validated against a schema, with per-key provenance (default, file or flag).
"""
import configparser
from dataclasses import dataclass, field
import io
import math

from .errors import ConfigurationError


def _bool(v):
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _list(v):
    if isinstance(v, (list, tuple)):
        return [str(x) for x in v]
    return [x.strip() for x in str(v).split(",") if x.strip()]


def _int_list(v):
    return [int(x) for x in _list(v)]


def _positive(kind):
    def check(v):
        v = kind(v)
        if not v > 0:
            raise ValueError(f"must be > 0, got {v}")
        return v
    return check


def _nonneg(kind):
    def check(v):
        v = kind(v)
        if not (v >= 0 and math.isfinite(v)):
            raise ValueError(f"must be >= 0, got {v}")
        return v
    return check


def _choice(*options):
    def check(v):
        if str(v) not in options:
            raise ValueError(f"must be one of {', '.join(options)}, got {v!r}")
        return str(v)
    return check


ABLATION_ALIASES = {
    "no_uv_amp": "no_uv_amplifier", "no_uv_amplifier": "no_uv_amplifier",
    "no_nocs": "no_nocs_pretrain", "no_nocs_pretrain": "no_nocs_pretrain",
    "no_consistency": "no_consistency_loss", "no_consistency_loss": "no_consistency_loss",
    "single_view_only": "single_view_only",
}


def _ablations(v):
    out = []
    for a in _list(v):
        if a not in ABLATION_ALIASES:
            raise ValueError(f"unknown ablation {a!r}")
        out.append(ABLATION_ALIASES[a])
    return sorted(set(out))


SCHEMA = {
    "data": {
        "root": (str, "data"),
        "shapes": (_positive(int), 8),
        "views": (_positive(int), 5),
        "res": (_positive(int), 64),
        "seed": (int, 0),
        "families": (_list, ["box-union", "superellipsoid", "swept-profile"]),
        "background": (_choice("white", "noise"), "white"),
        "fov_deg": (_positive(float), 30.0),
    },
    "net": {
        "latent_dim": (_positive(int), 1024),
        "amp_dims": (_int_list, [64, 128, 256]),
        "sp_width": (_positive(int), 512),
        "sp_depth": (int, 9),
        "channel_scale": (_positive(float), 0.25),
        "n_pool": (_positive(int), 4),
        "convs_per_stage": (_positive(int), 1),
        "chart_mode": (_choice("learned", "image"), "learned"),
    },
    "loss": {
        "w1": (_nonneg(float), 0.1),
        "w2": (_nonneg(float), 0.9),
        "wn": (_nonneg(float), 0.7),
        "wm": (_nonneg(float), 0.3),
        "w3": (_nonneg(float), 0.9),
        "K": (_positive(int), 4096),
        "eps_corr": (_positive(float), 1e-3),
        "eps_eval": (_positive(float), 1e-3),
        "max_pairs": (_positive(int), 4096),
    },
    "train": {
        "name": (str, "run"),
        "run": (str, ""),
        "epochs1": (_nonneg(int), 30),
        "epochs2": (_nonneg(int), 150),
        "lr1": (_positive(float), 1e-4),
        "lr2": (_positive(float), 1e-4),
        "batch_size": (_positive(int), 8),
        "views": (_positive(int), 5),
        "seed": (int, 0),
        "multiview": (_bool, False),
        "nofuse_epochs": (_nonneg(int), 30),
        "predict_hidden": (_bool, False),
        "ablate": (_ablations, []),
        "dtype": (_choice("float32", "float64"), "float32"),
        "grad_clip": (_nonneg(float), 10.0),
        "checkpoint_every": (_nonneg(int), 0),
        "resume": (str, ""),
    },
    "infer": {
        "checkpoint": (str, ""),
        "images": (_list, []),
        "shape": (str, ""),
        "mode": (_choice("single", "multi"), "single"),
        "out": (str, "recon"),
        "upsample": (_positive(int), 4),
        "uv_res": (_positive(int), 128),
        "final_res": (_positive(int), 512),
        "uv_grad_thresh": (_positive(float), 0.05),
        "k": (_positive(int), 4),
        "outlier_t": (_positive(float), 0.02),
        "discontinuity_threshold": (_positive(float), 0.05),
    },
    "eval": {
        "checkpoint": (str, ""),
        "predictions": (str, ""),
        "mode": (_choice("single", "multi"), "single"),
        "out": (str, "eval"),
        "eps": (_positive(float), 1e-3),
        "hidden": (_bool, False),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)  # "section.key" -> value
    provenance: dict = field(default_factory=dict)  # "section.key" -> default|file|flag

    @classmethod
    def defaults(cls):
        cfg = cls()
        for sec, keys in SCHEMA.items():
            for key, (_, default) in keys.items():
                cfg.values[f"{sec}.{key}"] = default
                cfg.provenance[f"{sec}.{key}"] = "default"
        return cfg

    def set(self, dotted, raw, source):
        if "." not in dotted:
            raise ConfigurationError(f"config key {dotted!r} must look like section.key")
        sec, key = dotted.split(".", 1)
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigurationError(f"unknown config key {dotted!r}")
        kind = SCHEMA[sec][key][0]
        try:
            self.values[dotted] = kind(raw)
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid value for {dotted}: {exc}") from exc
        self.provenance[dotted] = source

    def __getitem__(self, dotted):
        return self.values[dotted]

    def section(self, sec):
        return {k.split(".", 1)[1]: v for k, v in self.values.items() if k.startswith(sec + ".")}

    def is_default(self, dotted):
        return self.provenance.get(dotted) == "default"

    def load_text(self, text, source="file"):
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"malformed config: {exc}") from exc
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigurationError(f"unknown config section [{sec}]")
            for key, raw in parser.items(sec):
                self.set(f"{sec}.{key}", raw, source)
        return self

    def load_file(self, path):
        try:
            text = open(path).read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
        return self.load_text(text)

    def dumps(self, with_provenance=True):
        buf = io.StringIO()
        for sec in SCHEMA:
            buf.write(f"[{sec}]\n")
            for key in SCHEMA[sec]:
                v = self.values[f"{sec}.{key}"]
                text = ", ".join(str(x) for x in v) if isinstance(v, list) else str(v)
                note = f"  # {self.provenance[f'{sec}.{key}']}" if with_provenance else ""
                buf.write(f"{key} = {text}{note}\n" if note else f"{key} = {text}\n")
            buf.write("\n")
        return buf.getvalue()

