"""Composite architectures: small CNN backbone, the fixed-path-length head,
the variable-length encoder/decoder head, a flat baseline, and losses.

Model configuration is a JSON document with sections ``backbone``,
``schedule``, ``conversion``, ``head``, ``loss`` and ``training``; see
:func:`default_config` for the full set of keys and defaults.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .conversion import (ConvConversion, LinearConversion, PoolConversion,
                         default_schedule, solve_conv_dims, split_factor_dims,
                         validate_schedule, LayerSchedule, aggregate_step)
from .errors import ConfigError, DimensionError, UsageError
from .recurrent import ResidualArc, RnnStack, Seq2Seq, orthogonal_init
from .tensor import Tensor, conv2d, pool2d, read_tensor, write_tensor
from .tree import ClassTree, load_tree, validate_fixed_depth

SCHEMA_VERSION = 1


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


# -- backbone ----------------------------------------------------------------


class ConvBlock:
    """Convolution + ReLU + optional disjoint max pooling."""

    def __init__(self, in_channels, out_channels, kernel, pool, rng):
        fan_in = in_channels * kernel * kernel
        self.weight = _param(rng.standard_normal(
            (out_channels, in_channels, kernel, kernel)) * np.sqrt(2.0 / fan_in))
        self.bias = _param(np.zeros(out_channels))
        self.kernel = kernel
        self.pad = kernel // 2
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.weight, stride=1, zero_pad=self.pad)
        bias = self.bias.reshape(1, -1, 1, 1) if x.data.ndim == 4 else self.bias.reshape(-1, 1, 1)
        out = (out + bias).relu()
        if self.pool > 1:
            out = pool2d(out, self.pool, self.pool, kind="max")
        return out

    def parameters(self) -> dict:
        return {"weight": self.weight, "bias": self.bias}


class CnnBackbone:
    """A stack of conv-pool blocks; every intermediate map is retained."""

    def __init__(self, config: dict, rng):
        channels = config.get("channels", [8, 16, 32, 64])
        kernel = config.get("kernel", 3)
        pool = config.get("pool", 2)
        in_ch = config.get("input_channels", 3)
        self.input_size = config.get("input_size", 32)
        self.input_channels = in_ch
        self.blocks = []
        for out_ch in channels:
            self.blocks.append(ConvBlock(in_ch, out_ch, kernel, pool, rng))
            in_ch = out_ch

    @property
    def num_layers(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor) -> list:
        expected = (self.input_channels, self.input_size, self.input_size)
        got = x.shape[-3:]
        if tuple(got) != expected:
            raise DimensionError(f"backbone expects input {expected}, got {tuple(got)}")
        maps = []
        out = x
        for block in self.blocks:
            out = block.forward(out)
            maps.append(out)
        return maps

    def layer_shapes(self) -> list:
        """Predicted (D, W, H) per layer from the conv/pool shape formulas."""
        shapes = []
        size = self.input_size
        for block in self.blocks:
            # stride-1 convolution with same padding keeps the spatial extent
            size = (size - block.kernel + 2 * block.pad) // 1 + 1
            if block.pool > 1:
                size = (size - block.pool) // block.pool + 1
            shapes.append((block.weight.shape[0], size, size))
        return shapes

    def parameters(self) -> dict:
        out = {}
        for i, block in enumerate(self.blocks):
            for name, t in block.parameters().items():
                out[f"block{i}.{name}"] = t
        return out


def cnn_forward(x: Tensor, backbone: CnnBackbone) -> list:
    return backbone.forward(x)


class FlatHead:
    """Global average pooling over the top feature map plus a linear layer."""

    def __init__(self, channels: int, num_classes: int, rng):
        self.w = _param(orthogonal_init(channels, num_classes, rng))
        self.b = _param(np.zeros(num_classes))

    def forward(self, top_map: Tensor) -> Tensor:
        size = top_map.shape[-1]
        pooled = pool2d(top_map, size, size, kind="avg")
        flat = pooled.reshape(top_map.shape[0], -1) if top_map.data.ndim == 4 else pooled.vec()
        return flat @ self.w + self.b

    def parameters(self) -> dict:
        return {"w": self.w, "b": self.b}


# -- configuration -----------------------------------------------------------


def default_config() -> dict:
    return {
        "backbone": {"channels": [8, 16, 32, 64], "kernel": 3, "pool": 2,
                     "input_channels": 3, "input_size": 32},
        "schedule": {"reverse": False},
        "conversion": {"kind": "linear", "p": 64, "pool_kind": "avg"},
        "head": {"type": "rnn", "hidden": 32, "layers": None, "residual": True},
        "loss": {"weights": None, "multilabel": False},
        "training": {"epochs": 20, "batch_size": 32, "optimizer": "sgd",
                     "lr": 0.01, "momentum": 0.9, "clip": 5.0,
                     "beam_width": 5, "threshold_grid": 0.01},
    }


def merge_config(overrides: dict | None) -> dict:
    config = default_config()
    for section, values in (overrides or {}).items():
        if section not in config:
            raise ConfigError(f"unknown config section {section!r}")
        if isinstance(values, dict):
            config[section].update(values)
        else:
            config[section] = values
    return config


# -- the bundle --------------------------------------------------------------


@dataclass
class ModelBundle:
    mode: str  # fpl | general | multilabel | flat
    config: dict
    tree: ClassTree
    backbone: CnnBackbone
    schedule: LayerSchedule | None
    conversions: dict = field(default_factory=dict)  # layer index -> conversion
    head: object = None  # RnnStack | Seq2Seq | FlatHead
    residual: ResidualArc | None = None
    seed: int = 0
    steps: int = 0  # recurrent steps fed from the CNN
    step_count: int = 0  # optimizer steps taken

    def parameters(self) -> dict:
        """All trainable tensors, names prefixed by ownership (cnn vs head)."""
        out = {}
        for name, t in self.backbone.parameters().items():
            out[f"cnn.{name}"] = t
        for layer, conv in self.conversions.items():
            for name, t in conv.parameters().items():
                out[f"head.convert{layer}.{name}"] = t
        if self.head is not None:
            for name, t in self.head.parameters().items():
                out[f"head.{name}"] = t
        if self.residual is not None:
            for name, t in self.residual.parameters().items():
                out[f"head.residual.{name}"] = t
        return out

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def convert_features(self, maps: list) -> list:
        """Per-step aggregated conversion of the scheduled feature maps."""
        us = []
        for subset in self.schedule.subsets:
            us.append(aggregate_step(
                [self.conversions[s].apply(maps[s - 1]) for s in subset]))
        return us


def build_bundle(config: dict | None, tree: ClassTree, seed: int = 0) -> ModelBundle:
    config = merge_config(config)
    rng = np.random.default_rng(seed)
    backbone = CnnBackbone(config["backbone"], rng)
    head_cfg = config["head"]
    kind = head_cfg.get("type", "rnn")
    n = tree.n_classes

    if kind == "flat":
        channels = config["backbone"].get("channels", [8, 16, 32, 64])[-1]
        head = FlatHead(channels, n, rng)
        return ModelBundle("flat", config, tree, backbone, None, {}, head,
                           None, seed, 0)

    if kind == "rnn":
        steps = validate_fixed_depth(tree)
        mode = "fpl"
    elif kind == "s2s":
        steps = tree.max_path_length()
        mode = "multilabel" if config["loss"].get("multilabel") else "general"
    else:
        raise ConfigError(f"unknown head type {kind!r}")

    sched_cfg = config["schedule"]
    if "subsets" in sched_cfg:
        schedule = LayerSchedule(tuple(tuple(s) for s in sched_cfg["subsets"]))
        validate_schedule(schedule, backbone.num_layers, steps)
    else:
        reverse = bool(sched_cfg.get("reverse", False))
        schedule = default_schedule(backbone.num_layers, steps, reverse=reverse)
        if not reverse:
            validate_schedule(schedule, backbone.num_layers, steps)

    shapes = backbone.layer_shapes()
    conv_cfg = config["conversion"]
    p = int(conv_cfg.get("p", 64))
    conversions = {}
    for layer in schedule.layers_used():
        conversions[layer] = _build_conversion(conv_cfg, shapes[layer - 1], p, rng)

    if kind == "rnn":
        head = RnnStack(p, head_cfg.get("hidden", 32), head_cfg.get("layers") or 3, n, rng)
    else:
        head = Seq2Seq(p, head_cfg.get("hidden", 32), head_cfg.get("layers") or 1, n, rng)

    residual = None
    if kind == "rnn" and head_cfg.get("residual", True):
        residual = ResidualArc(p, n, rng)

    return ModelBundle(mode, config, tree, backbone, schedule, conversions,
                       head, residual, seed, steps)


def _build_conversion(conv_cfg: dict, shape, p: int, rng):
    kind = conv_cfg.get("kind", "linear")
    d, w, h = shape
    if kind == "linear":
        m, nn, v = split_factor_dims(shape, p)
        factors = tuple(_param(orthogonal_init(rows, cols, rng))
                        for rows, cols in ((m, d), (nn, w), (v, h)))
        return LinearConversion(factors)
    if kind == "conv":
        options = solve_conv_dims(d, w, h, p)
        if not options:
            raise ConfigError(f"no convolutional conversion maps {shape} to p={p}")
        opt = options[0]
        fan_in = d * opt.filter_size ** 2
        weight = _param(rng.standard_normal(
            (opt.num_filters, d, opt.filter_size, opt.filter_size)) * np.sqrt(2.0 / fan_in))
        return ConvConversion(weight, opt.stride, opt.zero_pad, p)
    if kind == "pool":
        window = 2 if w % 2 == 0 and w >= 2 else 1
        pooled = (d, (w - window) // window + 1, (h - window) // window + 1)
        m, nn, v = split_factor_dims(pooled, p)
        factors = tuple(_param(orthogonal_init(rows, cols, rng))
                        for rows, cols in ((m, pooled[0]), (nn, pooled[1]), (v, pooled[2])))
        return PoolConversion(window, window, factors, conv_cfg.get("pool_kind", "avg"))
    raise ConfigError(f"unknown conversion kind {kind!r}")


# -- forward passes ----------------------------------------------------------


def fpl_forward(x: Tensor, bundle: ModelBundle) -> list:
    if bundle.mode != "fpl":
        raise ConfigError(f"fpl_forward requires an fpl bundle, got {bundle.mode!r}")
    maps = bundle.backbone.forward(x)
    us = bundle.convert_features(maps)
    outputs, _ = bundle.head.forward(us)
    if bundle.residual is not None:
        outputs = [bundle.residual.apply(u, o) for u, o in zip(us, outputs)]
    return outputs


def general_forward(x: Tensor, bundle: ModelBundle, steps: int,
                    teacher=None, feedback: str = "softmax") -> list:
    if bundle.mode not in ("general", "multilabel"):
        raise ConfigError(f"general_forward requires an s2s bundle, got {bundle.mode!r}")
    if steps < 1 or steps > bundle.tree.max_path_length():
        raise UsageError(
            f"steps must lie in 1..{bundle.tree.max_path_length()}, got {steps}")
    maps = bundle.backbone.forward(x)
    us = bundle.convert_features(maps)
    initial = bundle.head.encode(us)
    return bundle.head.decode(initial, steps, teacher=teacher, feedback=feedback)


def flat_baseline_forward(x: Tensor, bundle: ModelBundle) -> Tensor:
    if bundle.mode != "flat":
        raise ConfigError(f"flat_baseline_forward requires a flat bundle, got {bundle.mode!r}")
    maps = bundle.backbone.forward(x)
    return bundle.head.forward(maps[-1])


# -- losses ------------------------------------------------------------------


def path_loss(outputs: list, targets: list, weights=None, mask=None) -> Tensor:
    """Weighted per-level cross-entropy, averaged over the batch.

    ``outputs[t]`` are logits (B, N); ``targets[t]`` one-hot rows (B, N);
    ``mask[t]`` optionally zeroes samples whose path is shorter than t+1.
    """
    if len(outputs) != len(targets):
        raise UsageError(f"{len(outputs)} outputs vs {len(targets)} target levels")
    if weights is None:
        weights = [1.0] * len(outputs)
    if len(weights) != len(outputs):
        raise UsageError(f"{len(weights)} weights for {len(outputs)} levels")
    batch = outputs[0].shape[0] if outputs[0].data.ndim == 2 else 1
    total = None
    for t, (o, y) in enumerate(zip(outputs, targets)):
        o2 = o if o.data.ndim == 2 else o.reshape(1, -1)
        y2 = np.atleast_2d(np.asarray(y, dtype=np.float64))
        ce = -(Tensor(y2) * o2.log_softmax()).sum(axis=1)
        if mask is not None:
            ce = ce * np.asarray(mask[t], dtype=np.float64)
        term = ce.sum() * float(weights[t])
        total = term if total is None else total + term
    return total * (1.0 / batch)


def multilabel_loss(outputs: list, targets: list, mask=None) -> Tensor:
    """Summed elementwise binary cross-entropy on sigmoid outputs per level."""
    if len(outputs) != len(targets):
        raise UsageError(f"{len(outputs)} outputs vs {len(targets)} target levels")
    batch = outputs[0].shape[0] if outputs[0].data.ndim == 2 else 1
    total = None
    for t, (o, y) in enumerate(zip(outputs, targets)):
        o2 = o if o.data.ndim == 2 else o.reshape(1, -1)
        y2 = np.atleast_2d(np.asarray(y, dtype=np.float64))
        # bce(y, sigmoid(o)) == softplus(o) - y * o, elementwise
        bce = (o2.softplus() - Tensor(y2) * o2).sum(axis=1)
        if mask is not None:
            bce = bce * np.asarray(mask[t], dtype=np.float64)
        term = bce.sum()
        total = term if total is None else total + term
    return total * (1.0 / batch)


# -- checkpoints -------------------------------------------------------------


def save_bundle(directory, bundle: ModelBundle):
    os.makedirs(directory, exist_ok=True)
    tree_text = bundle.tree.serialize()
    with open(os.path.join(directory, "tree.tree"), "w", encoding="utf-8") as fh:
        fh.write(tree_text)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "mode": bundle.mode,
        "config": bundle.config,
        "tree_sha256": hashlib.sha256(tree_text.encode()).hexdigest(),
        "seed": bundle.seed,
        "step_count": bundle.step_count,
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    params_dir = os.path.join(directory, "params")
    os.makedirs(params_dir, exist_ok=True)
    for name, t in bundle.parameters().items():
        write_tensor(os.path.join(params_dir, f"{name}.hpt"), t)
    if bundle.residual is not None:
        write_tensor(os.path.join(params_dir, "head.residual.align.hpt"),
                     bundle.residual.align)


def load_bundle(directory) -> ModelBundle:
    with open(os.path.join(directory, "manifest.json"), "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    tree = load_tree(os.path.join(directory, "tree.tree"))
    bundle = build_bundle(manifest["config"], tree, seed=manifest.get("seed", 0))
    bundle.step_count = manifest.get("step_count", 0)
    params_dir = os.path.join(directory, "params")
    for name, t in bundle.parameters().items():
        stored = read_tensor(os.path.join(params_dir, f"{name}.hpt"))
        if stored.shape != t.shape:
            raise ConfigError(f"checkpoint parameter {name} has shape "
                              f"{stored.shape}, expected {t.shape}")
        t.data = stored.data
    if bundle.residual is not None:
        align_path = os.path.join(params_dir, "head.residual.align.hpt")
        if os.path.exists(align_path):
            bundle.residual.align = read_tensor(align_path)
    return bundle
