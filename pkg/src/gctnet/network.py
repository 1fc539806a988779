"""Network specs, graph construction with GCT placement, and checkpoints.

A network spec is a JSON document::

    {"name": "smallcnn", "input_channels": 3, "placement": "before_conv",
     "gct": {"embed_norm": "l2", "channel_norm": "l2", "adaptation": "one_plus_tanh"},
     "layers": [{"kind": "conv", "out": 16, "kernel": 3}, {"kind": "bn"}, {"kind": "relu"},
                {"kind": "residual", "body": [...], "shortcut": [...]},
                {"kind": "gap"}, {"kind": "linear", "out": 10}]}

``placement`` decides where GCT layers are inserted automatically:
``none``, ``before_conv`` (every conv, including the stem and shortcut convs),
``before_bn``, ``after_bn``, or ``block_last_two`` (before the last two convs of
every residual body). ``se_blocks: true`` adds one SE block per residual body,
after its last BN.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gct as G
from .layers import (BatchNorm2d, Conv2d, GctLayer, GlobalAvgPool, Linear, MaxPool2d,
                     ReLU, Residual, SEBlock, Sequential, SoftmaxXent)

PLACEMENTS = ("none", "before_conv", "before_bn", "after_bn", "block_last_two")
LAYER_KINDS = ("conv", "bn", "relu", "maxpool", "gap", "linear", "gct", "se", "residual")

CHECKPOINT_MAGIC = b"GCTCKPT\x00"


class SpecError(ValueError):
    pass


@dataclass
class NetworkSpec:
    layers: list
    name: str = "net"
    input_channels: int = 3
    placement: str = "none"
    gct: dict = field(default_factory=dict)
    se_blocks: bool = False
    se_reduction: int = 16

    def __post_init__(self):
        if self.placement not in PLACEMENTS:
            raise SpecError(f"unknown placement {self.placement!r}; expected one of {PLACEMENTS}")
        try:
            G.GctParams.init(1, **self.gct)
        except (TypeError, ValueError) as e:
            raise SpecError(f"invalid GCT variant {self.gct}: {e}") from None
        _check_entries(self.layers, "layers")

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {"layers", "name", "input_channels", "placement", "gct", "se_blocks", "se_reduction"}
        extra = set(d) - known
        if extra:
            raise SpecError(f"unknown network spec keys {sorted(extra)}")
        if "layers" not in d:
            raise SpecError("network spec needs a 'layers' list")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise SpecError(f"{path}: not valid JSON ({e})") from None

    def to_dict(self) -> dict:
        return {"name": self.name, "input_channels": self.input_channels,
                "placement": self.placement, "gct": dict(self.gct),
                "se_blocks": self.se_blocks, "se_reduction": self.se_reduction,
                "layers": copy.deepcopy(self.layers)}

    def replace(self, **changes) -> "NetworkSpec":
        d = self.to_dict()
        d.update(changes)
        return NetworkSpec.from_dict(d)


def _check_entries(entries, where):
    if not isinstance(entries, list):
        raise SpecError(f"{where}: expected a list of layers")
    for i, e in enumerate(entries):
        kind = e.get("kind") if isinstance(e, dict) else None
        if kind not in LAYER_KINDS:
            raise SpecError(f"{where}[{i}]: unknown layer kind {kind!r}")
        if kind in ("conv", "linear") and int(e.get("out", 0)) < 1:
            raise SpecError(f"{where}[{i}]: {kind} needs a positive 'out' width")
        if kind == "residual":
            _check_entries(e.get("body", []), f"{where}[{i}].body")
            _check_entries(e.get("shortcut", []), f"{where}[{i}].shortcut")


class _Builder:
    def __init__(self, spec: NetworkSpec, rng, dtype, materialize):
        self.spec, self.rng, self.dtype, self.materialize = spec, rng, dtype, materialize

    def gct(self, channels, name):
        return GctLayer(channels, dtype=self.dtype, materialize=self.materialize,
                        name=name, **self.spec.gct)

    def build(self, entries, channels, prefix, in_body=False):
        out = []
        placement = self.spec.placement
        conv_positions = [i for i, e in enumerate(entries) if e["kind"] == "conv"]
        last_two = set(conv_positions[-2:]) if in_body else set()
        bn_positions = [i for i, e in enumerate(entries) if e["kind"] == "bn"]
        for i, e in enumerate(entries):
            kind = e["kind"]
            name = f"{prefix}{i}.{kind}"
            kw = dict(dtype=self.dtype, materialize=self.materialize, name=name)
            if kind == "conv":
                if placement == "before_conv" or (placement == "block_last_two" and i in last_two):
                    out.append(self.gct(channels, f"{name}:gct"))
                c_out = int(e["out"])
                out.append(Conv2d(channels, c_out, kernel=int(e.get("kernel", 3)),
                                  stride=int(e.get("stride", 1)), padding=e.get("padding"),
                                  bias=bool(e.get("bias", False)), rng=self.rng, **kw))
                channels = c_out
            elif kind == "bn":
                if placement == "before_bn":
                    out.append(self.gct(channels, f"{name}:gct"))
                out.append(BatchNorm2d(channels, **kw))
                if placement == "after_bn":
                    out.append(self.gct(channels, f"{name}:gct"))
                if in_body and self.spec.se_blocks and bn_positions and i == bn_positions[-1]:
                    out.append(SEBlock(channels, self.spec.se_reduction, rng=self.rng,
                                       dtype=self.dtype, materialize=self.materialize,
                                       name=f"{name}:se"))
            elif kind == "relu":
                out.append(ReLU(name))
            elif kind == "maxpool":
                k = int(e.get("kernel", 2))
                out.append(MaxPool2d(k, int(e.get("stride", k)), int(e.get("padding", 0)), name))
            elif kind == "gap":
                out.append(GlobalAvgPool(name))
            elif kind == "linear":
                c_out = int(e["out"])
                out.append(Linear(int(e.get("in", channels)), c_out, rng=self.rng, **kw))
                channels = c_out
            elif kind == "gct":
                out.append(self.gct(channels, name))
            elif kind == "se":
                out.append(SEBlock(channels, int(e.get("reduction", self.spec.se_reduction)),
                                   rng=self.rng, **kw))
            elif kind == "residual":
                body, c_body = self.build(e.get("body", []), channels, f"{name}/body/", True)
                short, c_short = self.build(e.get("shortcut", []), channels,
                                            f"{name}/shortcut/")
                if c_body != c_short:
                    raise SpecError(f"{name}: body ends with {c_body} channels but shortcut "
                                    f"carries {c_short}")
                out.append(Residual(body, short, post_relu=bool(e.get("post_relu", True)),
                                    name=name))
                channels = c_body
        return out, channels


class Network(Sequential):
    """A built layer graph plus the spec that produced it."""

    kind = "network"

    def __init__(self, layers, spec: NetworkSpec, dtype):
        super().__init__(layers, name=spec.name)
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.loss = SoftmaxXent()

    def gct_layers(self):
        return [layer for layer in self.walk() if isinstance(layer, GctLayer)]

    def named_parameters(self):
        """``(qualified_name, layer, key)`` for every trainable array, in forward order."""
        return [(f"{layer.name}.{k}", layer, k) for layer in self.walk() for k in layer.params]

    def state_dict(self) -> dict:
        out = {}
        for layer in self.walk():
            for k, v in layer.params.items():
                out[f"{layer.name}.{k}"] = v
            for k, v in layer.buffers.items():
                out[f"{layer.name}.{k}"] = v
        return out

    def load_state_dict(self, state: dict):
        for layer in self.walk():
            for store in (layer.params, layer.buffers):
                for k in store:
                    key = f"{layer.name}.{k}"
                    if key not in state:
                        raise SpecError(f"checkpoint is missing tensor {key!r}")
                    v = np.asarray(state[key])
                    if v.shape != store[k].shape:
                        raise SpecError(f"{key}: shape {v.shape} != expected {store[k].shape}")
                    store[k] = np.array(v, dtype=self.dtype)

    def astype(self, dtype):
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def predict(self, x, batch_size=256):
        return np.concatenate([self.forward(x[i:i + batch_size].astype(self.dtype, copy=False))
                               for i in range(0, len(x), batch_size)])


def build_network(spec, seed: int = 0, dtype=np.float32, materialize: bool = True) -> Network:
    """Build a :class:`Network` from a :class:`NetworkSpec` (or its dict form).

    Weight initialization draws from ``default_rng(seed)`` in spec order. GCT
    layers draw nothing, so networks differing only in placement share all
    other weights.
    """
    if isinstance(spec, dict):
        spec = NetworkSpec.from_dict(spec)
    rng = np.random.default_rng(seed) if materialize else None
    layers, _ = _Builder(spec, rng, dtype, materialize).build(spec.layers, spec.input_channels, "")
    net = Network(layers, spec, dtype)
    return net


# reference architectures

def _conv_bn(out, kernel=3, stride=1, padding=None, relu=True):
    conv = {"kind": "conv", "out": out, "kernel": kernel, "stride": stride}
    if padding is not None:
        conv["padding"] = padding
    return [conv, {"kind": "bn"}] + ([{"kind": "relu"}] if relu else [])


def smallcnn(num_classes=10, input_channels=3, placement="none", **kw) -> NetworkSpec:
    """conv16-conv32-pool-conv64-pool-GAP-linear, each conv followed by BN + ReLU."""
    layers = (_conv_bn(16) + _conv_bn(32) + [{"kind": "maxpool", "kernel": 2}]
              + _conv_bn(64) + [{"kind": "maxpool", "kernel": 2}, {"kind": "gap"},
                                {"kind": "linear", "out": num_classes}])
    return NetworkSpec(layers=layers, name="smallcnn", input_channels=input_channels,
                       placement=placement, **kw)


def basic_block(c_in, c_out, stride):
    body = _conv_bn(c_out, 3, stride) + _conv_bn(c_out, 3, 1, relu=False)
    shortcut = _conv_bn(c_out, 1, stride, 0, relu=False) if (stride != 1 or c_in != c_out) else []
    return {"kind": "residual", "body": body, "shortcut": shortcut}


def miniresnet(num_classes=10, input_channels=3, widths=(16, 32, 64), blocks_per_stage=1,
               placement="none", **kw) -> NetworkSpec:
    """Stem conv plus three residual stages of basic blocks; stages 2 and 3 halve resolution."""
    layers = _conv_bn(widths[0])
    c = widths[0]
    for s, w in enumerate(widths):
        for b in range(blocks_per_stage):
            stride = 2 if (s > 0 and b == 0) else 1
            layers.append(basic_block(c, w, stride))
            c = w
    layers += [{"kind": "gap"}, {"kind": "linear", "out": num_classes}]
    return NetworkSpec(layers=layers, name="miniresnet", input_channels=input_channels,
                       placement=placement, **kw)


def resnet50(num_classes=1000, placement="none", **kw) -> NetworkSpec:
    """ResNet-50 with the stride on the first 1x1 conv of each downsampling block."""
    layers = _conv_bn(64, 7, 2, 3) + [{"kind": "maxpool", "kernel": 3, "stride": 2, "padding": 1}]
    c = 64
    for width, blocks, stride in ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)):
        for b in range(blocks):
            s = stride if b == 0 else 1
            body = (_conv_bn(width, 1, s, 0) + _conv_bn(width, 3, 1, 1)
                    + _conv_bn(4 * width, 1, 1, 0, relu=False))
            shortcut = _conv_bn(4 * width, 1, s, 0, relu=False) if b == 0 else []
            layers.append({"kind": "residual", "body": body, "shortcut": shortcut})
            c = 4 * width
    layers += [{"kind": "gap"}, {"kind": "linear", "out": num_classes}]
    return NetworkSpec(layers=layers, name="resnet50", input_channels=3,
                       placement=placement, **kw)


REFERENCE_SPECS = {"smallcnn": smallcnn, "miniresnet": miniresnet, "resnet50": resnet50}


def resolve_spec(ref, **overrides) -> NetworkSpec:
    """A reference-architecture name, a JSON file path, a dict, or a spec."""
    if isinstance(ref, NetworkSpec):
        spec = ref
    elif isinstance(ref, dict):
        spec = NetworkSpec.from_dict(ref)
    elif ref in REFERENCE_SPECS:
        spec = REFERENCE_SPECS[ref]()
    elif Path(ref).is_file():
        spec = NetworkSpec.load(ref)
    else:
        raise SpecError(f"{ref!r} is neither a reference network "
                        f"({', '.join(REFERENCE_SPECS)}) nor a spec file")
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return spec.replace(**overrides) if overrides else spec


# checkpoints: magic, u32 header length, JSON header, little-endian float32 blob

def save_checkpoint(path, net: Network, extra: dict | None = None):
    state = net.state_dict()
    tensors, offset = [], 0
    for name, arr in state.items():
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += int(arr.size)
    header = {"format": "gctnet-checkpoint", "version": 1, "dtype": "<f4",
              "spec": net.spec.to_dict(), "tensors": tensors,
              "gct": {layer.name: layer.gct_params().to_dict() for layer in net.gct_layers()},
              "extra": extra or {}}
    head = json.dumps(header).encode()
    blob = np.concatenate([np.asarray(a, dtype="<f4").ravel() for a in state.values()]) \
        if state else np.zeros(0, dtype="<f4")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(head)))
        f.write(head)
        f.write(blob.astype("<f4").tobytes())


def read_checkpoint(path):
    """Return ``(header, state)`` where ``state`` maps tensor names to float32 arrays."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise SpecError(f"{path}: not a gctnet checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode())
    blob = np.frombuffer(raw, dtype="<f4", offset=12 + n)
    state = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"])) if t["shape"] else 1
        if t["offset"] + count > blob.size:
            raise SpecError(f"{path}: truncated tensor blob at {t['name']!r}")
        state[t["name"]] = blob[t["offset"]:t["offset"] + count].reshape(t["shape"]).astype(np.float32)
    return header, state


def load_checkpoint(path, dtype=np.float32) -> Network:
    header, state = read_checkpoint(path)
    net = build_network(NetworkSpec.from_dict(header["spec"]), seed=0, dtype=dtype)
    net.load_state_dict(state)
    return net
