"""Dual-head network: shared base trunk plus spoof and matching heads.

A backbone is a stem plus an ordered list of blocks.  At split point s the
last s blocks are replicated (fresh weights) into each head; the remaining
blocks form the shared base.  Each head ends in its own feature convolution,
global average pooling, and a linear map: 2 logits for spoof detection,
descriptor_dim values for matching.

Variants:
  tiny      4 inverted-residual blocks, ~21K params, the test workhorse
  dhm_full  the 7-stage MobileNet-v2 bottleneck layout
  dhr       ResNet-18 derived variant (fixed split, feature-flagged)
  dhi       Inception-v3 derived variant (fixed split, feature-flagged)
"""

from __future__ import annotations

import copy
import io
import json
import math
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ModelFormatError

MODEL_MAGIC = b"DUALPRNT"
MODEL_FORMAT_VERSION = 1
SPOOF_CLASS_INDEX = 1


@dataclass(frozen=True)
class StageSpec:
    """One inverted-residual stage: expansion t, channels c, repeats n, stride s."""

    expansion: int
    channels: int
    repeats: int
    stride: int


@dataclass(frozen=True)
class BackboneSpec:
    variant: str
    family: str  # mobile | resnet | inception
    in_channels: int
    input_size: int
    stem_channels: int
    stages: tuple[StageSpec, ...]
    head_channels: int

    @property
    def total_blocks(self) -> int:
        if self.family == "mobile":
            return len(self.stages)
        if self.family == "resnet":
            return 4
        return 11

    def valid_splits(self) -> range:
        if self.family == "mobile":
            return range(0, self.total_blocks + 1)
        if self.family == "resnet":
            return range(0, 1)
        return range(1, 2)


_MOBILE_V2_STAGES = (
    StageSpec(1, 16, 1, 1),
    StageSpec(6, 24, 2, 2),
    StageSpec(6, 32, 3, 2),
    StageSpec(6, 64, 4, 2),
    StageSpec(6, 96, 3, 1),
    StageSpec(6, 160, 3, 2),
    StageSpec(6, 320, 1, 1),
)

_TINY_STAGES = (
    StageSpec(1, 12, 1, 2),
    StageSpec(4, 16, 1, 2),
    StageSpec(4, 24, 1, 2),
    StageSpec(4, 32, 1, 1),
)

_BACKBONES = {
    "tiny": BackboneSpec("tiny", "mobile", 1, 224, 8, _TINY_STAGES, 64),
    "dhm_full": BackboneSpec("dhm_full", "mobile", 1, 224, 32, _MOBILE_V2_STAGES, 1280),
    "dhr": BackboneSpec("dhr", "resnet", 3, 224, 64, (), 256),
    "dhi": BackboneSpec("dhi", "inception", 3, 448, 32, (), 2048),
}


def get_backbone(variant: str) -> BackboneSpec:
    try:
        return _BACKBONES[variant]
    except KeyError:
        raise ConfigError(
            f"unknown backbone variant {variant!r}; choose from {sorted(_BACKBONES)}"
        ) from None


@dataclass(frozen=True)
class DualHeadConfig:
    split_point: int = 0
    descriptor_dim: int = 64
    num_classes: int = 2

    def validate(self, spec: BackboneSpec) -> None:
        if self.descriptor_dim < 1:
            raise ConfigError("descriptor_dim must be >= 1")
        if self.num_classes != 2:
            raise ConfigError("num_classes is fixed at 2")
        if self.split_point not in spec.valid_splits():
            allowed = list(spec.valid_splits())
            raise ConfigError(
                f"split_point {self.split_point} invalid for {spec.variant}; "
                f"allowed: {allowed}")


class _ScaleGrad(torch.autograd.Function):
    """Identity forward; backward multiplies the incoming gradient by `scale`.

    Inserted between the base output and a head so a suppressed branch
    contributes a negated gradient to the base while the head itself keeps
    learning normally.
    """

    @staticmethod
    def forward(ctx, x, scale: float):
        ctx.scale = scale
        return x

    @staticmethod
    def backward(ctx, grad):
        return grad * ctx.scale, None


def scale_grad(x: torch.Tensor, scale: float) -> torch.Tensor:
    if scale == 1.0:
        return x
    return _ScaleGrad.apply(x, float(scale))


# ---------------------------------------------------------------------------
# Mobile family blocks.


class InvertedResidual(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, expansion: int):
        super().__init__()
        hidden = c_in * expansion
        layers: list[nn.Module] = []
        if expansion != 1:
            layers += [nn.Conv2d(c_in, hidden, 1, bias=False),
                       nn.BatchNorm2d(hidden), nn.ReLU6(inplace=True)]
        layers += [
            nn.Conv2d(hidden, hidden, 3, stride, 1, groups=hidden, bias=False),
            nn.BatchNorm2d(hidden), nn.ReLU6(inplace=True),
            nn.Conv2d(hidden, c_out, 1, bias=False),
            nn.BatchNorm2d(c_out),
        ]
        self.conv = nn.Sequential(*layers)
        self.use_residual = stride == 1 and c_in == c_out

    def forward(self, x):
        out = self.conv(x)
        return x + out if self.use_residual else out


def _mobile_stage(c_in: int, stage: StageSpec) -> tuple[nn.Sequential, int]:
    blocks = []
    for i in range(stage.repeats):
        blocks.append(InvertedResidual(
            c_in if i == 0 else stage.channels, stage.channels,
            stage.stride if i == 0 else 1, stage.expansion))
        c_in = stage.channels
    return nn.Sequential(*blocks), stage.channels


def _conv_bn_act(c_in, c_out, kernel, stride=1, padding=0, groups=1,
                 act=nn.ReLU6) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel, stride, padding, groups=groups, bias=False),
        nn.BatchNorm2d(c_out),
        act(inplace=True),
    )


# ---------------------------------------------------------------------------
# ResNet family blocks.


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        if stride != 1 or c_in != c_out:
            self.downsample = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride, bias=False),
                nn.BatchNorm2d(c_out))
        else:
            self.downsample = None

    def forward(self, x):
        identity = self.downsample(x) if self.downsample is not None else x
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


# ---------------------------------------------------------------------------
# Inception family blocks (the standard A/B/C/D/E module structure).


class BasicConv2d(nn.Module):
    def __init__(self, c_in, c_out, **kwargs):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, bias=False, **kwargs)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)), inplace=True)


class InceptionA(nn.Module):
    def __init__(self, c_in, pool_features):
        super().__init__()
        self.branch1x1 = BasicConv2d(c_in, 64, kernel_size=1)
        self.branch5x5 = nn.Sequential(
            BasicConv2d(c_in, 48, kernel_size=1),
            BasicConv2d(48, 64, kernel_size=5, padding=2))
        self.branch3x3dbl = nn.Sequential(
            BasicConv2d(c_in, 64, kernel_size=1),
            BasicConv2d(64, 96, kernel_size=3, padding=1),
            BasicConv2d(96, 96, kernel_size=3, padding=1))
        self.branch_pool = BasicConv2d(c_in, pool_features, kernel_size=1)

    def forward(self, x):
        pool = self.branch_pool(F.avg_pool2d(x, 3, stride=1, padding=1))
        return torch.cat(
            [self.branch1x1(x), self.branch5x5(x), self.branch3x3dbl(x), pool], 1)


class InceptionB(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.branch3x3 = BasicConv2d(c_in, 384, kernel_size=3, stride=2)
        self.branch3x3dbl = nn.Sequential(
            BasicConv2d(c_in, 64, kernel_size=1),
            BasicConv2d(64, 96, kernel_size=3, padding=1),
            BasicConv2d(96, 96, kernel_size=3, stride=2))

    def forward(self, x):
        return torch.cat(
            [self.branch3x3(x), self.branch3x3dbl(x), F.max_pool2d(x, 3, stride=2)], 1)


class InceptionC(nn.Module):
    def __init__(self, c_in, c7):
        super().__init__()
        self.branch1x1 = BasicConv2d(c_in, 192, kernel_size=1)
        self.branch7x7 = nn.Sequential(
            BasicConv2d(c_in, c7, kernel_size=1),
            BasicConv2d(c7, c7, kernel_size=(1, 7), padding=(0, 3)),
            BasicConv2d(c7, 192, kernel_size=(7, 1), padding=(3, 0)))
        self.branch7x7dbl = nn.Sequential(
            BasicConv2d(c_in, c7, kernel_size=1),
            BasicConv2d(c7, c7, kernel_size=(7, 1), padding=(3, 0)),
            BasicConv2d(c7, c7, kernel_size=(1, 7), padding=(0, 3)),
            BasicConv2d(c7, c7, kernel_size=(7, 1), padding=(3, 0)),
            BasicConv2d(c7, 192, kernel_size=(1, 7), padding=(0, 3)))
        self.branch_pool = BasicConv2d(c_in, 192, kernel_size=1)

    def forward(self, x):
        pool = self.branch_pool(F.avg_pool2d(x, 3, stride=1, padding=1))
        return torch.cat(
            [self.branch1x1(x), self.branch7x7(x), self.branch7x7dbl(x), pool], 1)


class InceptionD(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.branch3x3 = nn.Sequential(
            BasicConv2d(c_in, 192, kernel_size=1),
            BasicConv2d(192, 320, kernel_size=3, stride=2))
        self.branch7x7x3 = nn.Sequential(
            BasicConv2d(c_in, 192, kernel_size=1),
            BasicConv2d(192, 192, kernel_size=(1, 7), padding=(0, 3)),
            BasicConv2d(192, 192, kernel_size=(7, 1), padding=(3, 0)),
            BasicConv2d(192, 192, kernel_size=3, stride=2))

    def forward(self, x):
        return torch.cat(
            [self.branch3x3(x), self.branch7x7x3(x), F.max_pool2d(x, 3, stride=2)], 1)


class InceptionE(nn.Module):
    def __init__(self, c_in):
        super().__init__()
        self.branch1x1 = BasicConv2d(c_in, 320, kernel_size=1)
        self.branch3x3_1 = BasicConv2d(c_in, 384, kernel_size=1)
        self.branch3x3_2a = BasicConv2d(384, 384, kernel_size=(1, 3), padding=(0, 1))
        self.branch3x3_2b = BasicConv2d(384, 384, kernel_size=(3, 1), padding=(1, 0))
        self.branch3x3dbl_1 = BasicConv2d(c_in, 448, kernel_size=1)
        self.branch3x3dbl_2 = BasicConv2d(448, 384, kernel_size=3, padding=1)
        self.branch3x3dbl_3a = BasicConv2d(384, 384, kernel_size=(1, 3), padding=(0, 1))
        self.branch3x3dbl_3b = BasicConv2d(384, 384, kernel_size=(3, 1), padding=(1, 0))
        self.branch_pool = BasicConv2d(c_in, 192, kernel_size=1)

    def forward(self, x):
        b3 = self.branch3x3_1(x)
        b3 = torch.cat([self.branch3x3_2a(b3), self.branch3x3_2b(b3)], 1)
        bd = self.branch3x3dbl_2(self.branch3x3dbl_1(x))
        bd = torch.cat([self.branch3x3dbl_3a(bd), self.branch3x3dbl_3b(bd)], 1)
        pool = self.branch_pool(F.avg_pool2d(x, 3, stride=1, padding=1))
        return torch.cat([self.branch1x1(x), b3, bd, pool], 1)


# ---------------------------------------------------------------------------
# Backbone assembly.


def _build_blocks(spec: BackboneSpec) -> tuple[nn.Module, list[nn.Module], list[int]]:
    """Stem, ordered block list, and per-block output channels."""
    if spec.family == "mobile":
        stem = _conv_bn_act(spec.in_channels, spec.stem_channels, 3, 2, 1)
        blocks, channels = [], []
        c = spec.stem_channels
        for stage in spec.stages:
            block, c = _mobile_stage(c, stage)
            blocks.append(block)
            channels.append(c)
        return stem, blocks, channels
    if spec.family == "resnet":
        stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, 64, 7, 2, 3, bias=False),
            nn.BatchNorm2d(64), nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1))
        tail = nn.Sequential(
            _conv_bn_act(256, 256, 3, 2, 1, act=nn.ReLU),
            _conv_bn_act(256, 256, 3, 1, 1, act=nn.ReLU),
            _conv_bn_act(256, 256, 1, 2, 0, act=nn.ReLU))
        blocks = [
            nn.Sequential(BasicBlock(64, 64), BasicBlock(64, 64)),
            nn.Sequential(BasicBlock(64, 128, 2), BasicBlock(128, 128)),
            nn.Sequential(BasicBlock(128, 256, 2), BasicBlock(256, 256)),
            tail,
        ]
        return stem, blocks, [64, 128, 256, 256]
    # inception
    stem = nn.Sequential(
        BasicConv2d(spec.in_channels, 32, kernel_size=3, stride=3),
        BasicConv2d(32, 32, kernel_size=3),
        BasicConv2d(32, 64, kernel_size=3, padding=1),
        nn.MaxPool2d(3, 2),
        BasicConv2d(64, 80, kernel_size=1),
        BasicConv2d(80, 192, kernel_size=3),
        nn.MaxPool2d(3, 2))
    blocks = [
        InceptionA(192, 32), InceptionA(256, 64), InceptionA(288, 64),
        InceptionB(288),
        InceptionC(768, 128), InceptionC(768, 160), InceptionC(768, 160),
        InceptionC(768, 192),
        InceptionD(768), InceptionE(1280), InceptionE(2048),
    ]
    channels = [256, 288, 288, 768, 768, 768, 768, 768, 1280, 2048, 2048]
    return stem, blocks, channels


class _Trunk(nn.Module):
    """Stem plus a run of blocks, stoppable at any depth."""

    def __init__(self, stem: nn.Module, blocks: list[nn.Module]):
        super().__init__()
        self.stem = stem
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, depth: int | None = None):
        x = self.stem(x)
        stop = len(self.blocks) if depth is None else depth
        for block in self.blocks[:stop]:
            x = block(x)
        return x


def _make_head(spec: BackboneSpec, head_blocks: list[nn.Module], c_in: int,
               out_dim: int) -> nn.Sequential:
    layers = list(head_blocks)
    if spec.family == "mobile":
        layers.append(_conv_bn_act(c_in, spec.head_channels, 1))
        feat = spec.head_channels
    elif spec.family == "resnet":
        layers += [_conv_bn_act(256, 256, 3, 1, 1, act=nn.ReLU),
                   _conv_bn_act(256, 256, 3, 1, 1, act=nn.ReLU)]
        feat = 256
    else:
        feat = spec.head_channels
    layers += [nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(feat, out_dim)]
    return nn.Sequential(*layers)


class DualHeadModel(nn.Module):
    """Shared base with a 2-logit spoof head and a descriptor head."""

    def __init__(self, spec: BackboneSpec, config: DualHeadConfig):
        super().__init__()
        config.validate(spec)
        self.spec = spec
        self.config = config

        stem, blocks, channels = _build_blocks(spec)
        split = config.split_point
        n_base = len(blocks) - split
        self.base = _Trunk(stem, blocks[:n_base])

        def fresh_tail() -> list[nn.Module]:
            _, tail, _ = _build_blocks(spec)
            return tail[n_base:]

        head_in = channels[-1]
        self.spoof_head = _make_head(spec, fresh_tail(), head_in, config.num_classes)
        self.match_head = _make_head(spec, fresh_tail(), head_in, config.descriptor_dim)
        self.base_blocks = n_base
        self.head_blocks = split

    def forward(self, x: torch.Tensor, s_sd: float = 1.0, s_m: float = 1.0):
        feat = self.base(_prepare_input(x, self.spec.in_channels,
                                self.spec.input_size))
        logits = self.spoof_head(scale_grad(feat, s_sd))
        descriptors = self.match_head(scale_grad(feat, s_m))
        return logits, descriptors

    def spoof_probabilities(self, logits: torch.Tensor) -> torch.Tensor:
        return torch.softmax(logits, dim=1)[:, SPOOF_CLASS_INDEX]


def _prepare_input(x: torch.Tensor, in_channels: int,
                   input_size: int | None = None) -> torch.Tensor:
    if x.dim() != 4:
        raise ConfigError(f"expected a 4-D batch, got {tuple(x.shape)}")
    if input_size is not None and tuple(x.shape[2:]) != (input_size, input_size):
        raise ConfigError(
            f"expected {input_size}x{input_size} patches, "
            f"got {x.shape[2]}x{x.shape[3]}")
    if x.shape[1] == 1 and in_channels == 3:
        return x.expand(-1, 3, -1, -1)
    if x.shape[1] != in_channels:
        raise ConfigError(
            f"expected {in_channels} input channels, got {x.shape[1]}")
    return x


def _init_weights(model: nn.Module, seed: int) -> None:
    gen = torch.Generator(device="cpu").manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                fan_out = m.kernel_size[0] * m.kernel_size[1] * m.out_channels
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_out), generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.fill_(1.0)
                m.bias.zero_()
            elif isinstance(m, nn.Linear):
                m.weight.normal_(0.0, 0.01, generator=gen)
                m.bias.zero_()


def build_model(spec: BackboneSpec | str, config: DualHeadConfig,
                seed: int = 0) -> DualHeadModel:
    """Construct and deterministically initialize a dual-head model."""
    if isinstance(spec, str):
        spec = get_backbone(spec)
    model = DualHeadModel(spec, config)
    _init_weights(model, seed)
    model.eval()
    return model


def count_params(model: DualHeadModel) -> dict[str, int]:
    def n(mod: nn.Module) -> int:
        return sum(p.numel() for p in mod.parameters() if p.requires_grad)

    counts = {
        "base": n(model.base),
        "sd_head": n(model.spoof_head),
        "match_head": n(model.match_head),
    }
    counts["total"] = sum(counts.values())
    return counts


def extract_intermediate(model: DualHeadModel, x: torch.Tensor,
                         depth: int) -> torch.Tensor:
    """Base activation after `depth` blocks (0 = stem output)."""
    if not 0 <= depth <= model.base_blocks:
        raise ConfigError(
            f"depth {depth} out of range; base has {model.base_blocks} blocks")
    with torch.no_grad():
        return model.base(_prepare_input(x, model.spec.in_channels,
                                 model.spec.input_size), depth=depth)


# ---------------------------------------------------------------------------
# Single-head pipelines for the benchmark baselines.


class SingleHeadNet(nn.Module):
    """A standalone base+head stack sharing weights with a dual-head model."""

    def __init__(self, model: DualHeadModel, head: str):
        super().__init__()
        if head not in ("spoof", "match"):
            raise ConfigError(f"head must be 'spoof' or 'match', got {head!r}")
        self.spec = model.spec
        self.base = copy.deepcopy(model.base)
        self.head = copy.deepcopy(
            model.spoof_head if head == "spoof" else model.match_head)

    def forward(self, x):
        return self.head(self.base(_prepare_input(
            x, self.spec.in_channels, self.spec.input_size)))


# ---------------------------------------------------------------------------
# Model file container: magic, uint32 header length, JSON header, float32 data.


def _spec_to_json(spec: BackboneSpec) -> dict:
    d = asdict(spec)
    d["stages"] = [list(asdict(s).values()) for s in spec.stages]
    return d


def _spec_from_json(d: dict) -> BackboneSpec:
    spec = get_backbone(d.get("variant", ""))
    if _spec_to_json(spec) != d:
        raise ModelFormatError(
            f"stored backbone table for {d.get('variant')!r} does not match "
            "this build's definition")
    return spec


def write_state_container(path, meta: dict, state_dict) -> int:
    """Shared raw container: magic, header, float32 blocks in state order."""
    tensors = []
    buf = io.BytesIO()
    for name, tensor in state_dict.items():
        arr = tensor.detach().cpu().numpy()
        tensors.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    header = json.dumps({"format_version": MODEL_FORMAT_VERSION, **meta,
                         "tensors": tensors}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(buf.getvalue())
    return os.path.getsize(path)


def save_model(model: DualHeadModel, path) -> int:
    """Write the container; returns the serialized size in bytes."""
    return write_state_container(path, {
        "kind": "dual_head",
        "spec": _spec_to_json(model.spec),
        "config": asdict(model.config),
    }, model.state_dict())


def load_model(path, expect_descriptor_dim: int | None = None) -> DualHeadModel:
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ModelFormatError(f"{path}: not a model container (bad magic)")
        (header_len,) = struct.unpack("<I", fh.read(4))
        try:
            header = json.loads(fh.read(header_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFormatError(f"{path}: corrupt header: {exc}") from None
        if header.get("format_version") != MODEL_FORMAT_VERSION:
            raise ModelFormatError(
                f"{path}: unsupported format version {header.get('format_version')}")
        if header.get("kind") != "dual_head":
            raise ModelFormatError(
                f"{path}: container holds {header.get('kind')!r}, not a dual-head model")
        spec = _spec_from_json(header["spec"])
        config = DualHeadConfig(**header["config"])
        if expect_descriptor_dim is not None and \
                config.descriptor_dim != expect_descriptor_dim:
            raise ModelFormatError(
                f"{path}: model has descriptor_dim {config.descriptor_dim}, "
                f"expected {expect_descriptor_dim}")
        model = DualHeadModel(spec, config)
        state = model.state_dict()
        if [t["name"] for t in header["tensors"]] != list(state.keys()):
            raise ModelFormatError(f"{path}: tensor table does not match model structure")
        loaded = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 4)
            if len(raw) != count * 4:
                raise ModelFormatError(f"{path}: truncated tensor {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(shape)
            target = state[entry["name"]]
            if tuple(target.shape) != shape:
                raise ModelFormatError(
                    f"{path}: tensor {entry['name']} has shape {shape}, "
                    f"expected {tuple(target.shape)}")
            loaded[entry["name"]] = torch.from_numpy(
                arr.astype(entry["dtype"], copy=True))
        model.load_state_dict(loaded)
        model.eval()
        return model
