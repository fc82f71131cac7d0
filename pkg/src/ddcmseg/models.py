"""Complete networks: truncated-ResNet50 and tiny backbones, the DDCM-R50
segmentation graph, and checkpoint save/load."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ddcm import DdcmConfig, add_ddcm_module
from .errors import CheckpointError, ConfigError
from .graph import ModelGraph
from .serialize import load_tensors, save_tensors
from .tensor import Tensor4

BACKBONE_KINDS = {
    # kind -> (out_channels, out_stride)
    "resnet50-trunc3": (1024, 16),
    "tiny": (64, 16),
}


@dataclass(frozen=True)
class BackboneSpec:
    kind: str

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ConfigError(f"unknown backbone kind {self.kind!r}; "
                              f"choose one of {sorted(BACKBONE_KINDS)}")

    @property
    def out_channels(self) -> int:
        return BACKBONE_KINDS[self.kind][0]

    @property
    def out_stride(self) -> int:
        return BACKBONE_KINDS[self.kind][1]


def _add_bottleneck(g: ModelGraph, inp: str, prefix: str, mid: int, out_c: int,
                    stride: int) -> str:
    """Standard 1x1 -> 3x3 (carries the stride) -> 1x1 residual bottleneck."""
    in_c = g.channels(inp)
    y = g.add_conv(f"{prefix}.conv1", inp, mid, 1, padding=0, bias=False)
    y = g.add_bn(f"{prefix}.bn1", y)
    y = g.add_relu(f"{prefix}.relu1", y)
    y = g.add_conv(f"{prefix}.conv2", y, mid, 3, stride=stride, padding=1, bias=False)
    y = g.add_bn(f"{prefix}.bn2", y)
    y = g.add_relu(f"{prefix}.relu2", y)
    y = g.add_conv(f"{prefix}.conv3", y, out_c, 1, padding=0, bias=False)
    y = g.add_bn(f"{prefix}.bn3", y)
    if stride != 1 or in_c != out_c:
        s = g.add_conv(f"{prefix}.down.conv", inp, out_c, 1, stride=stride, padding=0, bias=False)
        s = g.add_bn(f"{prefix}.down.bn", s)
    else:
        s = inp
    y = g.add_add(f"{prefix}.add", (y, s))
    return g.add_relu(f"{prefix}.relu3", y)


def add_backbone(g: ModelGraph, inp: str, spec: BackboneSpec, prefix: str = "backbone") -> str:
    if spec.kind == "resnet50-trunc3":
        # stem: 7x7/2 conv + 3x3/2 max pool, then the first three bottleneck
        # stages of ResNet50 (the conv5 stage and the classifier head are
        # dropped); ends at stride 16 with 1024 channels.
        y = g.add_conv(f"{prefix}.conv1", inp, 64, 7, stride=2, padding=3, bias=False)
        y = g.add_bn(f"{prefix}.bn1", y)
        y = g.add_relu(f"{prefix}.relu1", y)
        y = g.add_maxpool(f"{prefix}.pool1", y, 3, stride=2, padding=1)
        stages = ((3, 64, 256, 1), (4, 128, 512, 2), (6, 256, 1024, 2))
        for s, (blocks, mid, out_c, stride) in enumerate(stages, start=1):
            for b in range(blocks):
                y = _add_bottleneck(g, y, f"{prefix}.layer{s}.{b}", mid, out_c,
                                    stride if b == 0 else 1)
        return y
    if spec.kind == "tiny":
        # four stride-2 conv/BN/ReLU blocks: cheap stand-in at the same
        # output stride and a 64-channel tail for fast desk-scale runs.
        y = inp
        for i, width in enumerate((16, 32, 48, 64), start=1):
            y = g.add_conv(f"{prefix}.conv{i}", y, width, 3, stride=2, padding=1, bias=False)
            y = g.add_bn(f"{prefix}.bn{i}", y)
            y = g.add_relu(f"{prefix}.relu{i}", y)
        return y
    raise ConfigError(f"unknown backbone kind {spec.kind!r}")


def build_backbone(spec: BackboneSpec, bands: int = 3, seed: int = 0) -> ModelGraph:
    """Backbone as a standalone graph (useful for analysis and partial loads)."""
    g = ModelGraph(bands, seed=seed, name=f"backbone-{spec.kind}")
    add_backbone(g, "input", spec)
    return g


@dataclass(frozen=True)
class DdcmR50Spec:
    """Wiring of the full segmentation network.

    Low path: a DDCM encoder on the normalized image at full resolution,
    max-pooled by 4.  High path: backbone (stride 16) -> two DDCM decoders ->
    bilinear x4 up to stride 4.  The paths are fused by channel concatenation,
    classified by a 1x1 conv, upsampled x4 to full resolution, and normalized
    to per-pixel log-probabilities.
    """

    num_classes: int = 6
    bands: int = 3
    backbone: BackboneSpec = field(default_factory=lambda: BackboneSpec("resnet50-trunc3"))
    encoder: DdcmConfig | None = None
    decoder1: DdcmConfig | None = None
    decoder2: DdcmConfig | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.encoder is None:
            object.__setattr__(self, "encoder", DdcmConfig(
                self.bands, 3, (1, 2, 3, 5, 7, 9), kernel=3, merge_out_channels=3))
        if self.decoder1 is None:
            object.__setattr__(self, "decoder1", DdcmConfig(
                self.backbone.out_channels, 36, (1, 2, 3, 4), kernel=3,
                merge_out_channels=36))
        if self.decoder2 is None:
            object.__setattr__(self, "decoder2", DdcmConfig(
                self.decoder1.merge_out_channels, 18, (1,), kernel=3,
                merge_out_channels=18))
        if self.encoder.in_channels != self.bands:
            raise ConfigError(
                f"encoder expects {self.encoder.in_channels} input channels "
                f"but the image has {self.bands} bands"
            )
        if self.decoder1.in_channels != self.backbone.out_channels:
            raise ConfigError(
                f"decoder1 expects {self.decoder1.in_channels} channels but the "
                f"backbone emits {self.backbone.out_channels}"
            )


def build_ddcm_r50(spec: DdcmR50Spec, seed: int = 0) -> ModelGraph:
    """Assemble the full graph; input h and w must be divisible by 16."""
    g = ModelGraph(spec.bands, seed=seed, name="ddcm-r50")
    enc = add_ddcm_module(g, "input", spec.encoder, "encoder")
    enc = g.add_maxpool("encoder.pool", enc, 4, stride=4)
    y = add_backbone(g, "input", spec.backbone)
    y = add_ddcm_module(g, y, spec.decoder1, "decoder1")
    y = add_ddcm_module(g, y, spec.decoder2, "decoder2")
    y = g.add_upsample("decoder.up", y, 4)
    y = g.add_concat("head.fuse", (enc, y))
    y = g.add_conv("head.classifier", y, spec.num_classes, 1, padding=0, bias=True)
    y = g.add_upsample("head.up", y, 4)
    g.add_log_softmax("output", y)
    return g


def predictor(graph: ModelGraph):
    """Wrap a graph as an array-in/array-out eval-mode callable."""

    def run(batch: np.ndarray) -> np.ndarray:
        return graph.forward(Tensor4(batch), train=False).data

    return run


def save_checkpoint(graph: ModelGraph, path, prefix: str | None = None) -> None:
    """Write parameters and buffers; ``prefix`` limits to one subtree."""
    items = [(n, t.data) for n, t in graph.state_tensors()
             if prefix is None or n.startswith(prefix)]
    save_tensors(path, items)


def load_checkpoint(graph: ModelGraph, path) -> list[str]:
    """Load every tensor in the file into the graph.

    Tensors absent from the file keep their current values, which makes
    prefix-saved files (e.g. backbone-only) load cleanly.  Unknown names or
    shape mismatches are all collected and reported together.
    """
    stored = load_tensors(path)
    known = dict(graph.state_tensors())
    problems = []
    for name, arr in stored.items():
        if name not in known:
            problems.append(f"unknown tensor {name!r}")
        elif tuple(arr.shape) != known[name].shape:
            problems.append(
                f"shape mismatch for {name!r}: file {tuple(arr.shape)} vs model {known[name].shape}"
            )
    if problems:
        raise CheckpointError(f"{path}: " + "; ".join(problems))
    for name, arr in stored.items():
        known[name].data[...] = arr
    return list(stored)
