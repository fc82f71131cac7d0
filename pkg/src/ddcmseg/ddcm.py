"""Dense dilated convolutions merging (DDCM) modules.

A DDCM module is a chain of dilated-convolution stack (DCs) blocks followed
by a 1x1 merging layer.  Each DCs block runs a same-padded dilated conv, then
PReLU, then batch norm, and concatenates the result onto its own input, so
channel counts grow linearly while the spatial resolution is preserved.  The
merge layer (1x1 conv, BN, PReLU) fuses all stacked features down to the
configured output width.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ShapeError
from .graph import ModelGraph
from .tensor import Tensor4


@dataclass(frozen=True)
class DdcmConfig:
    """Widths and dilation rates of one DDCM module.

    Block i consumes in_channels + i * block_out_channels channels (dense
    stacking); the merge layer consumes
    in_channels + len(rates) * block_out_channels.
    """

    in_channels: int
    block_out_channels: int
    rates: tuple[int, ...]
    kernel: int = 3
    merge_out_channels: int = 0

    def __post_init__(self):
        if not self.rates:
            raise ShapeError("DdcmConfig.rates must be non-empty")
        if any(r < 1 for r in self.rates):
            raise ShapeError(f"DdcmConfig.rates must be positive, got {self.rates}")
        for name in ("in_channels", "block_out_channels", "kernel", "merge_out_channels"):
            if getattr(self, name) < 1:
                raise ShapeError(f"DdcmConfig.{name} must be >= 1, got {getattr(self, name)}")

    @property
    def merge_in_channels(self) -> int:
        return self.in_channels + len(self.rates) * self.block_out_channels


def receptive_field(cfg: DdcmConfig) -> int:
    """Theoretical support width of the module: 1 + (kernel - 1) * sum(rates).

    Each DCs block enlarges the field by its effective kernel minus one; the
    blocks act serially through the dense stack and the 1x1 merge adds
    nothing, so the widths telescope into the closed form above.
    """
    return 1 + (cfg.kernel - 1) * sum(cfg.rates)


def receptive_field_of(kernel: int, rates) -> int:
    return 1 + (kernel - 1) * sum(rates)


def add_dcs_block(graph: ModelGraph, inp: str, rate: int, kernel: int,
                  out_channels: int, prefix: str) -> str:
    """Append conv -> PReLU -> BN -> concat(input, .) and return the stack node."""
    y = graph.add_conv(f"{prefix}.conv", inp, out_channels, kernel, dilation=rate,
                       padding="same", bias=False)
    y = graph.add_prelu(f"{prefix}.prelu", y)
    y = graph.add_bn(f"{prefix}.bn", y)
    return graph.add_concat(f"{prefix}.stack", (inp, y))


def add_ddcm_module(graph: ModelGraph, inp: str, cfg: DdcmConfig, prefix: str) -> str:
    """Append a full DDCM module to the graph and return its merge output node."""
    if graph.channels(inp) != cfg.in_channels:
        raise ShapeError(
            f"{prefix}: channel axis mismatch: input has {graph.channels(inp)}, "
            f"config expects {cfg.in_channels}"
        )
    x = inp
    for i, rate in enumerate(cfg.rates):
        expect = cfg.in_channels + i * cfg.block_out_channels
        assert graph.channels(x) == expect, (
            f"{prefix}: dense growth broken at block {i}: {graph.channels(x)} != {expect}"
        )
        x = add_dcs_block(graph, x, rate, cfg.kernel, cfg.block_out_channels,
                          f"{prefix}.block{i}")
    assert graph.channels(x) == cfg.merge_in_channels
    m = graph.add_conv(f"{prefix}.merge.conv", x, cfg.merge_out_channels, 1, bias=False)
    m = graph.add_bn(f"{prefix}.merge.bn", m)
    return graph.add_prelu(f"{prefix}.merge.prelu", m)


class DdcmModule:
    """A standalone DDCM module wrapped around its own single-path graph."""

    def __init__(self, cfg: DdcmConfig, seed: int = 0):
        self.cfg = cfg
        self.graph = ModelGraph(cfg.in_channels, seed=seed, name="ddcm")
        add_ddcm_module(self.graph, "input", cfg, "ddcm")

    def forward(self, x: Tensor4, train: bool = False) -> Tensor4:
        return self.graph.forward(x, train=train)

    __call__ = forward

    def receptive_field(self) -> int:
        return receptive_field(self.cfg)

    def named_parameters(self) -> list[tuple[str, Tensor4]]:
        return self.graph.named_parameters()
