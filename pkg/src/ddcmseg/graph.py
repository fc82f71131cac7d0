"""Declarative layer graph executed over Tensor4 values.

A :class:`ModelGraph` is an append-only, topologically ordered list of
:class:`LayerSpec` nodes.  Each node names its producers, so the same
structure drives forward execution, parameter naming for checkpoints, and
static shape/cost analysis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import tensor as T
from .errors import ShapeError
from .tensor import DTYPE, Tensor4

KINDS = ("input", "conv", "bn", "prelu", "relu", "maxpool", "upsample",
         "concat", "add", "log_softmax")


@dataclass
class LayerSpec:
    """One graph node: a kind, its producers, and any parameters it owns."""

    name: str
    kind: str
    inputs: tuple[str, ...]
    out_channels: int
    conv: L.Conv2dSpec | None = None
    weight: Tensor4 | None = None
    bias: Tensor4 | None = None
    bn: L.BatchNormState | None = None
    prelu: L.PReluState | None = None
    kernel: int = 0
    stride: int = 0
    padding: int = 0
    factor: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


class ModelGraph:
    """DAG of layers with named parameters and deterministic initialization."""

    def __init__(self, in_channels: int, seed: int = 0, name: str = "model"):
        self.name = name
        self.rng = np.random.default_rng(seed)
        self.layers: list[LayerSpec] = []
        self._index: dict[str, LayerSpec] = {}
        self._append(LayerSpec(name="input", kind="input", inputs=(), out_channels=in_channels))

    # -- construction ---------------------------------------------------------

    def _append(self, spec: LayerSpec) -> str:
        if spec.name in self._index:
            raise ValueError(f"duplicate layer name {spec.name!r}")
        for producer in spec.inputs:
            if producer not in self._index:
                raise ValueError(f"layer {spec.name!r} references unknown input {producer!r}")
        self.layers.append(spec)
        self._index[spec.name] = spec
        return spec.name

    def spec(self, name: str) -> LayerSpec:
        return self._index[name]

    def channels(self, name: str) -> int:
        return self._index[name].out_channels

    @property
    def in_channels(self) -> int:
        return self.layers[0].out_channels

    @property
    def output(self) -> str:
        return self.layers[-1].name

    def add_conv(self, name: str, inp: str, out_channels: int, kernel: int,
                 dilation: int = 1, stride: int = 1, padding="same",
                 bias: bool = False) -> str:
        in_c = self.channels(inp)
        if padding == "same":
            if stride != 1:
                raise ValueError(f"layer {name!r}: same padding requires stride 1")
            spec = L.Conv2dSpec.same(in_c, out_channels, kernel, dilation, bias)
        else:
            spec = L.Conv2dSpec(in_c, out_channels, kernel, dilation, stride, int(padding), bias)
        weight = Tensor4(L.he_init_conv(spec, self.rng), requires_grad=True,
                         name=f"{name}.weight")
        bias_t = None
        if bias:
            bias_t = Tensor4(np.zeros((1, out_channels, 1, 1), DTYPE), requires_grad=True,
                             name=f"{name}.bias")
        return self._append(LayerSpec(name=name, kind="conv", inputs=(inp,),
                                      out_channels=out_channels, conv=spec,
                                      weight=weight, bias=bias_t))

    def add_bn(self, name: str, inp: str, momentum: float = 0.1, eps: float = 1e-5) -> str:
        c = self.channels(inp)
        state = L.BatchNormState.create(c, momentum=momentum, eps=eps, name=name)
        return self._append(LayerSpec(name=name, kind="bn", inputs=(inp,),
                                      out_channels=c, bn=state))

    def add_prelu(self, name: str, inp: str, init: float = 0.25) -> str:
        c = self.channels(inp)
        state = L.PReluState.create(c, init=init, name=name)
        return self._append(LayerSpec(name=name, kind="prelu", inputs=(inp,),
                                      out_channels=c, prelu=state))

    def add_relu(self, name: str, inp: str) -> str:
        return self._append(LayerSpec(name=name, kind="relu", inputs=(inp,),
                                      out_channels=self.channels(inp)))

    def add_maxpool(self, name: str, inp: str, kernel: int, stride: int | None = None,
                    padding: int = 0) -> str:
        return self._append(LayerSpec(name=name, kind="maxpool", inputs=(inp,),
                                      out_channels=self.channels(inp), kernel=kernel,
                                      stride=stride if stride is not None else kernel,
                                      padding=padding))

    def add_upsample(self, name: str, inp: str, factor: int) -> str:
        return self._append(LayerSpec(name=name, kind="upsample", inputs=(inp,),
                                      out_channels=self.channels(inp), factor=factor))

    def add_concat(self, name: str, inputs: tuple[str, ...]) -> str:
        if len(inputs) < 2:
            raise ValueError(f"layer {name!r}: concat needs at least two inputs")
        c = sum(self.channels(i) for i in inputs)
        return self._append(LayerSpec(name=name, kind="concat", inputs=tuple(inputs),
                                      out_channels=c))

    def add_add(self, name: str, inputs: tuple[str, str]) -> str:
        ca, cb = (self.channels(i) for i in inputs)
        if ca != cb:
            raise ShapeError(f"layer {name!r}: add channel axis mismatch: {ca} vs {cb}")
        return self._append(LayerSpec(name=name, kind="add", inputs=tuple(inputs),
                                      out_channels=ca))

    def add_log_softmax(self, name: str, inp: str) -> str:
        return self._append(LayerSpec(name=name, kind="log_softmax", inputs=(inp,),
                                      out_channels=self.channels(inp)))

    # -- execution ------------------------------------------------------------

    def set_mode(self, mode: str) -> None:
        for spec in self.layers:
            if spec.bn is not None:
                spec.bn.mode = mode

    def forward(self, x: Tensor4, train: bool = False) -> Tensor4:
        if x.c != self.in_channels:
            raise ShapeError(
                f"forward: channel axis mismatch: input has {x.c}, graph expects {self.in_channels}"
            )
        self.set_mode("train" if train else "eval")
        acts: dict[str, Tensor4] = {"input": x}
        for spec in self.layers[1:]:
            acts[spec.name] = self._execute(spec, [acts[i] for i in spec.inputs])
        return acts[self.output]

    def _execute(self, spec: LayerSpec, xs: list[Tensor4]) -> Tensor4:
        if spec.kind == "conv":
            return L.conv2d(xs[0], spec.conv, spec.weight, spec.bias)
        if spec.kind == "bn":
            return L.batch_norm(xs[0], spec.bn)
        if spec.kind == "prelu":
            return L.prelu(xs[0], spec.prelu)
        if spec.kind == "relu":
            return L.relu(xs[0])
        if spec.kind == "maxpool":
            return L.max_pool(xs[0], spec.kernel, spec.stride, spec.padding)
        if spec.kind == "upsample":
            return L.upsample_bilinear(xs[0], spec.factor)
        if spec.kind == "concat":
            out = xs[0]
            for other in xs[1:]:
                out = T.concat_channels(out, other)
            return out
        if spec.kind == "add":
            return T.add(xs[0], xs[1])
        if spec.kind == "log_softmax":
            return L.log_softmax_channels(xs[0])
        raise ValueError(f"cannot execute layer kind {spec.kind!r}")

    # -- parameters -------------------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor4]]:
        out: list[tuple[str, Tensor4]] = []
        for spec in self.layers:
            if spec.kind == "conv":
                out.append((f"{spec.name}.weight", spec.weight))
                if spec.bias is not None:
                    out.append((f"{spec.name}.bias", spec.bias))
            elif spec.kind == "bn":
                out.append((f"{spec.name}.gamma", spec.bn.gamma))
                out.append((f"{spec.name}.beta", spec.bn.beta))
            elif spec.kind == "prelu":
                out.append((f"{spec.name}.slope", spec.prelu.slope))
        return out

    def named_buffers(self) -> list[tuple[str, Tensor4]]:
        out: list[tuple[str, Tensor4]] = []
        for spec in self.layers:
            if spec.kind == "bn":
                out.append((f"{spec.name}.running_mean", spec.bn.running_mean))
                out.append((f"{spec.name}.running_var", spec.bn.running_var))
        return out

    def state_tensors(self) -> list[tuple[str, Tensor4]]:
        """Parameters followed by buffers, in graph order (checkpoint order)."""
        return self.named_parameters() + self.named_buffers()

    def num_parameters(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())

    def zero_grad(self) -> None:
        for _, t in self.named_parameters():
            t.zero_grad()
