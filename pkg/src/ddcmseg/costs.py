"""Static per-layer parameter and multiply-accumulate accounting.

Counting walks the graph's layer specs with closed-form shape propagation;
no forward pass is executed.  Conventions:

* conv params  = out_c * in_c * k^2 (+ out_c if biased)
* BN params    = 2c trainable; the 2c running statistics are reported
  separately as non-trainable
* PReLU params = c
* conv MACs    = out_c * in_c * k^2 * out_h * out_w; dilation does not change
  the tap count even though the effective kernel grows
* pooling, upsampling, concat, add and softmax count zero params and MACs

Both MAC totals and FLOPs (2 * MACs) are always reported since published
cost figures use either convention.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

from .graph import ModelGraph


@dataclass(frozen=True)
class CostRow:
    name: str
    kind: str
    out_shape: tuple[int, int, int, int]
    params: int
    macs: int
    receptive_field: int


@dataclass(frozen=True)
class CostReport:
    input_shape: tuple[int, int, int, int]
    rows: tuple[CostRow, ...]
    total_params: int
    non_trainable_params: int
    total_macs: int

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def cost(self, convention: str = "macs") -> int:
        if convention == "macs":
            return self.total_macs
        if convention == "flops":
            return self.total_flops
        raise ValueError(f"unknown cost convention {convention!r}")

    def to_text(self) -> str:
        buf = io.StringIO()
        name_w = max(len(r.name) for r in self.rows) if self.rows else 10
        header = f"{'layer':<{name_w}}  {'kind':<11} {'output':<20} {'params':>12} {'macs':>16} {'rf':>6}"
        buf.write(header + "\n")
        buf.write("-" * len(header) + "\n")
        for r in self.rows:
            shape = "x".join(str(d) for d in r.out_shape)
            buf.write(f"{r.name:<{name_w}}  {r.kind:<11} {shape:<20} "
                      f"{r.params:>12,} {r.macs:>16,} {r.receptive_field:>6}\n")
        buf.write("-" * len(header) + "\n")
        buf.write(f"input shape          : {'x'.join(str(d) for d in self.input_shape)}\n")
        buf.write(f"trainable parameters : {self.total_params:,} "
                  f"({self.total_params / 1e6:.2f} M)\n")
        buf.write(f"non-trainable (BN)   : {self.non_trainable_params:,}\n")
        buf.write(f"total MACs           : {self.total_macs:,} ({self.total_macs / 1e9:.2f} G)\n")
        buf.write(f"total FLOPs (2*MACs) : {self.total_flops:,} ({self.total_flops / 1e9:.2f} G)\n")
        return buf.getvalue()

    def to_csv(self) -> str:
        lines = ["layer,kind,out_n,out_c,out_h,out_w,params,macs,receptive_field"]
        for r in self.rows:
            n, c, h, w = r.out_shape
            lines.append(f"{r.name},{r.kind},{n},{c},{h},{w},{r.params},{r.macs},"
                         f"{r.receptive_field}")
        lines.append(f"total,,,,,,{self.total_params},{self.total_macs},")
        return "\n".join(lines) + "\n"


def count(graph: ModelGraph, hw: tuple[int, int], batch: int = 1) -> CostReport:
    """Count parameters and MACs for one forward at the given input size."""
    h0, w0 = hw
    shapes: dict[str, tuple[int, int, int, int]] = {}
    fields: dict[str, tuple[float, float]] = {}  # name -> (rf, jump)
    rows: list[CostRow] = []
    total_params = 0
    non_trainable = 0
    total_macs = 0

    for spec in graph.layers:
        if spec.kind == "input":
            shapes[spec.name] = (batch, spec.out_channels, h0, w0)
            fields[spec.name] = (1.0, 1.0)
            continue
        in_shapes = [shapes[i] for i in spec.inputs]
        n, _, h, w = in_shapes[0]
        rf, jump = fields[spec.inputs[0]]
        params = 0
        macs = 0

        if spec.kind == "conv":
            cs = spec.conv
            oh, ow = cs.output_hw(h, w)
            out_shape = (n, cs.out_channels, oh, ow)
            params = cs.out_channels * cs.in_channels * cs.kernel * cs.kernel
            if cs.bias:
                params += cs.out_channels
            macs = n * cs.out_channels * cs.in_channels * cs.kernel * cs.kernel * oh * ow
            rf = rf + (cs.effective_kernel - 1) * jump
            jump = jump * cs.stride
        elif spec.kind == "bn":
            out_shape = in_shapes[0]
            params = 2 * spec.out_channels
            non_trainable += 2 * spec.out_channels
        elif spec.kind == "prelu":
            out_shape = in_shapes[0]
            params = spec.out_channels
        elif spec.kind == "relu" or spec.kind == "log_softmax":
            out_shape = in_shapes[0]
        elif spec.kind == "maxpool":
            oh = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            ow = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            out_shape = (n, spec.out_channels, oh, ow)
            rf = rf + (spec.kernel - 1) * jump
            jump = jump * spec.stride
        elif spec.kind == "upsample":
            out_shape = (n, spec.out_channels, h * spec.factor, w * spec.factor)
            jump = jump / spec.factor
        elif spec.kind == "concat":
            out_shape = (n, spec.out_channels, h, w)
            rf = max(fields[i][0] for i in spec.inputs)
            jump = max(fields[i][1] for i in spec.inputs)
        elif spec.kind == "add":
            out_shape = in_shapes[0]
            rf = max(fields[i][0] for i in spec.inputs)
            jump = max(fields[i][1] for i in spec.inputs)
        else:
            raise ValueError(f"cannot count layer kind {spec.kind!r}")

        shapes[spec.name] = out_shape
        fields[spec.name] = (rf, jump)
        rows.append(CostRow(spec.name, spec.kind, out_shape, params, macs, int(round(rf))))
        total_params += params
        total_macs += macs

    return CostReport(
        input_shape=(batch, graph.in_channels, h0, w0),
        rows=tuple(rows),
        total_params=total_params,
        non_trainable_params=non_trainable,
        total_macs=total_macs,
    )
