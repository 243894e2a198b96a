"""Receptive-field and stride algebra for layer stacks.

A layer with kernel k and stride s applied after a stack with effective
kernel K' and stride S' yields kernel K' + (k - 1) * S' and stride s * S'.
Upsampling layers enter with a fractional stride 1/f, so strides and kernels
are kept as exact rationals.

Each summary also tracks `center`: the input coordinate of the center of
output cell 0.  Cell j is centered at ``center + stride * j``.  This is what
crop alignment between fused branches is computed from.
"""

from dataclasses import dataclass, field
from fractions import Fraction
import math

import numpy as np

KINDS = ("conv", "pool", "deconv", "elementwise")


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class LayerGeom:
    kind: str
    k: int = 1
    s: int = 1
    p: int = 0
    f: int = 1
    dilation: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeometryError(f"unknown layer kind {self.kind!r}")
        if self.k < 1 or self.s < 1 or self.f < 1 or self.dilation < 1 or self.p < 0:
            raise GeometryError(f"invalid geometry {self}")
        if self.kind == "elementwise" and (self.k, self.s, self.p) != (1, 1, 0):
            raise GeometryError("elementwise layers have k = s = 1, p = 0")
        if self.kind == "deconv" and self.s != 1:
            raise GeometryError("deconv layers express upsampling through f, not s")

    @property
    def span(self):
        """Extent of the (possibly dilated) window in input cells."""
        return (self.k - 1) * self.dilation + 1

    def out_extent(self, n):
        if self.kind == "deconv":
            return (n - 1) * self.f + self.k - 2 * self.p
        return (n + 2 * self.p - self.span) // self.s + 1

    def formula(self):
        if self.kind == "elementwise":
            return "n"
        if self.kind == "deconv":
            return f"(n-1)*{self.f}+{self.k - 2 * self.p}"
        core = f"n{2 * self.p - self.span:+d}" if 2 * self.p != self.span else "n"
        return f"({core})//{self.s}+1" if self.s != 1 else f"{core}+1"

    def summary(self):
        return GeomSummary.of(self)


@dataclass(frozen=True)
class GeomSummary:
    kernel: Fraction = Fraction(1)
    stride: Fraction = Fraction(1)
    center: Fraction = Fraction(0)
    layers: tuple = field(default=(), compare=False)

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def of(cls, g):
        if g.kind == "deconv":
            # output y draws on input i through tap y + p - i*f
            return cls(Fraction(g.k, g.f), Fraction(1, g.f),
                       Fraction(2 * g.p - (g.k - 1), 2 * g.f), (g,))
        return cls(Fraction(g.span), Fraction(g.s),
                   Fraction(g.span - 1, 2) - g.p, (g,))

    @property
    def rf(self):
        """Receptive field size of one output cell, in input cells."""
        return math.ceil(self.kernel)

    @property
    def padding(self):
        """Total left/top zero padding seen by output cell 0."""
        return (self.kernel - 1) / 2 - self.center

    def out_extent(self, n):
        for g in self.layers:
            n = g.out_extent(n)
        return n

    def then(self, outer):
        return compose(outer, self)


def compose(outer, inner):
    """Summary of applying `inner` first, then `outer`."""
    if isinstance(outer, LayerGeom):
        outer = outer.summary()
    if isinstance(inner, LayerGeom):
        inner = inner.summary()
    return GeomSummary(
        kernel=inner.kernel + (outer.kernel - 1) * inner.stride,
        stride=outer.stride * inner.stride,
        center=inner.center + inner.stride * outer.center,
        layers=inner.layers + outer.layers,
    )


def summarize(layers):
    s = GeomSummary.identity()
    for g in layers:
        s = compose(g, s)
    return s


def cumulative(layers):
    out, s = [], GeomSummary.identity()
    for g in layers:
        s = compose(g, s)
        out.append(s)
    return out


def rarefy_filter(f, s):
    """Enlarge a filter by placing its taps at multiples of `s`, zeros elsewhere."""
    f = np.asarray(f)
    if s < 1:
        raise GeometryError(f"rarefaction factor must be >= 1, got {s}")
    if s == 1:
        return f.copy()
    kh, kw = f.shape[-2:]
    out = np.zeros(f.shape[:-2] + ((kh - 1) * s + 1, (kw - 1) * s + 1), dtype=f.dtype)
    out[..., ::s, ::s] = f
    return out


def crop_offset(src, ref):
    """Integer offset of `ref`'s cell 0 inside `src`, both summaries relative to one input.

    Both must share a stride.  Non-integral offsets round to the nearest cell.
    """
    if src.stride != ref.stride:
        raise GeometryError(f"stride mismatch at fusion: {src.stride} vs {ref.stride}")
    off = (ref.center - src.center) / src.stride
    return math.floor(off + Fraction(1, 2))


def fmt_frac(q):
    q = Fraction(q)
    return str(q.numerator) if q.denominator == 1 else f"{q.numerator}/{q.denominator}"


# reference stacks: (name, geometry)
ALEXNET_STACK = [
    ("conv1", LayerGeom("conv", 11, 4)),
    ("pool1", LayerGeom("pool", 3, 2)),
    ("conv2", LayerGeom("conv", 5, 1, 2)),
    ("pool2", LayerGeom("pool", 3, 2)),
    ("conv3", LayerGeom("conv", 3, 1, 1)),
    ("conv4", LayerGeom("conv", 3, 1, 1)),
    ("conv5", LayerGeom("conv", 3, 1, 1)),
    ("pool5", LayerGeom("pool", 3, 2)),
    ("fc6", LayerGeom("conv", 6, 1)),
    ("fc7", LayerGeom("conv", 1, 1)),
]


def _vgg16_stack():
    stack = []
    for block, reps in enumerate((2, 2, 3, 3, 3), start=1):
        for r in range(1, reps + 1):
            stack.append((f"conv{block}_{r}", LayerGeom("conv", 3, 1, 1)))
        stack.append((f"pool{block}", LayerGeom("pool", 2, 2)))
    stack.append(("fc6", LayerGeom("conv", 7, 1)))
    stack.append(("fc7", LayerGeom("conv", 1, 1)))
    return stack


VGG16_STACK = _vgg16_stack()
