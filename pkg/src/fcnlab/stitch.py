"""Shift-and-stitch dense output and its filter-rarefaction equivalent.

Both constructions read the input padded with f - 1 zero rows/columns at the
bottom and right, so every dense cell j has a full window starting at input
position j.  Dense cell j is the prediction for the pixel at the center of
that window, ``j + (rf - 1) // 2``.
"""

from dataclasses import replace

import numpy as np

from .geometry import GeometryError, rarefy_filter
from .net import Net, NetSpec, TopologyError
from .ops import convolutionalize_fc
from .zoo import convolutionalize


def _check_chain(net):
    spec = net.spec
    if not spec.is_chain():
        raise TopologyError("shift-and-stitch needs a linear chain of conv/pool/elementwise layers")
    for n in spec.nodes:
        if n.kind in ("deconv", "crop", "sum"):
            raise TopologyError(f"node {n.name}: {n.kind} layers are unsupported here")
        if n.p:
            raise GeometryError(f"node {n.name}: padded layers are unsupported (p={n.p})")


def _stride(net):
    s = net.spec.total_stride()
    if s.denominator != 1:
        raise GeometryError(f"fractional total stride {s}")
    return int(s)


def _as_conv(net):
    """fc layers only accept their native extent; shifted runs need them convolutionalized."""
    return convolutionalize(net) if any(n.kind == "fc" for n in net.spec.nodes) else net


def _run(net, x):
    y = net.forward(x)
    net._tape = None
    return y


def shift_and_stitch_reference(net, x, f):
    """Dense output from f*f shifted forward passes interlaced onto a stride-1 grid."""
    _check_chain(net)
    stride = _stride(net)
    if stride != f:
        raise GeometryError(f"net stride {stride} != shift-and-stitch factor {f}")
    x = np.asarray(x, dtype=net.dtype)
    net = _as_conv(net)
    runs = {}
    for dy in range(f):
        for dx in range(f):
            xs = np.pad(x, ((0, 0), (0, 0), (dy, f - 1), (dx, f - 1)))
            runs[dy, dx] = _run(net, xs)
    # run shifted by d fills dense index j = f*m - d for m < n_d; the first
    # gap in that residue class is f*n_d - d
    lh = min(f * runs[d, 0].shape[2] - d for d in range(f))
    lw = min(f * runs[0, d].shape[3] - d for d in range(f))
    ref = runs[0, 0]
    out = np.empty(ref.shape[:2] + (lh, lw), dtype=ref.dtype)
    for (dy, dx), y in runs.items():
        # first dense index with shift d is (-d) mod f, reached at m = ceil(d / f)
        jy0, jx0 = (-dy) % f, (-dx) % f
        my0, mx0 = (jy0 + dy) // f, (jx0 + dx) // f
        ny, nx = len(range(jy0, lh, f)), len(range(jx0, lw, f))
        out[:, :, jy0::f, jx0::f] = y[:, :, my0:my0 + ny, mx0:mx0 + nx]
    return out


def equivalent_dense_net(net):
    """Stride-1 net with rarefied filters reproducing shift-and-stitch output."""
    _check_chain(net)
    nodes, params = [], {}
    acc = 1
    for n in net.spec.nodes:
        w = net.params.get(n.name + ".w")
        b = net.params.get(n.name + ".b")
        if n.kind == "fc":
            w = convolutionalize_fc(w, n.in_ch, n.k, n.k)
            n = replace(n, kind="conv", s=1, p=0)
        if n.kind == "conv":
            nodes.append(replace(n, k=(n.k - 1) * acc + 1, s=1, inputs=list(n.inputs)))
            params[n.name + ".w"] = rarefy_filter(w, acc)
            params[n.name + ".b"] = b.copy()
            acc *= n.s
        elif n.kind == "pool":
            nodes.append(replace(n, s=1, dilation=n.dilation * acc, inputs=list(n.inputs)))
            acc *= n.s
        else:
            nodes.append(replace(n, inputs=list(n.inputs)))
    return Net(NetSpec(nodes), params, dtype=net.dtype)


def dense_forward(dense_net, x, f):
    """Forward of a rarefied net on input padded the same way as shift-and-stitch."""
    x = np.pad(np.asarray(x, dtype=dense_net.dtype), ((0, 0), (0, 0), (0, f - 1), (0, f - 1)))
    return _run(dense_net, x)


def center_offset(net):
    """Input pixel offset of dense cell 0's receptive-field center (rounded toward top-left)."""
    return (net.spec.summaries()[net.outputs[0]].rf - 1) // 2


def stitch_check(net, x, f=None):
    """Max abs difference between shift-and-stitch and the rarefied dense net."""
    f = _stride(net) if f is None else f
    ref = shift_and_stitch_reference(net, x, f)
    dense = dense_forward(equivalent_dense_net(net), x, f)
    if ref.shape != dense.shape:
        raise GeometryError(f"dense shapes disagree: {ref.shape} vs {dense.shape}")
    return float(np.max(np.abs(ref - dense))) if ref.size else 0.0
