"""Toy classifier, its fully convolutional conversions, and a synthetic dataset.

Naming follows the stride of the final prediction: ``fcn-coarse`` predicts at
stride 8, ``fcn-skip1`` fuses pool2 (stride 4), ``fcn-skip2`` also fuses
pool1 (stride 2).
"""

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import ops
from .geometry import GeometryError
from .net import Net, NetError, NetSpec, NodeSpec
from .training import make_rng

WIDTHS = (16, 32, 48)
HIDDEN = 64
NATIVE_PATCH = 30  # input extent giving a 1x1 classifier output
FCN_PAD = 15  # zero padding on conv1 of converted nets so the output covers the image

PALETTE = np.array([
    [0.45, 0.45, 0.45],
    [0.90, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.20, 0.30, 0.90],
    [0.95, 0.85, 0.15],
    [0.80, 0.25, 0.85],
    [0.15, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.30, 0.10],
    [0.95, 0.95, 0.95],
    [0.05, 0.05, 0.05],
    [0.55, 0.85, 0.55],
    [0.95, 0.60, 0.70],
    [0.35, 0.10, 0.45],
    [0.10, 0.35, 0.35],
    [0.65, 0.65, 0.20],
])

GEO_CLASSES = ("background", "box", "disc", "bar")


def _node(name, kind, inputs, k=1, s=1, p=0, in_ch=0, out_ch=0, init="-", learnable=True):
    return NodeSpec(name, kind, k, s, p, in_ch, out_ch, init, learnable, list(inputs))


def build_toy_classifier(K, widths=WIDTHS, hidden=HIDDEN):
    """Padding-free conv/pool chain with three stride-2 pools and an fc head.

    On a 30x30 patch it produces K logits at 1x1.
    """
    if K < 2:
        raise ValueError("need at least two classes")
    c1, c2, c3 = widths
    nodes = [_node("data", "input", [], out_ch=3, learnable=False)]
    prev, cin = "data", 3
    for i, c in enumerate((c1, c2, c3), start=1):
        nodes += [
            _node(f"conv{i}", "conv", [prev], 3, 1, 0, cin, c, "he"),
            _node(f"relu{i}", "relu", [f"conv{i}"], in_ch=c, out_ch=c),
            _node(f"pool{i}", "pool", [f"relu{i}"], 2, 2, 0, c, c, learnable=False),
        ]
        prev, cin = f"pool{i}", c
    nodes += [
        _node("fc6", "fc", [prev], 2, in_ch=c3, out_ch=hidden, init="he"),
        _node("relu6", "relu", ["fc6"], in_ch=hidden, out_ch=hidden),
        _node("fc7", "fc", ["relu6"], 1, in_ch=hidden, out_ch=hidden, init="he"),
        _node("relu7", "relu", ["fc7"], in_ch=hidden, out_ch=hidden),
        _node("fc8", "fc", ["relu7"], 1, in_ch=hidden, out_ch=K, init="he"),
    ]
    return NetSpec(nodes)


def convolutionalize(net):
    """Replace every fc node by the equivalent convolution, reusing its weights."""
    nodes, params = [], dict(net.params)
    for n in net.spec.nodes:
        if n.kind == "fc":
            params[n.name + ".w"] = ops.convolutionalize_fc(params[n.name + ".w"], n.in_ch, n.k, n.k)
            n = replace(n, kind="conv", s=1, p=0)
        nodes.append(replace(n, inputs=list(n.inputs)))
    return Net(NetSpec(nodes), params, dtype=net.dtype)


def _upsample(name, src, K, f, init="bilinear", learnable=False):
    return _node(name, "deconv", [src], ops.default_deconv_kernel(f), f, 0, K, K, init, learnable)


def convert_to_fcn(net, K, pad=FCN_PAD):
    """Decapitate the classifier, convolutionalize it, and add a scoring head.

    Appends a zero-initialized 1x1 score conv and a fixed bilinear x8
    upsampling cropped back onto the input.
    """
    spec = net.spec
    if "fc8" not in spec or "conv1" not in spec or not spec.is_chain():
        raise NetError("convert_to_fcn expects the toy classifier chain")
    conv = convolutionalize(net)
    keep = spec.names[: spec.names.index("fc8")]
    nodes = [replace(n, inputs=list(n.inputs)) for n in conv.spec.nodes if n.name in keep]
    nodes[1] = replace(nodes[1], p=pad)
    hidden = spec["fc7"].out_ch
    stride = int(conv.spec.total_stride("relu7"))
    nodes += [
        _node("score", "conv", ["relu7"], 1, 1, 0, hidden, K, "zero"),
        _upsample("upscore", "score", K, stride),
        _node("out", "crop", ["upscore", "data"], in_ch=K, out_ch=K),
    ]
    params = {k: v for k, v in conv.params.items() if k.split(".")[0] in keep}
    return Net(NetSpec(nodes), params, dtype=net.dtype)


def _pred_node(spec):
    """(final upsampling node, the prediction it upsamples) of a single-output FCN."""
    out = spec[spec.outputs[0]]
    up = spec[out.inputs[0]]
    if out.kind != "crop" or up.kind != "deconv":
        raise NetError("expected a net ending in upsample + crop")
    return up, up.inputs[0]


def attach_skip(net, from_pool, factor=2):
    """Fuse class predictions from `from_pool` into the current prediction.

    `from_pool` must sit at 1/factor of the prediction stride.  The new 1x1
    score conv is zero-initialized, so the fusion node starts out equal to the
    upsampled old prediction.
    """
    spec = net.spec
    K = spec.n_classes
    summ = spec.summaries()
    up, pred = _pred_node(spec)
    stride = summ[pred].stride
    if from_pool not in spec:
        raise NetError(f"no node named {from_pool!r}")
    if summ[from_pool].stride * factor != stride:
        raise GeometryError(
            f"{from_pool} has stride {summ[from_pool].stride}, need prediction stride {stride} / {factor}")
    rest = stride / factor
    if rest.denominator != 1:
        raise GeometryError(f"cannot split prediction stride {stride} by {factor}")
    tag = from_pool
    nodes = [replace(n, inputs=list(n.inputs)) for n in spec.nodes if n.name not in (up.name, spec.outputs[0])]
    nodes += [
        _upsample(f"up_{pred}", pred, K, factor, learnable=True),
        _node(f"score_{tag}", "conv", [from_pool], 1, 1, 0, spec[from_pool].out_ch, K, "zero"),
        _node(f"score_{tag}c", "crop", [f"score_{tag}", f"up_{pred}"], in_ch=K, out_ch=K),
        _node(f"fuse_{tag}", "sum", [f"up_{pred}", f"score_{tag}c"], in_ch=K, out_ch=K),
        _upsample("upscore", f"fuse_{tag}", K, int(rest)),
        _node("out", "crop", ["upscore", "data"], in_ch=K, out_ch=K),
    ]
    new = NetSpec(nodes)
    params = {k: v for k, v in net.params.items() if k.split(".")[0] != up.name}
    return Net(new, params, dtype=net.dtype)


def add_head(net, name, n_classes, source="relu7"):
    """Second scoring head (zero-init 1x1 conv + fixed upsampling) on a shared trunk."""
    spec = net.spec
    summ = spec.summaries()
    stride = int(summ[source].stride)
    nodes = [replace(n, inputs=list(n.inputs)) for n in spec.nodes]
    nodes += [
        _node(f"score_{name}", "conv", [source], 1, 1, 0, spec[source].out_ch, n_classes, "zero"),
        _upsample(f"upscore_{name}", f"score_{name}", n_classes, stride),
        _node(f"out_{name}", "crop", [f"upscore_{name}", "data"], in_ch=n_classes, out_ch=n_classes),
    ]
    return Net(NetSpec(nodes), dict(net.params), dtype=net.dtype)


def build_family(K, seed=0, widths=WIDTHS, hidden=HIDDEN):
    """Dict of the four zoo nets sharing one trunk initialization."""
    cls = Net(build_toy_classifier(K, widths, hidden), seed=seed)
    coarse = convert_to_fcn(cls, K)
    skip1 = attach_skip(coarse, "pool2")
    skip2 = attach_skip(skip1, "pool1")
    return {"toy-classifier": cls, "fcn-coarse": coarse, "fcn-skip1": skip1, "fcn-skip2": skip2}


ZOO_NOTES = {
    "toy-classifier": "patch classifier: 30x30 input -> K logits",
    "fcn-coarse": "convolutionalized classifier, stride-8 prediction (32s analogue)",
    "fcn-skip1": "coarse + pool2 skip, stride-4 prediction (16s analogue)",
    "fcn-skip2": "skip1 + pool1 skip, stride-2 prediction (8s analogue)",
}


def write_zoo(directory, K=5):
    """Write the four zoo nets as text descriptions into `directory`."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, net in build_family(K).items():
        p = out / f"{name}.net"
        p.write_text(f"# {name}: {ZOO_NOTES[name]}, K={K}\n"
                     "# name kind k s p in_ch out_ch init learnable inputs...\n" + net.spec.to_text())
        paths.append(p)
    return paths


# ---------------------------------------------------------------------------
# synthetic data

@dataclass
class SynthSample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    labels: np.ndarray  # (H, W) uint8 semantic classes
    geo: np.ndarray  # (H, W) uint8 shape kinds, see GEO_CLASSES
    seed: int


def _draw_sample(rng, H, W, K):
    yy, xx = np.mgrid[0:H, 0:W]
    labels = np.zeros((H, W), dtype=np.uint8)
    geo = np.zeros((H, W), dtype=np.uint8)
    n_shapes = int(rng.integers(1, min(4, K - 1) + 1))
    classes = rng.choice(np.arange(1, K), size=n_shapes, replace=False)
    budget = 0.28 * H * W / n_shapes
    for c in classes:
        kind = rng.choice(3, p=[0.4, 0.4, 0.2])
        if kind == 0:  # box
            area = budget * rng.uniform(0.8, 1.5)
            aspect = rng.uniform(0.5, 2.0)
            h = int(np.clip(round(np.sqrt(area * aspect)), 4, H - 2))
            w = int(np.clip(round(area / h), 4, W - 2))
            y0, x0 = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
            region = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
        elif kind == 1:  # disc
            r = max(3.0, np.sqrt(budget * rng.uniform(0.8, 1.5) / np.pi))
            r = min(r, min(H, W) / 2 - 1)
            cy, cx = rng.uniform(r, H - r), rng.uniform(r, W - r)
            region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:  # thin bar, two pixels wide
            if rng.random() < 0.5:
                y0 = rng.integers(0, H - 2)
                x0 = rng.integers(0, W // 3)
                region = (yy >= y0) & (yy < y0 + 2) & (xx >= x0) & (xx < x0 + int(rng.integers(W // 2, W - x0 + 1)))
            else:
                x0 = rng.integers(0, W - 2)
                y0 = rng.integers(0, H // 3)
                region = (xx >= x0) & (xx < x0 + 2) & (yy >= y0) & (yy < y0 + int(rng.integers(H // 2, H - y0 + 1)))
        labels[region] = c
        geo[region] = kind + 1
    base = PALETTE[labels].transpose(2, 0, 1)
    # textured background: a random sinusoidal grating
    fy, fx = rng.uniform(0.05, 0.25, size=2)
    phase = rng.uniform(0, 2 * np.pi)
    texture = 0.12 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    base = base + np.where(labels == 0, texture, 0.0)[None]
    image = np.clip(base + rng.normal(0, 0.1, size=base.shape), 0, 1).astype(np.float32)
    return image, labels, geo


def gen_synth_dataset(n, H, W, K, seed, start=0):
    """n images of 1-4 boxes, discs and thin bars of distinct classes over a textured background.

    Sample i is drawn from its own stream keyed by (seed, i), for i counting
    from `start`, so disjoint index ranges give disjoint splits.
    """
    if K < 2:
        raise ValueError("need at least two classes")
    if K > len(PALETTE):
        raise ValueError(f"K={K} exceeds the palette size {len(PALETTE)}")
    if H < 32 or W < 32:
        raise ValueError("images must be at least 32x32")
    out = []
    for i in range(start, start + n):
        rng = make_rng(np.random.SeedSequence([seed, i]))
        image, labels, geo = _draw_sample(rng, H, W, K)
        out.append(SynthSample(image, labels, geo, seed))
    return out
