"""Net descriptions and a small DAG executor with reverse-mode gradients.

Text format, one node per line (``#`` starts a comment)::

    name kind k s p in_ch out_ch init learnable inputs...

``kind`` is one of input, conv, pool, relu, deconv, fc, crop, sum, dropout,
identity.  Unused numeric columns take ``-``.  For deconv the ``s`` column is
the upsampling factor.  A dilated pool writes its kernel as ``k@d``.  A crop
node takes ``src ref`` and crops ``src`` onto ``ref`` with offsets from the
stride algebra.  ``init`` is ``-``, ``he``, ``gauss:<std>``, ``zero``,
``bilinear`` or ``identity``; for dropout it is the keep probability.
"""

from dataclasses import dataclass, field, replace
import zlib

import numpy as np

from . import ops
from .geometry import GeometryError, GeomSummary, LayerGeom, compose, crop_offset
from .tensor import crop

NODE_KINDS = ("input", "conv", "pool", "relu", "deconv", "fc", "crop", "sum", "dropout", "identity")
PARAM_KINDS = ("conv", "deconv", "fc")


class NetError(ValueError):
    pass


class TopologyError(NetError):
    pass


@dataclass
class NodeSpec:
    name: str
    kind: str
    k: int = 1
    s: int = 1
    p: int = 0
    in_ch: int = 0
    out_ch: int = 0
    init: str = "-"
    learnable: bool = True
    inputs: list = field(default_factory=list)
    dilation: int = 1

    @property
    def geom(self):
        """LayerGeom of this node, or None for fusion/input nodes."""
        if self.kind in ("conv", "fc"):
            return LayerGeom("conv", self.k, self.s, self.p)
        if self.kind == "pool":
            return LayerGeom("pool", self.k, self.s, self.p, dilation=self.dilation)
        if self.kind == "deconv":
            return LayerGeom("deconv", self.k, 1, self.p, f=self.s)
        if self.kind in ("relu", "dropout", "identity"):
            return LayerGeom("elementwise")
        return None

    def param_shapes(self):
        if self.kind == "conv":
            return {"w": (self.out_ch, self.in_ch, self.k, self.k), "b": (self.out_ch,)}
        if self.kind == "fc":
            return {"w": (self.out_ch, self.in_ch * self.k * self.k), "b": (self.out_ch,)}
        if self.kind == "deconv":
            return {"w": (self.in_ch, self.out_ch, self.k, self.k)}
        return {}

    def to_line(self):
        def num(v, used=True):
            return str(v) if used else "-"

        has_geom = self.kind in ("conv", "pool", "deconv", "fc")
        k = f"{self.k}@{self.dilation}" if self.dilation != 1 else str(self.k)
        cols = [
            self.name, self.kind,
            k if has_geom else "-",
            num(self.s, has_geom and self.kind != "fc"),
            num(self.p, has_geom and self.kind != "fc"),
            num(self.in_ch, self.kind != "input" or self.in_ch),
            num(self.out_ch, True),
            self.init,
            "1" if self.learnable else "0",
        ] + list(self.inputs)
        return " ".join(cols)


@dataclass
class NetSpec:
    nodes: list

    def __post_init__(self):
        self.validate()

    def __getitem__(self, name):
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def __contains__(self, name):
        return any(n.name == name for n in self.nodes)

    @property
    def names(self):
        return [n.name for n in self.nodes]

    @property
    def input_node(self):
        return next(n for n in self.nodes if n.kind == "input")

    @property
    def outputs(self):
        consumed = {i for n in self.nodes for i in n.inputs}
        return [n.name for n in self.nodes if n.name not in consumed and n.kind != "input"]

    @property
    def n_classes(self):
        return self[self.outputs[0]].out_ch

    def validate(self):
        seen = set()
        n_inputs = 0
        for n in self.nodes:
            if n.kind not in NODE_KINDS:
                raise NetError(f"node {n.name}: unknown kind {n.kind!r}")
            if n.name in seen:
                raise NetError(f"duplicate node name {n.name!r}")
            for i in n.inputs:
                if i not in seen:
                    raise TopologyError(f"node {n.name}: input {i!r} is not an earlier node")
            want = {"input": 0, "crop": 2, "sum": 2}.get(n.kind, 1)
            if len(n.inputs) != want:
                raise TopologyError(f"node {n.name}: kind {n.kind} takes {want} inputs, got {len(n.inputs)}")
            n_inputs += n.kind == "input"
            seen.add(n.name)
        if n_inputs != 1:
            raise TopologyError(f"net needs exactly one input node, found {n_inputs}")
        if not self.outputs:
            raise TopologyError("net has no output node")

    def is_chain(self):
        prev = None
        for n in self.nodes:
            if n.kind in ("crop", "sum"):
                return False
            if n.kind != "input" and n.inputs != [prev]:
                return False
            prev = n.name
        return True

    def summaries(self):
        """GeomSummary of every node relative to the input image."""
        out = {}
        for n in self.nodes:
            if n.kind == "input":
                out[n.name] = GeomSummary.identity()
            elif n.kind == "crop":
                src, ref = out[n.inputs[0]], out[n.inputs[1]]
                if src.stride != ref.stride:
                    raise GeometryError(
                        f"node {n.name}: stride mismatch {src.stride} vs {ref.stride}")
                out[n.name] = replace(ref, kernel=src.kernel)
            elif n.kind == "sum":
                a, b = out[n.inputs[0]], out[n.inputs[1]]
                if a.stride != b.stride:
                    raise GeometryError(
                        f"node {n.name}: fusion branches have strides {a.stride} and {b.stride}")
                out[n.name] = replace(a, kernel=max(a.kernel, b.kernel))
            else:
                out[n.name] = compose(n.geom, out[n.inputs[0]])
        return out

    def total_stride(self, node=None):
        return self.summaries()[node or self.outputs[0]].stride

    def to_text(self):
        return "\n".join(n.to_line() for n in self.nodes) + "\n"

    def copy(self):
        return NetSpec([replace(n, inputs=list(n.inputs)) for n in self.nodes])


def _int(tok, default):
    return default if tok == "-" else int(tok)


def parse_net(text, source="<net>"):
    nodes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) < 9:
            raise NetError(f"{source}:{lineno}: expected at least 9 columns, got {len(tok)}")
        try:
            name, kind = tok[0], tok[1]
            k, d = tok[2], 1
            if "@" in k:
                k, d = k.split("@")
                d = int(d)
            node = NodeSpec(
                name=name, kind=kind, k=_int(k, 1), s=_int(tok[3], 1), p=_int(tok[4], 0),
                in_ch=_int(tok[5], 0), out_ch=_int(tok[6], 0), init=tok[7],
                learnable=tok[8] not in ("0", "false", "no"), inputs=tok[9:], dilation=d,
            )
        except ValueError as e:
            raise NetError(f"{source}:{lineno}: {e}") from None
        nodes.append(node)
    try:
        return NetSpec(nodes)
    except NetError as e:
        raise type(e)(f"{source}: {e}") from None


def load_net(path):
    with open(path) as f:
        return parse_net(f.read(), source=str(path))


# ---------------------------------------------------------------------------
# execution

def _node_rng(seed, name):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


def init_params(spec, seed=0, dtype=np.float32):
    params = {}
    for n in spec.nodes:
        shapes = n.param_shapes()
        if not shapes:
            continue
        w_shape = shapes["w"]
        policy = n.init
        if policy in ("he", "gauss") or policy.startswith("gauss:"):
            fan_in = n.in_ch * n.k * n.k
            std = float(policy.split(":")[1]) if ":" in policy else np.sqrt(2.0 / fan_in)
            w = _node_rng(seed, n.name).standard_normal(w_shape) * std
        elif policy in ("zero", "-"):
            w = np.zeros(w_shape)
        elif policy == "bilinear":
            if n.kind != "deconv" or n.in_ch != n.out_ch:
                raise NetError(f"node {n.name}: bilinear init needs a square deconv")
            if n.k != ops.default_deconv_kernel(n.s):
                raise NetError(f"node {n.name}: bilinear init needs k = {ops.default_deconv_kernel(n.s)}")
            w = ops.bilinear_kernel(n.s, n.in_ch, dtype=np.float64)
        elif policy == "identity":
            w = np.zeros(w_shape)
            c = (n.k - 1) // 2
            for i in range(min(n.in_ch, n.out_ch)):
                w[i, i, c, c] = 1.0
        else:
            raise NetError(f"node {n.name}: unknown init policy {policy!r}")
        params[f"{n.name}.w"] = w.astype(dtype)
        if "b" in shapes:
            params[f"{n.name}.b"] = np.zeros(shapes["b"], dtype=dtype)
    return params


class Net:
    """An instantiated NetSpec: parameters plus forward/backward over the DAG."""

    def __init__(self, spec, params=None, seed=0, dtype=np.float32):
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.params = init_params(spec, seed, self.dtype)
        if params is not None:
            self.load_state(params)
        self.learnable = {
            f"{n.name}.{p}": n.learnable for n in spec.nodes for p in n.param_shapes()
        }
        self.summaries = spec.summaries()
        self.crop_offsets = {}
        for n in spec.nodes:
            if n.kind == "crop":
                off = crop_offset(self.summaries[n.inputs[0]], self.summaries[n.inputs[1]])
                if off < 0:
                    raise GeometryError(f"node {n.name}: reference starts before source (offset {off})")
                self.crop_offsets[n.name] = off
        self._tape = None

    @property
    def outputs(self):
        return self.spec.outputs

    def state(self):
        return dict(sorted(self.params.items()))

    def load_state(self, named, strict=True):
        for key, t in named.items():
            if key not in self.params:
                if strict:
                    raise NetError(f"checkpoint entry {key!r} has no matching parameter")
                continue
            want = self.params[key].shape
            t = np.asarray(t)
            if t.size != int(np.prod(want)):
                raise NetError(f"parameter {key}: checkpoint has {t.shape}, net expects {want}")
            self.params[key] = t.reshape(want).astype(self.dtype)

    def astype(self, dtype):
        return Net(self.spec, self.params, dtype=dtype)

    def n_params(self, names=None):
        return sum(v.size for k, v in self.params.items() if names is None or k.split(".")[0] in names)

    # -- forward -----------------------------------------------------------

    def forward(self, x, train=False, rng=None, keep=None):
        """Run the net; returns the output array, or a dict when there are several outputs.

        `keep` names extra nodes whose activations are returned alongside.
        """
        x = np.asarray(x, dtype=self.dtype)
        acts, tape = {}, []
        for n in self.spec.nodes:
            try:
                y, cache = self._forward_node(n, [acts[i] for i in n.inputs] or [x], train, rng)
            except (ValueError, IndexError) as e:
                raise NetError(f"node {n.name}: {e}") from None
            acts[n.name] = y
            tape.append((n, cache))
        self._tape = tape
        self._shapes = {k: v.shape for k, v in acts.items()}
        outs = {name: acts[name] for name in self.outputs}
        if keep:
            return outs | {name: acts[name] for name in keep}
        return outs[self.outputs[0]] if len(outs) == 1 else outs

    def _forward_node(self, n, xs, train, rng):
        P = self.params
        x = xs[0]
        if n.kind == "input":
            if x.ndim != 4 or x.shape[1] != n.out_ch:
                raise ValueError(f"expected (N, {n.out_ch}, H, W) input, got {x.shape}")
            return x, None
        if n.kind == "conv":
            return ops.conv2d(x, P[n.name + ".w"], P[n.name + ".b"], n.s, n.p), x
        if n.kind == "fc":
            if x.shape[2:] != (n.k, n.k):
                raise ValueError(f"fc expects {n.k}x{n.k} spatial input, got {x.shape[2]}x{x.shape[3]}")
            return ops.fc(x, P[n.name + ".w"], P[n.name + ".b"]), x
        if n.kind == "pool":
            y, arg = ops.pool2d_max(x, n.k, n.s, n.p, n.dilation)
            return y, (arg, x.shape)
        if n.kind == "relu":
            return ops.relu(x), x
        if n.kind == "deconv":
            return ops.deconv2d(x, P[n.name + ".w"], n.s, n.p), x
        if n.kind == "crop":
            ref = xs[1]
            off = self.crop_offsets[n.name]
            return crop(x, off, off, ref.shape[2], ref.shape[3]), (x.shape, off)
        if n.kind == "sum":
            return ops.fuse_sum(xs[0], xs[1]), None
        if n.kind == "dropout":
            if not train:
                return x, None
            keep = float(n.init)
            if rng is None:
                raise ValueError("dropout in training mode needs an rng")
            mask = (rng.random(x.shape) < keep).astype(x.dtype) / keep
            return x * mask, mask
        if n.kind == "identity":
            return x, None
        raise ValueError(f"unhandled kind {n.kind}")

    # -- backward ----------------------------------------------------------

    def backward(self, dy):
        """Backpropagate output gradient(s); returns (param grads, input grad).

        Consumes the tape of the preceding forward; calling twice is an error.
        """
        if self._tape is None:
            raise NetError("backward without a preceding forward")
        tape, self._tape = self._tape, None
        if not isinstance(dy, dict):
            dy = {self.outputs[0]: dy}
        grads = {}
        for name, g in dy.items():
            if name not in self._shapes:
                raise NetError(f"gradient given for unknown node {name!r}")
            if g.shape != self._shapes[name]:
                raise NetError(f"node {name}: gradient shape {g.shape} != output shape {self._shapes[name]}")
            grads[name] = np.asarray(g, dtype=self.dtype)
        pgrads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dx = None
        for n, cache in reversed(tape):
            g = grads.pop(n.name, None)
            if g is None:
                continue
            if n.kind == "input":
                dx = g
                continue
            for src, gi in zip(n.inputs, self._backward_node(n, g, cache, pgrads)):
                if gi is None:
                    continue
                grads[src] = grads[src] + gi if src in grads else gi
        return pgrads, dx

    def _backward_node(self, n, g, cache, pgrads):
        P = self.params
        if n.kind == "conv":
            dx, dw, db = ops.conv2d_backward(g, cache, P[n.name + ".w"], n.s, n.p)
            pgrads[n.name + ".w"] += dw
            pgrads[n.name + ".b"] += db
            return [dx]
        if n.kind == "fc":
            dx, dw, db = ops.fc_backward(g, cache, P[n.name + ".w"])
            pgrads[n.name + ".w"] += dw
            pgrads[n.name + ".b"] += db
            return [dx]
        if n.kind == "pool":
            arg, shape = cache
            return [ops.pool2d_max_backward(g, arg, shape, n.k, n.s, n.p, n.dilation)]
        if n.kind == "relu":
            return [ops.relu_backward(g, cache)]
        if n.kind == "deconv":
            dx, dw = ops.deconv2d_backward(g, cache, P[n.name + ".w"], n.s, n.p,
                                           need_dw=n.learnable)
            if dw is not None:
                pgrads[n.name + ".w"] += dw
            return [dx]
        if n.kind == "crop":
            shape, off = cache
            dx = np.zeros(shape, dtype=g.dtype)
            dx[:, :, off:off + g.shape[2], off:off + g.shape[3]] = g
            return [dx, None]
        if n.kind == "sum":
            return [g, g]
        if n.kind == "dropout":
            return [g if cache is None else g * cache]
        return [g]
