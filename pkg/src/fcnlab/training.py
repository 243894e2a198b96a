"""Pixelwise loss, loss sampling, SGD with momentum, and the training loop."""

from dataclasses import dataclass, field, fields
import csv
import fnmatch
import logging
import math
import time

import numpy as np

from .metrics import ConfusionMatrix, METRIC_NAMES, compute_metrics
from .tensor import IGNORE

log = logging.getLogger(__name__)

BIAS_LR_MULT = 2.0


class DivergenceError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


def make_rng(seed):
    """Counter-based generator used for every random stream."""
    return np.random.Generator(np.random.Philox(seed))


# ---------------------------------------------------------------------------
# loss

@dataclass
class LossReport:
    loss: float
    loss_map: np.ndarray
    count: int


@dataclass
class SampleMask:
    p: float
    seed: object
    keep: np.ndarray


def sample_mask(p, shape, seed):
    """Keep each cell independently with probability p."""
    if not 0 < p <= 1:
        raise ValueError(f"keep probability must be in (0, 1], got {p}")
    if p == 1:
        return SampleMask(p, seed, np.ones(shape, dtype=bool))
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return SampleMask(p, seed, rng.random(shape) < p)


def _log_softmax(scores):
    z = scores - scores.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax_xent_spatial(scores, target, weights=None, mask=None, normalize="mean"):
    """Per-pixel multinomial logistic loss.

    scores: (N, K, H, W); target: (N, H, W) or (H, W) with IGNORE entries.
    Returns (LossReport, dL/dscores).  With ``normalize="mean"`` the loss is
    averaged over contributing pixels, with ``"sum"`` it is their sum.
    """
    scores = np.asarray(scores)
    target = np.asarray(target)
    if target.ndim == 2:
        target = target[None]
    n, k, h, w = scores.shape
    if target.shape != (n, h, w):
        raise ValueError(f"scores {scores.shape} and target {target.shape} disagree spatially")
    valid = target != IGNORE
    if (target[valid] >= k).any() or (target[valid] < 0).any():
        raise ValueError(f"target label out of range for {k} classes")
    if mask is not None:
        keep = mask.keep if isinstance(mask, SampleMask) else np.asarray(mask, dtype=bool)
        valid = valid & keep.reshape(valid.shape)
    t = np.where(valid, target, 0).astype(np.int64)
    logp = _log_softmax(scores.astype(np.float64))
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    wpix = np.where(valid, 1.0, 0.0)
    if weights is not None:
        wpix = wpix * np.asarray(weights, dtype=np.float64)[t]
    loss_map = -wpix * picked
    count = int(valid.sum())
    grad = np.exp(logp)
    np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1, axis=1)
    grad *= wpix[:, None]
    total = loss_map.sum()
    if normalize == "mean":
        denom = max(count, 1)
        total /= denom
        grad /= denom
    elif normalize != "sum":
        raise ValueError(f"unknown normalization {normalize!r}")
    return LossReport(float(total), loss_map, count), grad.astype(scores.dtype)


def multi_head_loss(heads, normalize="mean"):
    """Sum of weighted per-head losses; heads are (scores, target, weight) triples.

    Returns (LossReport, per-head gradients).
    """
    if not heads:
        raise ValueError("multi_head_loss needs at least one head")
    total, count, maps, grads = 0.0, 0, [], []
    for scores, target, weight in heads:
        rep, g = softmax_xent_spatial(scores, target, normalize=normalize)
        total += weight * rep.loss
        count += rep.count
        maps.append(weight * rep.loss_map)
        grads.append(weight * g)
    loss_map = maps[0] if len(maps) == 1 else sum(maps[1:], maps[0])
    return LossReport(total, loss_map, count), grads


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: dict = field(default_factory=dict)
    lr_mult: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, lr, momentum=0.9, weight_decay=0.0, lr_mult=None):
        mult = {k: (BIAS_LR_MULT if k.endswith(".b") else 1.0) for k in params}
        mult.update(lr_mult or {})
        vel = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(lr, momentum, weight_decay, vel, mult)


def sgd_step(params, grads, state, learnable=None):
    """v <- mu*v - lr_i*(g + wd*theta); theta <- theta + v.  Updates in place.

    Weight decay applies to weights (``*.w``) only.  Parameters flagged
    non-learnable, or with a zero lr multiplier, are left untouched.
    """
    for name, theta in params.items():
        if learnable is not None and not learnable.get(name, True):
            continue
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient {g.shape} vs parameter {theta.shape}")
        lr = state.lr * state.lr_mult.get(name, 1.0)
        if lr == 0 and state.momentum == 0:
            continue
        v = state.velocity.get(name)
        if v is None:
            v = state.velocity[name] = np.zeros_like(theta)
        step = g + state.weight_decay * theta if name.endswith(".w") and state.weight_decay else g
        v *= state.momentum
        v -= lr * step
        theta += v
    return params, state


# ---------------------------------------------------------------------------
# configuration

def _floats(text):
    text = str(text).strip()
    return tuple(float(t) for t in text.split(",")) if text else ()


@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 5
    sample_p: float = 1.0
    class_weights: tuple = ()
    heads: str = ""
    init_checkpoint: str = ""
    lr_drop_factor: float = 1.0
    max_iter: int = 0
    trainable: str = "*"
    rng: str = "philox"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.lr < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("lr, momentum and weight_decay must be nonnegative")
        if self.batch_size < 1 or self.epochs < 0 or self.max_iter < 0:
            raise ConfigError("batch_size must be >= 1, epochs and max_iter >= 0")
        if not 0 < self.sample_p <= 1:
            raise ConfigError(f"sample_p must be in (0, 1], got {self.sample_p}")
        if self.lr_drop_factor <= 0:
            raise ConfigError("lr_drop_factor must be positive")
        if self.rng != "philox":
            raise ConfigError(f"unsupported rng {self.rng!r}; only philox is available")

    @property
    def effective_lr(self):
        return self.lr / self.lr_drop_factor

    @property
    def images_per_batch(self):
        return math.ceil(self.batch_size / self.sample_p - 1e-9)

    def head_list(self, outputs):
        """[(output node, target kind, weight)]."""
        if not self.heads:
            return [(outputs[0], "semantic", 1.0)]
        out = []
        for item in self.heads.split(","):
            parts = item.strip().split(":")
            if len(parts) not in (2, 3) or parts[1] not in ("semantic", "geometric"):
                raise ConfigError(f"bad head {item!r}; expected node:semantic|geometric[:weight]")
            if parts[0] not in outputs:
                raise ConfigError(f"head {parts[0]!r} is not an output of the net {outputs}")
            out.append((parts[0], parts[1], float(parts[2]) if len(parts) == 3 else 1.0))
        return out

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, val in d.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            t = types[key]
            try:
                if t is tuple:
                    kwargs[key] = val if isinstance(val, tuple) else _floats(val)
                elif t is int:
                    kwargs[key] = int(val)
                elif t is float:
                    kwargs[key] = float(val)
                else:
                    kwargs[key] = str(val)
            except ValueError:
                raise ConfigError(f"bad value for {key}: {val!r}") from None
        return cls(**kwargs)

    def to_text(self):
        lines = []
        for key in self.keys():
            val = getattr(self, key)
            if isinstance(val, tuple):
                val = ",".join(repr(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"


def parse_kv(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


# ---------------------------------------------------------------------------
# training loop

def seed_streams(seed):
    """Independent generators for (init, shuffling, masks) from one master seed."""
    ss = np.random.SeedSequence(seed)
    init, shuffle, masks = ss.spawn(3)
    return int(init.generate_state(1)[0]), make_rng(shuffle), make_rng(masks)


def assemble_batch(samples, kind="semantic"):
    """Stack images and labels, padding to the largest extent (labels padded with IGNORE)."""
    h = max(s.image.shape[1] for s in samples)
    w = max(s.image.shape[2] for s in samples)
    x = np.zeros((len(samples), samples[0].image.shape[0], h, w), dtype=np.float32)
    y = np.full((len(samples), h, w), IGNORE, dtype=np.uint8)
    for i, s in enumerate(samples):
        lab = s.labels if kind == "semantic" else s.geo
        x[i, :, : s.image.shape[1], : s.image.shape[2]] = s.image
        y[i, : lab.shape[0], : lab.shape[1]] = lab
    return x, y


def predict(net, images, node=None):
    out = net.forward(images)
    net._tape = None
    if isinstance(out, dict):
        out = out[node or net.outputs[0]]
    return out.argmax(axis=1)


def evaluate(net, samples, n_cl=None, batch=8, node=None):
    n_cl = n_cl or net.spec[node or net.outputs[0]].out_ch
    cm = ConfusionMatrix(n_cl)
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        x, y = assemble_batch(chunk)
        cm.accumulate(predict(net, x, node), y)
    return compute_metrics(cm), cm


def trainable_mask(net, patterns):
    pats = [p.strip() for p in patterns.split(",") if p.strip()]
    return {
        k: bool(net.learnable.get(k, True)) and any(fnmatch.fnmatchcase(k, p) for p in pats)
        for k in net.params
    }


HISTORY_FIELDS = ("iteration", "epoch", "loss") + METRIC_NAMES


@dataclass
class TrainResult:
    history: list
    iterations: int
    wall_time: float
    final_metrics: dict = None


def train(net, dataset, config, val_set=None, history_path=None, progress=None):
    """Minibatch SGD over `dataset` (a list of samples) per `config`.

    One history row per iteration; the last row of each epoch also carries
    validation metrics when `val_set` is given.
    """
    if not dataset:
        raise ValueError("empty training set")
    _, shuffle_rng, mask_rng = seed_streams(config.seed)
    heads = config.head_list(net.outputs)
    state = OptimState.for_params(net.params, config.effective_lr, config.momentum, config.weight_decay)
    learn = trainable_mask(net, config.trainable)
    weights = config.class_weights or None
    ipb = config.images_per_batch
    history, it = [], 0
    t0 = time.perf_counter()
    done = False
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(len(dataset))
        for start in range(0, len(order), ipb):
            chunk = [dataset[i] for i in order[start:start + ipb]]
            x, _ = assemble_batch(chunk)
            out = net.forward(x, train=True, rng=mask_rng)
            outs = out if isinstance(out, dict) else {net.outputs[0]: out}
            dy, loss = {}, 0.0
            for node, kind, hw in heads:
                _, y = assemble_batch(chunk, kind)
                scores = outs[node]
                mask = None
                if config.sample_p < 1:
                    mask = sample_mask(config.sample_p, y.shape, mask_rng)
                rep, g = softmax_xent_spatial(scores, y, weights if kind == "semantic" else None, mask)
                loss += hw * rep.loss
                dy[node] = hw * g
            if not math.isfinite(loss):
                raise DivergenceError(f"loss became non-finite at iteration {it + 1}")
            pgrads, _ = net.backward(dy)
            sgd_step(net.params, pgrads, state, learn)
            it += 1
            history.append({"iteration": it, "epoch": epoch, "loss": loss})
            if progress:
                progress(it, epoch, loss)
            if config.max_iter and it >= config.max_iter:
                done = True
                break
        if val_set:
            history[-1].update(evaluate(net, val_set)[0])
        if done:
            break
    for name, theta in net.params.items():
        if not np.all(np.isfinite(theta)):
            raise DivergenceError(f"parameter {name} became non-finite")
    wall = time.perf_counter() - t0
    if history_path is not None:
        write_history(history, history_path)
    return TrainResult(history, it, wall, history[-1] if history and val_set else None)


def _fmt(v):
    if v is None or v == "":
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def write_history(history, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([_fmt(row.get(k)) for k in HISTORY_FIELDS])


def read_history(path):
    with open(path, newline="") as f:
        return [
            {k: (float(v) if v != "" else None) for k, v in row.items()}
            for row in csv.DictReader(f)
        ]
