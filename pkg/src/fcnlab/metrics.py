"""Confusion-matrix segmentation metrics and the resampling upper bound on mean IU."""

import numpy as np

from .tensor import IGNORE

METRIC_NAMES = ("pixel_acc", "mean_acc", "mean_iu", "fw_iu")


class MetricsError(ValueError):
    pass


class ConfusionMatrix:
    """counts[i, j] = pixels of true class i predicted as class j."""

    def __init__(self, n_cl, counts=None):
        self.n_cl = n_cl
        self.counts = np.zeros((n_cl, n_cl), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64)
        if self.counts.shape != (n_cl, n_cl) or (self.counts < 0).any():
            raise MetricsError("counts must be a nonnegative n_cl x n_cl matrix")

    def accumulate(self, pred, truth):
        pred, truth = np.asarray(pred), np.asarray(truth)
        if pred.shape != truth.shape:
            raise MetricsError(f"shape mismatch: prediction {pred.shape} vs truth {truth.shape}")
        keep = truth != IGNORE
        p, t = pred[keep].astype(np.int64), truth[keep].astype(np.int64)
        if p.size and (p.min() < 0 or p.max() >= self.n_cl):
            raise MetricsError(f"prediction label out of range for {self.n_cl} classes")
        if t.size and (t.min() < 0 or t.max() >= self.n_cl):
            raise MetricsError(f"truth label out of range for {self.n_cl} classes")
        self.counts += np.bincount(self.n_cl * t + p, minlength=self.n_cl ** 2).reshape(self.n_cl, self.n_cl)
        return self

    def __add__(self, other):
        return ConfusionMatrix(self.n_cl, self.counts + other.counts)

    @property
    def total(self):
        return self.counts.sum(axis=1)


def class_iu(cm):
    n = cm.counts.astype(np.float64)
    inter = np.diag(n)
    union = n.sum(axis=1) + n.sum(axis=0) - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


def compute_metrics(cm):
    """pixel accuracy, mean accuracy, mean IU and frequency-weighted IU.

    Classes absent from the ground truth are left out of both means.
    """
    n = cm.counts.astype(np.float64)
    t = n.sum(axis=1)
    if t.sum() == 0:
        raise MetricsError("empty confusion matrix: nothing was evaluated")
    present = t > 0
    diag = np.diag(n)
    iu = class_iu(cm)
    return {
        "pixel_acc": diag.sum() / t.sum(),
        "mean_acc": np.mean(diag[present] / t[present]),
        "mean_iu": np.mean(iu[present]),
        "fw_iu": np.sum(t[present] * iu[present]) / t.sum(),
    }


# ---------------------------------------------------------------------------
# upper bound from ground-truth resampling

def _block_mode(truth, f, n_cl):
    """Most frequent non-ignore label per f x f block (ties to the smaller label; 0 if none)."""
    h, w = truth.shape
    hb, wb = -(-h // f), -(-w // f)
    padded = np.full((hb * f, wb * f), IGNORE, dtype=np.int64)
    padded[:h, :w] = truth
    blocks = padded.reshape(hb, f, wb, f).transpose(0, 2, 1, 3).reshape(hb, wb, f * f)
    hist = np.stack([(blocks == c).sum(axis=-1) for c in range(n_cl)], axis=-1)
    return hist.argmax(axis=-1)


def downsample_labels(truth, f, method="nearest", n_cl=None):
    truth = np.asarray(truth)
    n_cl = n_cl if n_cl is not None else _n_classes(truth)
    if method == "majority":
        return _block_mode(truth, f, n_cl)
    if method != "nearest":
        raise ValueError(f"unknown downsampling method {method!r}")
    d = truth[::f, ::f].astype(np.int64)
    holes = d == IGNORE
    if holes.any():
        d[holes] = _block_mode(truth, f, n_cl)[holes]
    return d


def upsample_labels(d, f, shape):
    return np.repeat(np.repeat(d, f, axis=0), f, axis=1)[: shape[0], : shape[1]]


def _n_classes(truth):
    valid = truth[truth != IGNORE]
    return int(valid.max()) + 1 if valid.size else 1


def iu_bound_matrix(truth, f, n_cl=None, method="nearest"):
    """Confusion matrix of ground truth against its own down/up-sampled copy."""
    truth = np.asarray(truth)
    h, w = truth.shape
    if f < 1:
        raise ValueError(f"factor must be >= 1, got {f}")
    if f > h and f > w:
        raise ValueError(f"factor {f} exceeds both image extents {h}x{w}")
    n_cl = n_cl if n_cl is not None else _n_classes(truth)
    pred = upsample_labels(downsample_labels(truth, f, method, n_cl), f, truth.shape)
    return ConfusionMatrix(n_cl).accumulate(pred, truth)


def iu_upper_bound(truth, f, n_cl=None, method="nearest"):
    return compute_metrics(iu_bound_matrix(truth, f, n_cl, method))["mean_iu"]
