"""On-disk dataset splits: FCNT images plus PGM label maps.

A split directory holds ``images/NNNN.fcnt`` (1x3xHxW), ``labels/NNNN.pgm``
and optionally ``geo/NNNN.pgm``.  A dataset root holds ``train/``, ``val/``
and a ``dataset.txt`` of ``key = value`` lines.
"""

from pathlib import Path

import numpy as np

from .tensor import TensorFormatError, read_pgm, read_tensor, write_pgm, write_tensor
from .zoo import SynthSample


class DataError(ValueError):
    pass


def write_split(samples, directory):
    d = Path(directory)
    for sub in ("images", "labels", "geo"):
        (d / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        stem = f"{i:04d}"
        write_tensor(s.image[None], d / "images" / f"{stem}.fcnt")
        write_pgm(s.labels, d / "labels" / f"{stem}.pgm")
        write_pgm(s.geo, d / "geo" / f"{stem}.pgm")


def read_label_dir(directory):
    """{stem: label map} for every .pgm in `directory`."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    out = {}
    for p in sorted(d.glob("*.pgm")):
        try:
            out[p.stem] = read_pgm(p)
        except TensorFormatError as e:
            raise DataError(f"{p}: {e}") from None
    if not out:
        raise DataError(f"{d}: no .pgm files")
    return out


def load_split(directory):
    """List of SynthSample read back from a split directory."""
    d = Path(directory)
    images = sorted((d / "images").glob("*.fcnt"))
    if not images:
        raise DataError(f"{d}: no images/*.fcnt files")
    out = []
    for p in images:
        lab = d / "labels" / f"{p.stem}.pgm"
        geo = d / "geo" / f"{p.stem}.pgm"
        try:
            img = read_tensor(p)
            labels = read_pgm(lab)
            geo_map = read_pgm(geo) if geo.exists() else np.zeros_like(labels)
        except FileNotFoundError:
            raise DataError(f"{lab}: missing label map for {p.name}") from None
        except TensorFormatError as e:
            raise DataError(f"{p.parent.name}/{p.name}: {e}") from None
        if img.shape[0] != 1 or img.shape[2:] != labels.shape:
            raise DataError(f"{p}: image {img.shape} does not match labels {labels.shape}")
        out.append(SynthSample(img[0], labels, geo_map, -1))
    return out


def resolve_split(root, name):
    """`root/name` if it exists, else `root` itself when it is a split directory."""
    root = Path(root)
    if (root / name / "images").is_dir():
        return root / name
    if (root / "images").is_dir():
        return root
    raise DataError(f"{root}: no {name}/ split and not a split directory")
