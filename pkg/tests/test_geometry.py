from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcnlab.geometry import (
    ALEXNET_STACK, VGG16_STACK, GeometryError, GeomSummary, LayerGeom,
    compose, crop_offset, cumulative, rarefy_filter, summarize,
)


def trace_rf(layers, cell=0):
    """Input indices path-connected to one output cell of a 1-D padding-free stack."""
    cells = {cell}
    for g in reversed(layers):
        cells = {g.s * j - g.p + t * g.dilation for j in cells for t in range(g.k)}
    return cells


def brute_geometry(layers):
    a, b = trace_rf(layers, 0), trace_rf(layers, 1)
    return max(a) - min(a) + 1, min(b) - min(a)


def test_identity_element():
    s = compose(LayerGeom("conv", 1, 1), LayerGeom("conv", 1, 1))
    assert (s.kernel, s.stride) == (1, 1)


def test_two_3x3_convs():
    layers = [LayerGeom("conv", 3, 1)] * 2
    s = summarize(layers)
    assert (s.kernel, s.stride) == (5, 1)
    assert brute_geometry(layers) == (5, 1)


def test_alexnet_table_row():
    s = summarize([g for _, g in ALEXNET_STACK])
    assert (s.rf, s.stride) == (355, 32)


def test_vgg16_table_row():
    s = summarize([g for _, g in VGG16_STACK])
    assert (s.rf, s.stride) == (404, 32)
    assert sum(g.kind == "conv" for _, g in VGG16_STACK) == 15


geoms = st.builds(
    lambda kind, k, s, p, f: LayerGeom(kind, k, 1 if kind == "deconv" else s, p, f if kind == "deconv" else 1),
    st.sampled_from(["conv", "pool", "deconv"]), st.integers(1, 7), st.integers(1, 4),
    st.integers(0, 3), st.integers(1, 4),
)


@given(geoms, geoms, geoms)
def test_compose_associative(a, b, c):
    left = compose(a, compose(b, c))
    right = compose(compose(a, b), c)
    assert (left.kernel, left.stride, left.center) == (right.kernel, right.stride, right.center)


padfree = st.builds(
    lambda kind, k, s: LayerGeom(kind, k, s), st.sampled_from(["conv", "pool"]),
    st.integers(1, 5), st.integers(1, 3),
)


@given(st.lists(padfree, min_size=1, max_size=5))
def test_compose_matches_connectivity_trace(layers):
    s = summarize(layers)
    assert s.kernel.denominator == 1 and s.stride.denominator == 1
    assert (int(s.kernel), int(s.stride)) == brute_geometry(layers)
    assert s.rf == s.kernel


@given(st.lists(padfree, min_size=1, max_size=4), st.integers(1, 80))
def test_out_extent_matches_trace(layers, n):
    """Cell m exists iff its whole receptive field fits inside the input."""
    want = 0
    while max(trace_rf(layers, want)) < n:
        want += 1
    got = summarize(layers).out_extent(n)
    assert max(got, 0) == want or (want == 0 and got <= 0)


def test_deconv_is_fractional_stride():
    s = LayerGeom("deconv", 4, f=2).summary()
    assert s.stride == Fraction(1, 2)
    both = compose(LayerGeom("deconv", 4, f=2), LayerGeom("conv", 3, 2))
    assert both.stride == 1


def test_centers():
    assert LayerGeom("conv", 3, 1, 1).summary().center == 0
    assert LayerGeom("pool", 2, 2).summary().center == Fraction(1, 2)
    # bilinear x2 deconv: output y sits at input coordinate (y - 1.5) / 2
    assert LayerGeom("deconv", 4, f=2).summary().center == Fraction(-3, 4)


def test_crop_offset_requires_equal_stride():
    a = LayerGeom("conv", 3, 2).summary()
    b = LayerGeom("conv", 3, 1).summary()
    with pytest.raises(GeometryError):
        crop_offset(a, b)


def test_cumulative_last_equals_summary():
    layers = [g for _, g in ALEXNET_STACK]
    assert cumulative(layers)[-1] == summarize(layers)


def test_elementwise_invariant():
    with pytest.raises(GeometryError):
        LayerGeom("elementwise", 3, 1)
    assert GeomSummary.identity() == LayerGeom("elementwise").summary()


def test_rarefy_identity():
    f = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(rarefy_filter(f, 1), f)


def test_rarefy_2x2():
    a, b, c, d = 1.0, 2.0, 3.0, 4.0
    out = rarefy_filter(np.array([[a, b], [c, d]]), 2)
    np.testing.assert_array_equal(out, [[a, 0, b], [0, 0, 0], [c, 0, d]])


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**16))
def test_rarefy_preserves_taps(kh, kw, s, seed):
    f = np.random.default_rng(seed).standard_normal((2, kh, kw))
    out = rarefy_filter(f, s)
    assert out.shape == (2, (kh - 1) * s + 1, (kw - 1) * s + 1)
    assert np.isclose(out.sum(), f.sum())
    mask = np.zeros(out.shape[1:], dtype=bool)
    mask[::s, ::s] = True
    np.testing.assert_array_equal(out[:, mask].reshape(f.shape), f)
    assert not out[:, ~mask].any()
