import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chains import random_chain, random_input
from fcnlab.geometry import GeometryError
from fcnlab.net import Net, TopologyError, parse_net
from fcnlab.stitch import (
    center_offset, dense_forward, equivalent_dense_net, shift_and_stitch_reference, stitch_check,
)
from fcnlab.zoo import build_family, build_toy_classifier


def _1d_pool_net():
    return Net(parse_net("x input - - - - 1 - 0\np pool 2 2 0 1 1 - 0 x\n"), dtype=np.float64)


def test_1d_pool_example():
    """[1,2,3,4] with a 2-wide stride-2 max pool stitches to [2,3,4,4]."""
    x = np.array([1.0, 2, 3, 4]).reshape(1, 1, 1, 4) * np.ones((1, 1, 2, 1))
    out = shift_and_stitch_reference(_1d_pool_net(), x, 2)
    np.testing.assert_array_equal(out[0, 0, 0], [2, 3, 4, 4])


def test_dense_cells_match_per_window_evaluation():
    """Dense cell j is the original net applied to the rf window starting at j."""
    net, f = next((n, f) for n, f in map(random_chain, range(100)) if f == 4 and n.params)
    x = random_input(net, 0, 14)
    ref = shift_and_stitch_reference(net, x, f)
    rf = int(net.spec.summaries()[net.outputs[0]].rf)
    xp = np.pad(x, ((0, 0), (0, 0), (0, f - 1), (0, f - 1)))
    for j in range(ref.shape[2]):
        for i in range(ref.shape[3]):
            cell = net.forward(xp[:, :, j:j + rf, i:i + rf])
            np.testing.assert_allclose(ref[:, :, j, i], cell[:, :, 0, 0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.booleans())
def test_random_chains_equivalent(seed, pool_only):
    net, f = random_chain(seed, pool_only)
    x = random_input(net, seed)
    diff = stitch_check(net, x, f)
    if pool_only:
        assert diff == 0.0
    else:
        assert diff < 1e-5


def test_stride_one_exact():
    net = Net(parse_net("x input - - - - 2 - 0\nc conv 3 1 0 2 2 he 1 x\nr relu - - - 2 2 - 1 c\n"),
              seed=1, dtype=np.float64)
    x = np.random.default_rng(0).standard_normal((1, 2, 9, 9))
    assert stitch_check(net, x) == 0.0
    np.testing.assert_array_equal(dense_forward(equivalent_dense_net(net), x, 1), net.forward(x))


def test_toy_classifier_stride_8():
    net = Net(build_toy_classifier(4), seed=2, dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((1, 3, 36, 36))
    assert stitch_check(net, x) < 1e-5


def test_equivalent_net_has_unit_strides():
    dense = equivalent_dense_net(Net(build_toy_classifier(3)))
    assert all(n.s == 1 for n in dense.spec.nodes if n.kind in ("conv", "pool"))
    assert dense.spec.total_stride() == 1
    assert dense.spec["pool3"].dilation == 4
    assert dense.spec["conv3"].k == 9  # 3x3 rarefied by the accumulated stride 4


def test_stride_mismatch_is_error():
    with pytest.raises(GeometryError, match="!="):
        shift_and_stitch_reference(_1d_pool_net(), np.zeros((1, 1, 4, 4)), 4)


def test_dag_rejected():
    with pytest.raises(TopologyError):
        equivalent_dense_net(build_family(3)["fcn-skip1"])


def test_padded_chain_rejected():
    net = Net(parse_net("x input - - - - 1 - 0\nc conv 3 1 1 1 1 he 1 x\n"))
    with pytest.raises(GeometryError, match="padded"):
        stitch_check(net, np.zeros((1, 1, 5, 5)))


def test_center_offset():
    assert center_offset(Net(build_toy_classifier(3))) == 14
