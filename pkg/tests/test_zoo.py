from pathlib import Path

import numpy as np
import pytest

from fcnlab import ops
from fcnlab.geometry import GeometryError
from fcnlab.gradcheck import check_net
from fcnlab.net import Net, NetError, load_net
from fcnlab.training import softmax_xent_spatial
from fcnlab.zoo import (
    FCN_PAD, NATIVE_PATCH, attach_skip, build_family, build_toy_classifier, convert_to_fcn,
    convolutionalize, gen_synth_dataset, write_zoo,
)

ZOO_DIR = Path(__file__).resolve().parents[1] / "zoo"
NARROW = dict(widths=(2, 3, 4), hidden=5)


@pytest.fixture(scope="module")
def family():
    return build_family(4, seed=0)


def test_classifier_geometry():
    spec = build_toy_classifier(5)
    summ = spec.summaries()
    assert spec.total_stride() == 8
    assert summ["pool2"].stride == 4 and summ["pool3"].stride == 8
    assert summ["fc8"].rf == NATIVE_PATCH
    y = Net(spec).forward(np.zeros((2, 3, NATIVE_PATCH, NATIVE_PATCH), np.float32))
    assert y.shape == (2, 5, 1, 1)
    with pytest.raises(ValueError):
        build_toy_classifier(1)


def test_same_seed_same_init():
    a, b = Net(build_toy_classifier(3), seed=7), Net(build_toy_classifier(3), seed=7)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_convolutionalized_matches_classifier():
    cls = Net(build_toy_classifier(4), seed=1, dtype=np.float64)
    conv = convolutionalize(cls)
    x = np.random.default_rng(0).standard_normal((5, 3, NATIVE_PATCH, NATIVE_PATCH))
    np.testing.assert_allclose(conv.forward(x), cls.forward(x), atol=1e-12)


def test_fcn_shapes_and_zero_init(family):
    K = 4
    x = np.random.default_rng(0).random((1, 3, 64, 64)).astype(np.float32)
    for name in ("fcn-coarse", "fcn-skip1", "fcn-skip2"):
        y = family[name].forward(x)
        assert y.shape == (1, K, 64, 64)
        assert not y.any()
        rep, _ = softmax_xent_spatial(y, np.zeros((1, 64, 64), int))
        assert rep.loss == pytest.approx(np.log(K), rel=1e-12)


def test_odd_sizes_supported(family):
    y = family["fcn-skip2"].forward(np.zeros((1, 3, 37, 45), np.float32))
    assert y.shape == (1, 4, 37, 45)


def test_conversion_moves_weights(family):
    cls, coarse = family["toy-classifier"], family["fcn-coarse"]
    for k in ("conv1.w", "conv2.b", "fc7.b"):
        np.testing.assert_array_equal(coarse.params[k], cls.params[k])
    np.testing.assert_array_equal(coarse.params["fc6.w"].ravel(), cls.params["fc6.w"].ravel())
    reused = [n for n in cls.spec.names if n != "fc8"]
    assert coarse.n_params(reused) == cls.n_params(reused)
    assert not coarse.learnable["upscore.w"]


def test_heatmap_cells_match_classifier_on_patches():
    """On an enlarged input each heatmap cell is the classifier on the patch under it."""
    cls = Net(build_toy_classifier(3), seed=2, dtype=np.float64)
    x = np.random.default_rng(1).standard_normal((1, 3, 46, 46))
    scores = convolutionalize(cls).forward(x)
    assert scores.shape[2:] == (3, 3)
    for i in range(3):
        for j in range(3):
            patch = x[:, :, 8 * i:8 * i + NATIVE_PATCH, 8 * j:8 * j + NATIVE_PATCH]
            np.testing.assert_allclose(scores[:, :, i, j], cls.forward(patch)[:, :, 0, 0], atol=1e-10)


def test_crop_offsets(family):
    assert family["fcn-coarse"].crop_offsets == {"out": 8}
    assert family["fcn-skip2"].crop_offsets == {"score_pool2c": 1, "score_pool1c": 2, "out": 11}


def test_skip_strides(family):
    summ = family["fcn-skip1"].spec.summaries()
    assert summ["fuse_pool2"].stride == 4
    assert family["fcn-skip2"].spec.summaries()["fuse_pool1"].stride == 2
    assert family["fcn-skip2"].learnable["up_score.w"]
    assert not family["fcn-skip2"].learnable["upscore.w"]


def test_attach_skip_errors(family):
    with pytest.raises(GeometryError):
        attach_skip(family["fcn-coarse"], "pool1")
    with pytest.raises(NetError):
        attach_skip(family["fcn-coarse"], "nope")
    with pytest.raises(NetError):
        attach_skip(family["toy-classifier"], "pool2")


def test_attach_skip_additive_identity():
    coarse = build_family(3, seed=3, **NARROW)["fcn-coarse"]
    rng = np.random.default_rng(3)
    coarse.params["score.w"] = rng.standard_normal(coarse.params["score.w"].shape).astype(np.float32)
    skip = attach_skip(coarse, "pool2")
    x = rng.random((1, 3, 40, 40)).astype(np.float32)
    acts = skip.forward(x, keep=["up_score", "fuse_pool2", "score"])
    np.testing.assert_array_equal(acts["fuse_pool2"], acts["up_score"])
    np.testing.assert_array_equal(acts["score"], coarse.forward(x, keep=["score"])["score"])


def test_attach_skip_preserves_constant_predictions():
    """A constant score map survives both upsampling paths unchanged in the interior."""
    coarse = build_family(3, seed=4, **NARROW)["fcn-coarse"]
    coarse.params["score.b"] = np.array([0.5, -1.0, 2.0], np.float32)
    skip = attach_skip(attach_skip(coarse, "pool2"), "pool1")
    x = np.random.default_rng(4).random((1, 3, 64, 64)).astype(np.float32)
    a, b = coarse.forward(x), skip.forward(x)
    np.testing.assert_allclose(a[..., 16:-16, 16:-16], b[..., 16:-16, 16:-16], atol=1e-6)


def test_new_score_conv_gets_gradient():
    skip = attach_skip(build_family(3, seed=5, **NARROW)["fcn-coarse"], "pool2")
    x = np.random.default_rng(5).random((1, 3, 32, 32)).astype(np.float32)
    y = skip.forward(x)
    _, g = softmax_xent_spatial(y, np.random.default_rng(6).integers(0, 3, (1, 32, 32)))
    pg, _ = skip.backward(g)
    assert np.abs(pg["score_pool2.w"]).sum() > 0


@pytest.mark.parametrize("name", ["fcn-coarse", "fcn-skip2"])
def test_family_gradients(name):
    net = build_family(3, seed=6, **NARROW)[name].astype(np.float64)
    rng = np.random.default_rng(6)
    # random biases keep zero-padded regions off the relu kink
    for k in net.params:
        if k.startswith("score") or k.endswith(".b"):
            net.params[k] = rng.standard_normal(net.params[k].shape)
    x = rng.random((1, 3, 32, 32))
    errs = check_net(net, x, params=[k for k in net.params if k.startswith(("score", "up_", "conv1"))])
    assert max(errs.values()) < 1e-6, errs


def test_zoo_files_match_builders(tmp_path):
    written = {p.name: p.read_text() for p in write_zoo(tmp_path)}
    for name, text in written.items():
        assert (ZOO_DIR / name).read_text() == text
    fam = build_family(5)
    for name, net in fam.items():
        assert load_net(ZOO_DIR / f"{name}.net") == net.spec


def test_zoo_conv1_padding():
    assert load_net(ZOO_DIR / "fcn-coarse.net")["conv1"].p == FCN_PAD


def test_deconv_kernels_are_bilinear(family):
    w = family["fcn-skip2"].params["up_score.w"]
    np.testing.assert_array_equal(w, ops.bilinear_kernel(2, 4))


# -- synthetic data ----------------------------------------------------------------

def test_synth_empty_and_errors():
    assert gen_synth_dataset(0, 32, 32, 3, 0) == []
    with pytest.raises(ValueError):
        gen_synth_dataset(1, 32, 32, 17, 0)
    with pytest.raises(ValueError):
        gen_synth_dataset(1, 31, 32, 3, 0)


def test_synth_deterministic():
    a, b = gen_synth_dataset(3, 40, 36, 5, 9), gen_synth_dataset(3, 40, 36, 5, 9)
    for s, t in zip(a, b):
        assert s.image.tobytes() == t.image.tobytes()
        assert s.labels.tobytes() == t.labels.tobytes()
    assert a[0].image.tobytes() != gen_synth_dataset(1, 40, 36, 5, 10)[0].image.tobytes()


def test_synth_content():
    data = gen_synth_dataset(100, 48, 48, 6, seed=0)
    bg = np.mean([(s.labels == 0).mean() for s in data])
    assert abs(bg - 0.75) <= 0.05
    for s in data:
        assert s.image.shape == (3, 48, 48) and s.image.dtype == np.float32
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert s.labels.max() < 6
        assert ((s.geo == 0) == (s.labels == 0)).all()
    assert any((s.geo == 3).any() for s in data)  # thin bars occur
