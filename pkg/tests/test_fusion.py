import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dac_retrieval.errors import ConfigError, ShapeError
from dac_retrieval.fusion import FALLBACK_ALPHA, FusionConfig, default_alpha, fuse

unit_range = arrays(np.float64, 6, elements=st.floats(-1, 1))


def test_tanh_example():
    h = fuse([0.0, 0.0], [1.0, -1.0], FusionConfig(alpha=0.5)).h
    assert np.allclose(h, [0.46212, -0.46212], atol=5e-6)
    assert np.array_equal(h, np.tanh([0.5, -0.5]))


@given(unit_range, unit_range)
def test_alpha_zero_is_image_only(g, f):
    h = fuse(g, f, FusionConfig(alpha=0.0)).h
    assert np.array_equal(h, np.tanh(g))
    assert np.array_equal(fuse(g, None, FusionConfig(alpha=0.7)).h, np.tanh(g))


@given(unit_range, unit_range, st.floats(0, 1))
def test_tanh_fused_entries_open_interval(g, f, alpha):
    # inputs of this size keep tanh away from saturating to +-1 in float64
    h = fuse(g, f, FusionConfig(alpha=alpha)).h
    assert np.all(np.abs(h) < 1.0)


def test_identity_sum():
    h = fuse([1.0, 2.0], [3.0, -1.0], FusionConfig(alpha=1.0, act="identity")).h
    assert h.tolist() == [4.0, 1.0]


def test_concat_doubles_dim():
    d = fuse(np.ones(4), np.ones(4), FusionConfig(alpha=0.4, scheme="concat"))
    assert d.h.shape == (8,)
    assert np.array_equal(d.h[4:], np.tanh(0.4 * np.ones(4)))
    assert not fuse(np.ones(4), None, FusionConfig(scheme="concat")).h[4:].any()


def test_post_norm():
    h = fuse([1.0, 2.0], [0.5, 0.5], FusionConfig(post_norm=True)).h
    assert np.isclose(np.linalg.norm(h), 1.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        FusionConfig(alpha=1.5)
    with pytest.raises(ConfigError):
        FusionConfig(scheme="mul")
    with pytest.raises(ShapeError):
        fuse(np.ones(3), np.ones(4), FusionConfig())


@pytest.mark.parametrize("dataset,backbone,alpha", [
    ("OS-MN40-core", "L/14", 0.25),
    ("OS-ABO-core", "B/32", 0.85),
    ("OS-ESB-core", "ViT-B/32", 0.1),
    ("OS-NTU-core", "B/32", 0.6),
    ("unknown", "unknown", 0.4),
])
def test_default_alpha(dataset, backbone, alpha):
    assert default_alpha(dataset, backbone) == alpha
    assert FALLBACK_ALPHA == FusionConfig().alpha == 0.4
