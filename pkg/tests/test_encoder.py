import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dac_retrieval import encoder as enc
from dac_retrieval.errors import ConfigError, DegenerateVectorError, ShapeError
from dac_retrieval.numcore import Rng

GOLDEN = Path(__file__).parent / "golden" / "encode_object_24x16.json"


def identity_tower(d=2):
    return enc.attach_adapters(enc.make_tower([np.eye(d)]), Rng(0), rank=1)


def test_identity_tower_normalizes():
    out, _ = enc.encode(identity_tower(), [3.0, 4.0])
    assert np.allclose(out, [0.6, 0.8])


def test_zero_input_is_degenerate():
    with pytest.raises(DegenerateVectorError):
        enc.encode(identity_tower(), [0.0, 0.0])


def test_encode_repeatable_and_batch_consistent():
    vt, _ = enc.make_synthetic_backbone(32)
    x = Rng(1).normal((5, 32)) * 0.035
    a, _ = enc.encode(vt, x)
    assert np.array_equal(a, enc.encode(vt, x)[0])
    for row, single in zip(a, x):
        assert np.allclose(row, enc.encode(vt, single)[0], atol=1e-15)
    assert np.allclose(np.linalg.norm(a, axis=1), 1.0)


def test_pool_views_examples():
    assert enc.pool_views([[1, 2], [3, 4]]).tolist() == [2.0, 3.0]
    v = np.array([0.1, 0.2, 0.7])
    assert np.array_equal(enc.pool_views([v] * 5), v)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_pool_views_permutation_invariant_bitwise(seed, m):
    rng = Rng(seed)
    views = rng.normal((m, 6))
    perm = np.argsort(rng.uniform(m))
    assert np.array_equal(enc.pool_views(views), enc.pool_views(views[perm]))


def test_encode_object_singleton_and_duplicates():
    vt, _ = enc.make_synthetic_backbone(32)
    views = Rng(2).normal((4, 32)) * 0.035
    assert np.allclose(enc.encode_object(vt, views[:1]), enc.encode(vt, views[0])[0], atol=1e-15)
    assert np.allclose(enc.encode_object(vt, np.concatenate([views, views])), enc.encode_object(vt, views),
                       atol=1e-15)


def test_encode_object_golden():
    ref = json.loads(GOLDEN.read_text())
    bb = ref["backbone"]
    vt, _ = enc.make_synthetic_backbone(bb["in_dim"], bb["out_dim"], seed=bb["seed"])
    vs = ref["views"]
    views = Rng(vs["seed"]).normal((vs["count"], bb["in_dim"])) * vs["scale"]
    expected = np.array([float.fromhex(h) for h in ref["g"]])
    # BLAS reduction order may differ across machines, so allow a few ulps
    assert np.allclose(enc.encode_object(vt, views), expected, rtol=0, atol=1e-14)


def test_class_weights():
    tt = enc.make_tower([np.eye(3)])
    w = enc.build_class_weights(tt, [[2.0, 0, 0], [0, 5.0, 0]])
    assert np.allclose(w @ w.T, np.eye(2))
    rows = enc.build_class_weights(tt, Rng(0).normal((5, 3)))
    assert np.allclose(np.linalg.norm(rows, axis=1), 1.0, atol=1e-10)
    with pytest.warns(UserWarning):
        dup = enc.build_class_weights(tt, [[1.0, 2, 3], [1.0, 2, 3]])
    assert np.array_equal(dup[0], dup[1])
    with pytest.raises(ConfigError):
        enc.build_class_weights(tt, [[1.0, 0, 0]])


def test_tower_validation():
    with pytest.raises(ShapeError):
        enc.make_tower([np.eye(3), np.eye(2)])
    with pytest.raises(ShapeError):
        enc.encode(enc.make_tower([np.eye(3)]), np.ones(4))


def test_attach_modes():
    vt, _ = enc.make_synthetic_backbone(16, 8)
    r = dict(rank=2)
    assert len(enc.attach_adapters(vt, Rng(0), **r).adapters()) == 2
    assert enc.attach_adapters(vt, Rng(0), mode="frozen", **r).adapters() == []
    assert all(not a.train_phi for _, a in enc.attach_adapters(vt, Rng(0), mode="plain_lora", **r).adapters())
    with pytest.raises(ConfigError):
        enc.attach_adapters(vt, Rng(0), mode="full")


def test_fresh_adapters_leave_tower_unchanged():
    vt, _ = enc.make_synthetic_backbone(32)
    x = Rng(4).normal((7, 32)) * 0.035
    adapted = enc.attach_adapters(vt, Rng(5))
    assert np.array_equal(enc.encode(adapted, x)[0], enc.encode(vt, x)[0])


def test_merge_tower_with_biases():
    rng = Rng(6)
    t = enc.make_tower([rng.normal((5, 5)), rng.normal((4, 5))], biases=[rng.normal(5), rng.normal(4)],
                       acts=["tanh", "identity"])
    t = enc.attach_adapters(t, rng, rank=2)
    for _, a in t.adapters():
        a.b += rng.normal(a.b.shape)
        a.phi += rng.normal(a.phi.shape)
    x = rng.normal((50, 5))
    assert np.allclose(enc.encode(enc.merge_tower(t), x)[0], enc.encode(t, x)[0], rtol=0, atol=1e-12)
