import json
import struct

import numpy as np
import pytest

from dac_retrieval import dataio, encoder as enc, training
from dac_retrieval.errors import ConfigError, DataError, FormatError
from dac_retrieval.fusion import FusionConfig
from dac_retrieval.numcore import Rng
from dac_retrieval.pipeline import embed_objects
from dac_retrieval.retrieval import evaluate


def test_round_trip_bit_identical(tmp_path):
    arr = Rng(0).normal((10, 16)).astype(np.float32).astype(np.float64)
    dataio.write_features(tmp_path / "f.dacf", {"x": arr, "v": arr[0]})
    back = dataio.read_features(tmp_path / "f.dacf")
    assert np.array_equal(back["x"], arr)
    assert back["v"].shape == (1, 16)


def test_header_layout(tmp_path):
    dataio.write_features(tmp_path / "f.dacf", {"ab": np.ones((2, 3))})
    raw = (tmp_path / "f.dacf").read_bytes()
    assert raw[:4] == b"DACF"
    assert struct.unpack("<III", raw[4:16]) == (1, 1, 2)
    assert raw[16:18] == b"ab"
    assert struct.unpack("<II", raw[18:26]) == (2, 3)
    assert len(raw) == 26 + 4 * 6


def test_malformed_files_rejected(tmp_path):
    path = tmp_path / "f.dacf"
    dataio.write_features(path, {"x": np.ones((4, 4))})
    raw = path.read_bytes()
    for bad in (raw[:-3], raw[:10], raw + b"\0", b"XXXX" + raw[4:]):
        path.write_bytes(bad)
        with pytest.raises(FormatError):
            dataio.read_features(path)
    nan = bytearray(raw)
    nan[-4:] = struct.pack("<f", float("nan"))
    path.write_bytes(bytes(nan))
    with pytest.raises(FormatError):
        dataio.read_features(path)


def test_nan_rejected_at_write(tmp_path):
    with pytest.raises(FormatError):
        dataio.write_features(tmp_path / "f.dacf", {"x": [[1.0, np.nan]]})


def test_generator_round_trip(tmp_path, small_cfg, small_dataset):
    dataio.gen_synthetic(small_cfg, tmp_path)
    _, ds = dataio.load_manifest(tmp_path / "manifest.json")
    for split in ("train", "query", "target"):
        a, b = getattr(ds, split), getattr(small_dataset, split)
        assert [o.id for o in a] == [o.id for o in b]
        assert all(np.array_equal(x.views, y.views) for x, y in zip(a, b))
        assert all(np.array_equal(x.description, y.description) for x, y in zip(a, b))
    assert ds.class_descriptions.keys() == small_dataset.class_descriptions.keys()


def test_generator_hashes_repeat(tmp_path, small_cfg):
    assert dataio.gen_synthetic(small_cfg, tmp_path / "a") == dataio.gen_synthetic(small_cfg, tmp_path / "b")


def edit_manifest(path, fn):
    data = json.loads(path.read_text())
    fn(data)
    path.write_text(json.dumps(data))


def test_missing_section_named(tmp_path, small_cfg):
    dataio.gen_synthetic(small_cfg, tmp_path)
    man = tmp_path / "manifest.json"
    edit_manifest(man, lambda d: d["objects"][0]["views"].update(section="views/nope"))
    with pytest.raises(DataError, match="views/nope"):
        dataio.load_manifest(man)


def test_view_count_mismatch(tmp_path, small_cfg):
    dataio.gen_synthetic(small_cfg, tmp_path)
    man = tmp_path / "manifest.json"
    edit_manifest(man, lambda d: d.update(views_per_object=d["views_per_object"] + 1))
    with pytest.raises(DataError, match="views"):
        dataio.load_manifest(man)


def test_overlapping_manifest_rejected(tmp_path, small_cfg):
    dataio.gen_synthetic(small_cfg, tmp_path)
    man = tmp_path / "manifest.json"

    def leak(d):
        train_label = next(o["label"] for o in d["objects"] if o["split"] == "train")
        next(o for o in d["objects"] if o["split"] == "target")["label"] = train_label
    edit_manifest(man, leak)
    with pytest.raises(DataError, match="shared"):
        dataio.load_manifest(man)


def test_noiseless_views_identical_within_class():
    cfg = dataio.SynthConfig(seen=2, unseen=2, items_per_class=4, views=3, dim=8, noise=0.0, shift=0.0)
    ds, _, _ = dataio.generate(cfg)
    by_label = {}
    for o in ds.train + ds.query + ds.target:
        by_label.setdefault(o.label, []).append(o.views)
    for views in by_label.values():
        assert all(np.array_equal(v, views[0]) for v in views)
        assert all(np.array_equal(row, views[0][0]) for row in views[0])


def test_clean_prototypes_self_retrieve():
    cfg = dataio.SynthConfig(noise=0.0, shift=0.0)
    ds, _, _ = dataio.generate(cfg)
    vt, tt = enc.make_synthetic_backbone(cfg.dim)
    report = evaluate(*(embed_objects(vt, tt, objs, FusionConfig(alpha=0.0)) for objs in (ds.query, ds.target)))
    assert report.map == 100.0


def test_synth_config_validation():
    with pytest.raises(ConfigError):
        dataio.SynthConfig(seen=1)
    with pytest.raises(ConfigError):
        dataio.SynthConfig(views=0)


def test_backbone_and_adapter_round_trip(tmp_path, small_dataset):
    vt, tt, _ = training.train(small_dataset, training.TrainConfig(epochs=1))
    dataio.save_backbone(tmp_path / "bb.dacf", [vt, tt])
    dataio.save_adapters(tmp_path / "ad.dacf", [vt, tt])
    back = dataio.load_adapters(tmp_path / "ad.dacf", dataio.load_backbone(tmp_path / "bb.dacf"))
    x = small_dataset.query[0].views
    # parameters pass through float32 storage
    for orig, new in zip((vt, tt), back):
        assert new.name == orig.name
        assert np.allclose(enc.encode(new, x)[0], enc.encode(orig, x)[0], atol=1e-5)
        for (_, a), (_, b) in zip(orig.adapters(), new.adapters()):
            assert np.array_equal(b.a, a.a.astype(np.float32)) and b.rank == a.rank


def test_descriptor_round_trip(tmp_path, small_dataset):
    vt, tt = enc.make_synthetic_backbone(small_dataset.query[0].views.shape[1])
    descs = embed_objects(vt, tt, small_dataset.query, FusionConfig())
    dataio.save_descriptors(tmp_path / "d.dacf", {"query": descs}, {"note": 1})
    groups, meta = dataio.load_descriptors(tmp_path / "d.dacf")
    assert meta["note"] == 1
    assert [d.id for d in groups["query"]] == [d.id for d in descs]
    assert np.allclose(groups["query"][0].h, descs[0].h, atol=1e-7)
