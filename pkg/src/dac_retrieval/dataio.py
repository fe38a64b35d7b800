"""Feature container, dataset manifests and the synthetic dataset generator.

Container layout (little-endian)::

    b"DACF"  u32 version  u32 n_sections
    n_sections x { u32 name_len, utf-8 name, u32 rows, u32 dim, f32[rows*dim] }

Numbers are stored as float32 and widened to float64 on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from dac_retrieval import encoder as enc
from dac_retrieval.ablora import AdaptedLinear
from dac_retrieval.errors import ConfigError, DataError, FormatError
from dac_retrieval.fusion import Descriptor
from dac_retrieval.numcore import ACTIVATIONS, Rng
from dac_retrieval.retrieval import ObjectRecord, OpenSetDataset, validate_open_set_split

MAGIC = b"DACF"
VERSION = 1
SPLITS = ("train", "query", "target")


# --- binary container --------------------------------------------------------


def write_features(path, sections: dict[str, np.ndarray]):
    """Write named 2-D (or 1-D, stored as one row) arrays as float32."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, arr in sections.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2:
            raise FormatError(f"section {name!r} must be 1-D or 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"section {name!r} contains NaN or Inf")
        f32 = arr.astype("<f4")
        if not np.all(np.isfinite(f32)):
            raise FormatError(f"section {name!r} overflows float32")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<II", *f32.shape))
        parts.append(f32.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_features(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: undecodable section name") from exc
        rows, dim = struct.unpack("<II", take(8))
        arr = np.frombuffer(take(4 * rows * dim), dtype="<f4").reshape(rows, dim)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: section {name!r} contains non-finite values")
        if name in out:
            raise FormatError(f"{path}: duplicate section {name!r}")
        out[name] = arr.astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- manifests ---------------------------------------------------------------


@dataclass
class Manifest:
    name: str
    feature_dim: int
    views_per_object: int
    objects: list[dict]
    class_descriptions: dict[str, dict]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


class _FileCache:
    def __init__(self, root: Path):
        self.root = root
        self._files = {}

    def resolve(self, ref: dict, what: str) -> np.ndarray:
        try:
            fname, section = ref["file"], ref["section"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"{what}: malformed feature reference {ref!r}") from exc
        if fname not in self._files:
            path = self.root / fname
            if not path.exists():
                raise DataError(f"{what}: feature file {fname} not found")
            self._files[fname] = read_features(path)
        sections = self._files[fname]
        if section not in sections:
            raise DataError(f"{what}: section {section!r} missing from {fname}")
        arr = sections[section]
        if "row" in ref:
            row = ref["row"]
            if not 0 <= row < arr.shape[0]:
                raise DataError(f"{what}: row {row} outside section {section!r} of {arr.shape[0]} rows")
            return arr[row]
        return arr


def load_manifest(path) -> tuple[Manifest, OpenSetDataset]:
    """Parse a manifest, resolve all feature references and validate the split."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
        man = Manifest(
            name=raw["name"], feature_dim=int(raw["feature_dim"]),
            views_per_object=int(raw["views_per_object"]), objects=list(raw["objects"]),
            class_descriptions=dict(raw.get("class_descriptions", {})),
        )
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc

    files = _FileCache(path.parent)
    splits = {s: [] for s in SPLITS}
    for obj in man.objects:
        oid = str(obj.get("id"))
        split = obj.get("split")
        if split not in splits:
            raise DataError(f"object {oid}: unknown split {split!r}")
        views = np.atleast_2d(files.resolve(obj.get("views"), f"object {oid} views"))
        if views.shape != (man.views_per_object, man.feature_dim):
            raise DataError(
                f"object {oid}: views have shape {views.shape}, manifest declares "
                f"({man.views_per_object}, {man.feature_dim})"
            )
        desc = None
        if obj.get("description") is not None:
            desc = np.ravel(files.resolve(obj["description"], f"object {oid} description"))
            if desc.shape != (man.feature_dim,):
                raise DataError(f"object {oid}: description has dim {desc.size}, expected {man.feature_dim}")
        splits[split].append(ObjectRecord(oid, str(obj["label"]), split, views, desc))

    class_desc = {}
    for label, ref in man.class_descriptions.items():
        vec = np.ravel(files.resolve(ref, f"class {label} description"))
        if vec.shape != (man.feature_dim,):
            raise DataError(f"class {label}: description has dim {vec.size}, expected {man.feature_dim}")
        class_desc[label] = vec

    ds = OpenSetDataset(splits["train"], splits["query"], splits["target"], class_desc, name=man.name)
    validate_open_set_split(ds).raise_if_invalid()
    return man, ds


# --- synthetic open-set data -------------------------------------------------


@dataclass
class SynthConfig:
    seen: int = 8
    unseen: int = 8
    items_per_class: int = 20
    views: int = 6
    dim: int = 32
    noise: float = 1.5
    shift: float = 1.0
    text_noise: float = 1.75
    # overall magnitude of stored features; small inputs keep the adapter
    # bias and low-rank branch on comparable step sizes
    feature_scale: float = 0.035
    query_fraction: float = 0.25
    seed: int = 7
    name: str = "synthetic"

    def __post_init__(self):
        if self.seen < 2 or self.unseen < 2:
            raise ConfigError("need at least 2 seen and 2 unseen classes")
        if self.items_per_class < 2:
            raise ConfigError("need at least 2 items per class (query and target)")
        if self.views < 1 or self.dim < 4:
            raise ConfigError("views must be >= 1 and dim >= 4")
        if self.noise < 0 or self.text_noise < 0 or self.shift < 0:
            raise ConfigError("noise levels and shift strength must be non-negative")
        if not self.feature_scale > 0:
            raise ConfigError("feature_scale must be positive")
        if not 0.0 < self.query_fraction < 1.0:
            raise ConfigError("query_fraction must lie in (0, 1)")

    @property
    def semantic_dim(self) -> int:
        return self.dim // 2


def domain_shift(cfg: SynthConfig, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Fixed affine ``x -> S x + t`` standing in for the render-vs-photo gap.

    Class content lives in the leading ``semantic_dim`` coordinates. ``S``
    leaks a rank-``dim // 8`` slice of the remaining (nuisance) coordinates
    into the semantic ones, and ``t`` offsets the semantic coordinates.
    ``shift = 0`` gives the identity.
    """
    sem = cfg.semantic_dim
    k = max(1, cfg.dim // 8)
    src, _ = np.linalg.qr(rng.normal((cfg.dim - sem, k)))
    dst, _ = np.linalg.qr(rng.normal((sem, k)))
    s = np.eye(cfg.dim)
    s[:sem, sem:] += 3.0 * cfg.shift * (dst @ src.T)
    t = np.zeros(cfg.dim)
    t[:sem] = 3.0 * cfg.shift * rng.normal(sem)
    return s, t


def _as_stored(arr):
    # round through float32 so in-memory data equals what a reload returns
    return arr.astype(np.float32).astype(np.float64)


def generate(cfg: SynthConfig) -> tuple[OpenSetDataset, dict[str, dict[str, np.ndarray]], Manifest]:
    """Build a synthetic open-set dataset in memory.

    Returns the dataset, the feature files (file name -> sections) and the
    manifest that references them.
    """
    rng = Rng(cfg.seed)
    n_cls = cfg.seen + cfg.unseen
    protos = np.zeros((n_cls, cfg.dim))
    protos[:, : cfg.semantic_dim] = rng.normal((n_cls, cfg.semantic_dim))
    s, t = domain_shift(cfg, rng)
    labels = [f"c{i:02d}" for i in range(n_cls)]
    n_query = max(1, min(cfg.items_per_class - 1, round(cfg.items_per_class * cfg.query_fraction)))

    view_sections, desc_rows, objects = {}, [], []
    records = {s_: [] for s_ in SPLITS}
    for ci, label in enumerate(labels):
        for j in range(cfg.items_per_class):
            if ci < cfg.seen:
                split = "train"
            else:
                split = "query" if j < n_query else "target"
            oid = f"{label}_{j:03d}"
            latent = protos[ci] + cfg.noise * rng.normal((cfg.views, cfg.dim))
            views = _as_stored(cfg.feature_scale * (latent @ s.T + t))
            desc = _as_stored(cfg.feature_scale * (protos[ci] + cfg.text_noise * rng.normal(cfg.dim)))
            view_sections[f"views/{oid}"] = views
            objects.append({
                "id": oid, "label": label, "split": split,
                "views": {"file": "views.dacf", "section": f"views/{oid}"},
                "description": {"file": "descriptions.dacf", "section": "objects", "row": len(desc_rows)},
            })
            desc_rows.append(desc)
            records[split].append(ObjectRecord(oid, label, split, views, desc))

    class_mat = _as_stored(cfg.feature_scale * protos[: cfg.seen])
    class_desc = {labels[i]: class_mat[i] for i in range(cfg.seen)}
    files = {
        "views.dacf": view_sections,
        "descriptions.dacf": {"objects": np.stack(desc_rows), "classes": class_mat},
    }
    man = Manifest(
        name=cfg.name, feature_dim=cfg.dim, views_per_object=cfg.views, objects=objects,
        class_descriptions={
            labels[i]: {"file": "descriptions.dacf", "section": "classes", "row": i} for i in range(cfg.seen)
        },
    )
    ds = OpenSetDataset(records["train"], records["query"], records["target"], class_desc, name=cfg.name)
    return ds, files, man


def gen_synthetic(cfg: SynthConfig, out_dir) -> dict[str, str]:
    """Write a synthetic dataset to ``out_dir``; returns file name -> SHA-256."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, files, man = generate(cfg)
    hashes = {}
    for fname, sections in files.items():
        write_features(out / fname, sections)
        hashes[fname] = sha256_file(out / fname)
    (out / "manifest.json").write_text(man.to_json() + "\n")
    hashes["manifest.json"] = sha256_file(out / "manifest.json")
    return hashes


# --- towers, adapters, descriptors ------------------------------------------


def save_backbone(path, towers: list[enc.EncoderTower]):
    """Frozen layer weights, biases and a META row (activation code, adaptable, normalize)."""
    sections = {}
    for tower in towers:
        for i, layer in enumerate(tower.layers):
            key = f"{tower.name}/{i}"
            sections[f"{key}/W"] = layer.base.w
            sections[f"{key}/BIAS"] = layer.base.bias
            sections[f"{key}/META"] = np.array(
                [ACTIVATIONS.index(layer.act), float(layer.adaptable), float(tower.normalize)])
    write_features(path, sections)


def load_backbone(path, names=("visual", "text")) -> list[enc.EncoderTower]:
    sections = read_features(path)
    towers = []
    for name in names:
        weights, biases, acts, flags = [], [], [], []
        normalize = True
        i = 0
        while f"{name}/{i}/W" in sections:
            key = f"{name}/{i}"
            if f"{key}/BIAS" not in sections or f"{key}/META" not in sections:
                raise FormatError(f"{path}: layer {key} is incomplete")
            meta = sections[f"{key}/META"][0]
            weights.append(sections[f"{key}/W"])
            biases.append(sections[f"{key}/BIAS"][0])
            acts.append(ACTIVATIONS[int(meta[0])])
            flags.append(bool(meta[1]))
            normalize = bool(meta[2])
            i += 1
        if not weights:
            raise FormatError(f"{path}: no layers for tower {name!r}")
        towers.append(enc.make_tower(weights, biases, acts, flags, normalize=normalize, name=name))
    return towers


def save_adapters(path, towers: list[enc.EncoderTower]):
    """Adapter state: sections ``<tower>/<layer>/{A,B,PHI,HEADER}``.

    HEADER holds (d1, d2, rank, gamma, dropout_p, train_phi).
    """
    sections = {}
    for tower in towers:
        for i, ad in tower.adapters():
            key = f"{tower.name}/{i}"
            sections[f"{key}/A"] = ad.a
            sections[f"{key}/B"] = ad.b
            sections[f"{key}/PHI"] = ad.phi
            sections[f"{key}/HEADER"] = np.array(
                [ad.d1, ad.d2, ad.rank, ad.gamma, ad.dropout_p, float(ad.train_phi)])
    write_features(path, sections)


def load_adapters(path, towers: list[enc.EncoderTower]) -> list[enc.EncoderTower]:
    """Attach stored adapters to adapter-free copies of ``towers``."""
    sections = read_features(path)
    out = []
    for tower in towers:
        layers = []
        for i, layer in enumerate(tower.layers):
            key = f"{tower.name}/{i}"
            adapter = None
            if f"{key}/HEADER" in sections:
                d1, d2, rank, gamma, p, train_phi = sections[f"{key}/HEADER"][0]
                if (int(d1), int(d2)) != layer.base.w.shape:
                    raise FormatError(f"{path}: adapter {key} is {int(d1)}x{int(d2)}, layer is {layer.base.w.shape}")
                adapter = AdaptedLinear(
                    w0=layer.base.w, a=sections[f"{key}/A"], b=sections[f"{key}/B"],
                    phi=sections[f"{key}/PHI"][0], gamma=float(gamma), dropout_p=float(p),
                    train_phi=bool(train_phi),
                )
            layers.append(replace(layer, adapter=adapter))
        out.append(replace(tower, layers=layers))
    return out


def save_descriptors(path, groups: dict[str, list[Descriptor]], meta: dict | None = None):
    """Write fused descriptors per group (e.g. query/target).

    Numeric sections ``<group>/G``, ``<group>/FT``, ``<group>/H`` go to the
    container; ids, labels and text-presence flags go to a JSON sidecar
    (``path`` with suffix ``.json``).
    """
    sections, index = {}, {"groups": {}, "meta": meta or {}}
    for group, descs in groups.items():
        sections[f"{group}/G"] = np.stack([d.g for d in descs])
        sections[f"{group}/FT"] = np.stack([d.f_t if d.f_t is not None else np.zeros_like(d.g) for d in descs])
        sections[f"{group}/H"] = np.stack([d.h for d in descs])
        index["groups"][group] = [
            {"id": d.id, "label": d.label, "has_text": d.f_t is not None} for d in descs
        ]
    write_features(path, sections)
    Path(path).with_suffix(".json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_descriptors(path) -> tuple[dict[str, list[Descriptor]], dict]:
    sections = read_features(path)
    sidecar = Path(path).with_suffix(".json")
    if not sidecar.exists():
        raise FormatError(f"descriptor index {sidecar} not found")
    index = json.loads(sidecar.read_text())
    groups = {}
    for group, entries in index["groups"].items():
        g, ft, h = (sections[f"{group}/{k}"] for k in ("G", "FT", "H"))
        if not len(entries) == len(g) == len(ft) == len(h):
            raise FormatError(f"{path}: group {group!r} row counts disagree with the index")
        groups[group] = [
            Descriptor(h=h[i], g=g[i], f_t=ft[i] if e["has_text"] else None, id=e["id"], label=e["label"])
            for i, e in enumerate(entries)
        ]
    return groups, index.get("meta", {})
