"""Dual-tower embedding network built from frozen affine layers.

Each tower maps raw feature vectors to unit-norm embeddings. Layers flagged
``adaptable`` may carry an :class:`~dac_retrieval.ablora.AdaptedLinear`
whose frozen weight is the layer's own weight; the layer's frozen bias is
added on top of the adapted output.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from dac_retrieval import ablora
from dac_retrieval.ablora import AdaptedLinear, AdapterGrads, MergedLinear
from dac_retrieval.errors import ConfigError, DegenerateVectorError, ShapeError, UsageError
from dac_retrieval.numcore import DEGENERATE_NORM, Rng, activation, activation_grad


@dataclass
class TowerLayer:
    base: MergedLinear
    act: str = "identity"
    adaptable: bool = False
    adapter: AdaptedLinear | None = None

    @property
    def in_dim(self) -> int:
        return self.base.w.shape[1]

    @property
    def out_dim(self) -> int:
        return self.base.w.shape[0]


@dataclass
class EncoderTower:
    layers: list[TowerLayer]
    # per-view L2 normalization of the output; CLIP convention
    normalize: bool = True
    name: str = "tower"

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("a tower needs at least one layer")
        for i, (prev, nxt) in enumerate(zip(self.layers, self.layers[1:])):
            if prev.out_dim != nxt.in_dim:
                raise ShapeError(f"layer {i} outputs {prev.out_dim} but layer {i + 1} takes {nxt.in_dim}")
        for i, layer in enumerate(self.layers):
            if layer.adapter is None:
                continue
            if not layer.adaptable:
                raise ConfigError(f"layer {i} carries an adapter but is not adaptable")
            if not np.array_equal(layer.adapter.w0, layer.base.w):
                raise ConfigError(f"layer {i}: adapter w0 differs from the frozen weight")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def adapters(self) -> list[tuple[int, AdaptedLinear]]:
        return [(i, l.adapter) for i, l in enumerate(self.layers) if l.adapter is not None]


@dataclass
class _LayerCache:
    pre: np.ndarray
    post: np.ndarray
    adapter_cache: ablora.AdapterCache | None


@dataclass
class TowerCache:
    tower: EncoderTower
    layers: list[_LayerCache] = field(default_factory=list)
    out: np.ndarray | None = None
    norms: np.ndarray | None = None
    single: bool = False


def encode(tower: EncoderTower, x, train_mode: bool = False, rng: Rng | None = None,
           keep_cache: bool | None = None):
    """Embed one vector ``(d_in,)`` or a batch of rows ``(n, d_in)``.

    Returns ``(embedding, cache)``. The cache is kept in train mode, or when
    ``keep_cache`` is set explicitly (used for dropout-free gradient checks);
    otherwise it is ``None``.
    """
    keep = train_mode if keep_cache is None else keep_cache
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = np.atleast_2d(x)
    if h.ndim != 2 or h.shape[1] != tower.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match tower input dim {tower.in_dim}")

    cache = TowerCache(tower, single=single) if keep else None
    for layer in tower.layers:
        if layer.adapter is not None:
            pre, acache = ablora.forward(layer.adapter, h, train_mode, rng)
            if layer.base.bias.any():
                pre = pre + layer.base.bias
        else:
            pre, acache = layer.base(h), None
        post = activation(pre, layer.act)
        if cache is not None:
            cache.layers.append(_LayerCache(pre, post, acache))
        h = post

    norms = None
    if tower.normalize:
        norms = np.linalg.norm(h, axis=1)
        if not np.all(norms >= DEGENERATE_NORM):
            raise DegenerateVectorError(f"{tower.name}: embedding collapsed to zero before normalization")
        h = h / norms[:, None]
    if cache is not None:
        cache.out = h
        cache.norms = norms
    return (h[0] if single else h), cache


def tower_backward(tower: EncoderTower, cache: TowerCache, d_out) -> dict[int, AdapterGrads]:
    """Backpropagate ``d_out`` (gradient w.r.t. the embedding) into every adapter.

    Returns a dict keyed by layer index; gradients are summed over the rows
    of the batch that produced ``cache``.
    """
    if cache is None or cache.tower is not tower or len(cache.layers) != len(tower.layers):
        raise UsageError("tower cache does not belong to this tower")
    d = np.atleast_2d(np.asarray(d_out, dtype=np.float64))
    if d.shape != cache.out.shape:
        raise ShapeError(f"gradient shape {np.shape(d_out)} does not match embedding batch {cache.out.shape}")

    if tower.normalize:
        u = cache.out
        # Jacobian of y / |y| is (I - u u^T) / |y|
        d = (d - u * np.sum(u * d, axis=1, keepdims=True)) / cache.norms[:, None]

    grads: dict[int, AdapterGrads] = {}
    for i in range(len(tower.layers) - 1, -1, -1):
        layer = tower.layers[i]
        lc = cache.layers[i]
        d_pre = d * activation_grad(lc.pre, lc.post, layer.act)
        if layer.adapter is not None:
            g = ablora.backward(layer.adapter, lc.adapter_cache, d_pre)
            d = g.d_z
            grads[i] = g
        elif i > 0:
            d = d_pre @ layer.base.w
    return grads


def pool_views(view_embs) -> np.ndarray:
    """Arithmetic mean of per-view embeddings; not re-normalized.

    Values are sorted per coordinate before summation, which makes the
    result bit-identical under any permutation of the views.
    """
    arr = np.asarray(view_embs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise UsageError("pool_views needs a nonempty list of equal-length vectors")
    return np.sort(arr, axis=0).sum(axis=0) / arr.shape[0]


def encode_object(vt: EncoderTower, views, train_mode: bool = False, rng: Rng | None = None) -> np.ndarray:
    views = np.asarray(views, dtype=np.float64)
    if views.ndim != 2 or views.shape[0] < 1:
        raise ShapeError(f"a view set must be an (M, d_in) array with M >= 1, got {views.shape}")
    embs, _ = encode(vt, views, train_mode, rng, keep_cache=False)
    return pool_views(embs)


def build_class_weights(tt: EncoderTower, descriptions) -> np.ndarray:
    """Encode L class-description vectors into an (L, d) classifier matrix."""
    desc = np.asarray(descriptions, dtype=np.float64)
    if desc.ndim != 2 or desc.shape[0] < 2:
        raise ConfigError("contrastive training needs at least 2 class descriptions")
    if len(np.unique(desc, axis=0)) < desc.shape[0]:
        warnings.warn("duplicate class descriptions produce identical classifier rows", stacklevel=2)
    weights, _ = encode(tt, desc)
    return weights


# --- construction helpers -------------------------------------------------


def make_tower(weights, biases=None, acts=None, adaptable=None, normalize=True, name="tower") -> EncoderTower:
    n = len(weights)
    biases = biases if biases is not None else [np.zeros(np.shape(w)[0]) for w in weights]
    acts = acts if acts is not None else ["identity"] * n
    adaptable = adaptable if adaptable is not None else [True] * n
    layers = [
        TowerLayer(MergedLinear(w, b), act, bool(ad))
        for w, b, act, ad in zip(weights, biases, acts, adaptable)
    ]
    return EncoderTower(layers, normalize=normalize, name=name)


def make_synthetic_backbone(in_dim: int, out_dim: int = 16, seed: int = 0,
                            normalize: bool = True) -> tuple[EncoderTower, EncoderTower]:
    """Seeded stand-in for a pretrained dual encoder.

    Layer 0 is a random rotation of the input followed by tanh; layer 1
    rotates back, keeps the leading ``out_dim`` input coordinates and mixes
    them with a random ``out_dim x out_dim`` rotation (scaled by 0.3). On
    clean inputs the tower is thus a near-linear readout of those leading
    coordinates. Both layers are adaptable and both towers share the
    weights, so they start out aligned.
    """
    if not 1 <= out_dim <= in_dim:
        raise ConfigError(f"out_dim must lie in [1, in_dim={in_dim}], got {out_dim}")
    rng = Rng(seed)
    rot_in, _ = np.linalg.qr(rng.normal((in_dim, in_dim)))
    rot_out, _ = np.linalg.qr(rng.normal((out_dim, out_dim)))
    w1 = rot_in
    w2 = 0.3 * rot_out @ rot_in.T[:out_dim]
    layer_kw = dict(acts=["tanh", "identity"], adaptable=[True, True], normalize=normalize)
    return (make_tower([w1, w2], name="visual", **layer_kw),
            make_tower([w1, w2], name="text", **layer_kw))


def attach_adapters(tower: EncoderTower, rng: Rng, rank: int = ablora.DEFAULT_RANK,
                    gamma: float = ablora.DEFAULT_GAMMA, dropout_p: float = ablora.DEFAULT_DROPOUT,
                    mode: str = "ablora") -> EncoderTower:
    """Return a copy of ``tower`` with fresh adapters on every adaptable layer.

    ``mode`` is ``ablora``, ``plain_lora`` (phi frozen at zero) or ``frozen``
    (no adapters at all).
    """
    if mode not in ("ablora", "plain_lora", "frozen"):
        raise ConfigError(f"unknown lora mode {mode!r}")
    layers = []
    for layer in tower.layers:
        adapter = None
        if layer.adaptable and mode != "frozen":
            adapter = ablora.init_adapter(layer.base.w, rng, rank=rank, gamma=gamma, dropout_p=dropout_p)
            if mode == "plain_lora":
                adapter = ablora.as_plain_lora(adapter)
        layers.append(replace(layer, adapter=adapter))
    return replace(tower, layers=layers)


def strip_adapters(tower: EncoderTower) -> EncoderTower:
    return replace(tower, layers=[replace(l, adapter=None) for l in tower.layers])


def merge_tower(tower: EncoderTower) -> EncoderTower:
    """Fold every adapter into its layer, giving an adapter-free tower."""
    layers = []
    for layer in tower.layers:
        if layer.adapter is None:
            layers.append(replace(layer))
            continue
        merged = ablora.merge(layer.adapter)
        layers.append(replace(layer, base=MergedLinear(merged.w, merged.bias + layer.base.bias), adapter=None))
    return replace(tower, layers=layers)
