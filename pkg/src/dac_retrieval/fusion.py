"""Weighted textual-visual fusion of object descriptors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dac_retrieval.errors import ConfigError, ShapeError
from dac_retrieval.numcore import ACTIVATIONS, activation, l2_normalize

FALLBACK_ALPHA = 0.4

# Tuned fusion weights per (dataset, backbone) pair.
OPTIMAL_ALPHA = {
    ("OS-ESB-core", "B/32"): 0.1,
    ("OS-ESB-core", "L/14"): 0.1,
    ("OS-NTU-core", "B/32"): 0.6,
    ("OS-NTU-core", "L/14"): 0.3,
    ("OS-MN40-core", "B/32"): 0.4,
    ("OS-MN40-core", "L/14"): 0.25,
    ("OS-ABO-core", "B/32"): 0.85,
    ("OS-ABO-core", "L/14"): 0.7,
}


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = FALLBACK_ALPHA
    scheme: str = "add"
    act: str = "tanh"
    # optional L2 normalization of h; cosine ranking is unaffected by it
    post_norm: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.scheme not in ("add", "concat"):
            raise ConfigError(f"unknown fusion scheme {self.scheme!r}")
        if self.act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.act!r}")


@dataclass
class Descriptor:
    h: np.ndarray
    g: np.ndarray
    f_t: np.ndarray | None = None
    id: str = ""
    label: str = ""


def fuse(g, f_t, cfg: FusionConfig, id: str = "", label: str = "") -> Descriptor:
    """Combine the pooled visual embedding ``g`` with a text embedding ``f_t``.

    ``add``: ``act(g + alpha * f_t)``; ``concat``: ``act(g) ++ act(alpha * f_t)``.
    Without ``f_t`` the descriptor is ``act(g)`` (image only), which for
    ``add`` equals the ``alpha = 0`` result exactly.
    """
    g = np.asarray(g, dtype=np.float64)
    if f_t is not None:
        f_t = np.asarray(f_t, dtype=np.float64)
        if f_t.shape != g.shape:
            raise ShapeError(f"text embedding shape {f_t.shape} != visual {g.shape}")

    if cfg.scheme == "add":
        z = g if f_t is None or cfg.alpha == 0.0 else g + cfg.alpha * f_t
        h = activation(z, cfg.act)
    else:
        text_half = np.zeros_like(g) if f_t is None else cfg.alpha * f_t
        h = np.concatenate([activation(g, cfg.act), activation(text_half, cfg.act)])
    if cfg.post_norm:
        h = l2_normalize(h)
    return Descriptor(h=h, g=g, f_t=f_t, id=id, label=label)


def default_alpha(dataset_tag: str, backbone_tag: str) -> float:
    """Tuned alpha for a known dataset/backbone pair, else 0.4.

    Backbone tags are matched loosely, so ``ViT-L/14`` and ``L/14`` agree.
    """
    bb = backbone_tag.replace("ViT-", "")
    return OPTIMAL_ALPHA.get((dataset_tag, bb), FALLBACK_ALPHA)
