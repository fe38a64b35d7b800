"""Glue between trained towers, fusion and evaluation."""

from __future__ import annotations

import numpy as np

from dac_retrieval import encoder as enc
from dac_retrieval.fusion import Descriptor, FusionConfig, fuse
from dac_retrieval.retrieval import MetricsReport, ObjectRecord, evaluate


def embed_objects(vt: enc.EncoderTower, tt: enc.EncoderTower, objects: list[ObjectRecord],
                  cfg: FusionConfig) -> list[Descriptor]:
    """Eval-mode descriptors for a list of objects.

    Objects without a description vector, and every object when
    ``cfg.alpha == 0``, fall back to image-only descriptors.
    """
    if not objects:
        return []
    m = objects[0].views.shape[0]
    if all(o.views.shape[0] == m for o in objects):
        f, _ = enc.encode(vt, np.concatenate([o.views for o in objects]))
        gs = [enc.pool_views(f[k * m:(k + 1) * m]) for k in range(len(objects))]
    else:
        gs = [enc.encode_object(vt, o.views) for o in objects]

    with_text = [k for k, o in enumerate(objects) if o.description is not None and cfg.alpha > 0]
    texts = {}
    if with_text:
        ft, _ = enc.encode(tt, np.stack([objects[k].description for k in with_text]))
        texts = dict(zip(with_text, ft))
    return [fuse(g, texts.get(k), cfg, id=o.id, label=o.label) for k, (g, o) in enumerate(zip(gs, objects))]


def evaluate_towers(vt, tt, query: list[ObjectRecord], target: list[ObjectRecord], cfg: FusionConfig,
                    ndcg_cutoff: int | None = None) -> MetricsReport:
    return evaluate(embed_objects(vt, tt, query, cfg), embed_objects(vt, tt, target, cfg), ndcg_cutoff)
