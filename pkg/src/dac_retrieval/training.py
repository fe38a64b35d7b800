"""Contrastive adaptation of the dual encoder.

Pooled visual embeddings are classified against text-tower embeddings of the
training class descriptions with a temperature-scaled cross-entropy. Both
towers' adapters receive exact gradients and are updated with plain SGD under
a per-step cosine learning-rate schedule.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from dac_retrieval import encoder as enc
from dac_retrieval.ablora import AdaptedLinear, AdapterGrads
from dac_retrieval.errors import ConfigError, DataError, ShapeError, UsageError
from dac_retrieval.numcore import Rng, log_softmax
from dac_retrieval.retrieval import ObjectRecord, OpenSetDataset

log = logging.getLogger(__name__)

LORA_MODES = ("ablora", "plain_lora", "frozen")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 4
    lr: float = 2e-4
    tau: float = 0.07
    rank: int = 8
    gamma: float = 1.0
    dropout_p: float = 0.25
    seed: int = 7
    lora_mode: str = "ablora"
    # re-normalize pooled g before the loss; off by default (plain mean)
    renorm_g: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        # epochs=0 yields freshly initialized adapters
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.lora_mode not in LORA_MODES:
            raise ConfigError(f"lora_mode must be one of {LORA_MODES}, got {self.lora_mode!r}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")


@dataclass
class TrainReport:
    epoch_loss: list[float] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    checksums: dict[str, str] = field(default_factory=dict)
    n_updates: int = 0
    config: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


# --- objective -------------------------------------------------------------


def contrastive_ce_loss(g_batch, class_w, labels, tau: float):
    """Cross-entropy of ``g @ C^T / tau`` against integer labels.

    Returns ``(loss, d_g, d_c)`` with the exact gradients w.r.t. the pooled
    embeddings and the class-weight rows.
    """
    if not tau > 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    g = np.atleast_2d(np.asarray(g_batch, dtype=np.float64))
    c = np.asarray(class_w, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n, d = g.shape
    n_cls = c.shape[0]
    if c.ndim != 2 or c.shape[1] != d:
        raise ShapeError(f"class weights {c.shape} do not match embeddings {g.shape}")
    if labels.shape != (n,):
        raise ShapeError(f"need {n} labels, got {labels.shape}")
    if n_cls < 2:
        raise ConfigError("need at least 2 classes")
    if np.any(labels < 0) or np.any(labels >= n_cls):
        raise DataError(f"labels must lie in [0, {n_cls})")

    logits = g @ c.T / tau
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per_sample = -logp[np.arange(n), labels]
    resid = np.exp(logp)
    resid[np.arange(n), labels] -= 1.0
    scale = 1.0 / (n * tau)
    d_g = scale * (resid @ c)
    d_c = scale * (resid.T @ g)
    return math.fsum(per_sample) / n, d_g, d_c


def _per_sample_losses(g, c, labels, tau):
    logits = g @ c.T / tau
    return np.array([-log_softmax(row)[y] for row, y in zip(logits, labels)])


# --- backpropagation through the towers -----------------------------------


def _add_grads(acc: dict, new: dict):
    for k, g in new.items():
        if k in acc:
            acc[k] += g
        else:
            acc[k] = AdapterGrads(g.d_a, g.d_b, g.d_phi)


def backprop_object(vt: enc.EncoderTower, view_cache: enc.TowerCache, d_g) -> dict[int, AdapterGrads]:
    """Push the gradient of one pooled embedding back through its views.

    Each of the M views receives ``d_g / M``; gradients are summed over views.
    """
    m = view_cache.out.shape[0]
    d_views = np.repeat(np.atleast_2d(np.asarray(d_g, dtype=np.float64)) / m, m, axis=0)
    return enc.tower_backward(vt, view_cache, d_views)


def forward_backward(vt, tt, views: list, labels, class_desc, tau: float,
                     train_mode: bool = False, rng: Rng | None = None, renorm_g: bool = False):
    """Loss of a batch of objects and the adapter gradients of both towers.

    ``views`` is a list of (M_k, d_in) arrays, ``class_desc`` an (L, d_in)
    array of raw class-description features. Returns
    ``(loss, per_sample_losses, visual_grads, text_grads)``.
    """
    counts = [len(v) for v in views]
    c, tcache = enc.encode(tt, class_desc, train_mode, rng, keep_cache=True)
    f, vcache = enc.encode(vt, np.concatenate(views, axis=0), train_mode, rng, keep_cache=True)
    offsets = np.cumsum([0] + counts)
    g = np.stack([enc.pool_views(f[a:b]) for a, b in zip(offsets[:-1], offsets[1:])])

    if renorm_g:
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        u = g / gn
        loss, d_u, d_c = contrastive_ce_loss(u, c, labels, tau)
        d_g = (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / gn
        per_sample = _per_sample_losses(u, c, labels, tau)
    else:
        loss, d_g, d_c = contrastive_ce_loss(g, c, labels, tau)
        per_sample = _per_sample_losses(g, c, labels, tau)

    d_f = np.concatenate([np.repeat(d_g[k:k + 1] / m, m, axis=0) for k, m in enumerate(counts)])
    vgrads = enc.tower_backward(vt, vcache, d_f) if vt.adapters() else {}
    tgrads = enc.tower_backward(tt, tcache, d_c) if tt.adapters() else {}
    return loss, per_sample, vgrads, tgrads


# --- optimisation ----------------------------------------------------------


def cosine_lr(t: int, total: int, lr0: float) -> float:
    if total < 1:
        raise UsageError("total steps must be >= 1")
    if not 0 <= t <= total:
        raise UsageError(f"step {t} outside [0, {total}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(params: list[AdaptedLinear], grads: list[AdapterGrads], lr: float):
    """In-place ``p -= lr * grad`` for A, B and (unless frozen) phi."""
    if len(params) != len(grads):
        raise UsageError(f"{len(params)} layers but {len(grads)} gradient sets")
    for layer, g in zip(params, grads):
        if g.d_a.shape != layer.a.shape or g.d_b.shape != layer.b.shape or g.d_phi.shape != layer.phi.shape:
            raise UsageError("gradient shapes do not match the adapter")
        layer.a -= lr * g.d_a
        layer.b -= lr * g.d_b
        if layer.train_phi:
            layer.phi -= lr * g.d_phi
        layer.version += 1


def _fisher_yates(n: int, rng: Rng) -> list[int]:
    order = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.integer(i + 1)
        order[i], order[j] = order[j], order[i]
    return order


def adapter_checksums(towers) -> dict[str, str]:
    out = {}
    for tower in towers:
        for i, layer in tower.adapters():
            for name, arr in (("A", layer.a), ("B", layer.b), ("PHI", layer.phi)):
                out[f"{tower.name}/{i}/{name}"] = hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()
    return out


def class_index(ds: OpenSetDataset) -> tuple[list[str], np.ndarray]:
    """Sorted training labels and the matching class-description matrix."""
    labels = ds.seen_labels
    missing = [lab for lab in labels if lab not in ds.class_descriptions]
    if missing:
        raise DataError(f"no class description for training labels {missing}")
    return labels, np.stack([np.asarray(ds.class_descriptions[lab], dtype=np.float64) for lab in labels])


def train(dataset: OpenSetDataset, cfg: TrainConfig, vt: enc.EncoderTower | None = None,
          tt: enc.EncoderTower | None = None, backbone_seed: int = 0):
    """Adapt both towers on the training split.

    Returns ``(visual_tower, text_tower, report)``. Without explicit towers a
    synthetic backbone matching the dataset's input dimension is built.
    Runs are deterministic for a fixed ``cfg.seed``.
    """
    objs: list[ObjectRecord] = dataset.train
    if not objs:
        raise DataError("training split is empty")
    labels, class_desc = class_index(dataset)
    if len(labels) < 2:
        raise DataError("training split needs at least 2 classes")
    if vt is None or tt is None:
        vt, tt = enc.make_synthetic_backbone(objs[0].views.shape[1], seed=backbone_seed)

    rng = Rng(cfg.seed)
    adapter_kw = dict(rank=cfg.rank, gamma=cfg.gamma, dropout_p=cfg.dropout_p, mode=cfg.lora_mode)
    vt = enc.attach_adapters(enc.strip_adapters(vt), rng, **adapter_kw)
    tt = enc.attach_adapters(enc.strip_adapters(tt), rng, **adapter_kw)
    v_layers = vt.adapters()
    t_layers = tt.adapters()
    trainable = [a for _, a in v_layers] + [a for _, a in t_layers]

    y = np.array([labels.index(o.label) for o in objs])
    n = len(objs)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    report = TrainReport(config=asdict(cfg))
    step = 0
    for epoch in range(cfg.epochs):
        order = _fisher_yates(n, rng)
        losses = np.zeros(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = cosine_lr(step, total, cfg.lr)
            _, per_sample, vg, tg = forward_backward(
                vt, tt, [objs[i].views for i in idx], y[idx], class_desc, cfg.tau,
                train_mode=True, rng=rng, renorm_g=cfg.renorm_g,
            )
            losses[idx] = per_sample
            if trainable:
                grads = [vg[i] for i, _ in v_layers] + [tg[i] for i, _ in t_layers]
                sgd_step(trainable, grads, lr)
                report.n_updates += 1
            report.lr_trace.append(lr)
            step += 1
        # exact sum: the epoch mean does not depend on batch order
        report.epoch_loss.append(math.fsum(losses) / n)
        log.info("epoch %d/%d  loss %.6f", epoch + 1, cfg.epochs, report.epoch_loss[-1])
    report.checksums = adapter_checksums([vt, tt])
    return vt, tt, report


# --- gradient checking -------------------------------------------------------


def relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """Norm-wise relative error ``max|a - n| / max(max|a|, max|n|, floor)``."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def numerical_grad(fn, param: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. ``param`` (perturbed in place)."""
    grad = np.zeros_like(param)
    flat = param.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return grad


def grad_check(fn, params: list[np.ndarray], analytic: list[np.ndarray], eps: float = 1e-5) -> float:
    """Largest relative error between analytic gradients and central differences.

    ``fn`` must evaluate the loss at the current parameter values with
    dropout disabled.
    """
    if len(params) != len(analytic):
        raise UsageError("one analytic gradient per parameter is required")
    return max(relative_error(a, numerical_grad(fn, p, eps)) for p, a in zip(params, analytic))


def pipeline_grad_check(vt, tt, views, labels, class_desc, tau: float, eps: float = 1e-5,
                        renorm_g: bool = False, corrupt: float = 1.0) -> float:
    """Grad-check every adapter tensor of both towers on one batch.

    ``corrupt`` scales the analytic gradients, for testing the harness.
    """
    _, _, vg, tg = forward_backward(vt, tt, views, labels, class_desc, tau, renorm_g=renorm_g)

    def fn():
        return forward_backward(vt, tt, views, labels, class_desc, tau, renorm_g=renorm_g)[0]

    params, analytic = [], []
    for tower, grads in ((vt, vg), (tt, tg)):
        for i, layer in tower.adapters():
            g = grads[i]
            params += [layer.a, layer.b]
            analytic += [corrupt * g.d_a, corrupt * g.d_b]
            if layer.train_phi:
                params.append(layer.phi)
                analytic.append(corrupt * g.d_phi)
    return grad_check(fn, params, analytic, eps)
