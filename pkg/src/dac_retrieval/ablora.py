"""Low-rank adapted linear layer with an additive output bias.

A frozen weight ``w0`` (d1 x d2) is augmented with a trainable low-rank delta
``gamma * B @ A`` and a trainable bias ``phi``::

    o = w0 @ z + gamma * B @ A @ dropout(z) + phi

Dropout only touches the input of the low-rank branch; the frozen path always
sees the clean input. All functions accept a single vector of shape ``(d2,)``
or a batch of row vectors ``(n, d2)``. Gradients of a batch are summed over
rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dac_retrieval.errors import ConfigError, ShapeError, UsageError
from dac_retrieval.numcore import Rng, sample_normal

DEFAULT_RANK = 8
DEFAULT_DROPOUT = 0.25
DEFAULT_GAMMA = 1.0


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(eq=False)
class AdaptedLinear:
    w0: np.ndarray
    a: np.ndarray
    b: np.ndarray
    phi: np.ndarray
    gamma: float = DEFAULT_GAMMA
    dropout_p: float = DEFAULT_DROPOUT
    train_phi: bool = True
    # bumped on every parameter update so stale forward caches are detectable
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.w0 = _frozen(self.w0)
        self.a = np.array(self.a, dtype=np.float64)
        self.b = np.array(self.b, dtype=np.float64)
        self.phi = np.array(self.phi, dtype=np.float64)
        if self.w0.ndim != 2:
            raise ShapeError(f"w0 must be 2-D, got {self.w0.shape}")
        d1, d2 = self.w0.shape
        r = self.a.shape[0] if self.a.ndim == 2 else -1
        if self.a.shape != (r, d2) or self.b.shape != (d1, r) or self.phi.shape != (d1,):
            raise ShapeError(
                f"adapter shapes A{self.a.shape} B{self.b.shape} phi{self.phi.shape} "
                f"do not fit w0{self.w0.shape}"
            )
        _check_config(d1, d2, r, self.dropout_p)

    @property
    def d1(self) -> int:
        return self.w0.shape[0]

    @property
    def d2(self) -> int:
        return self.w0.shape[1]

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def is_identity_delta(self) -> bool:
        """True when the adapter contributes nothing (B and phi all zero)."""
        return not self.b.any() and not self.phi.any()

    def params(self) -> dict[str, np.ndarray]:
        """Trainable tensors, keyed by name."""
        out = {"A": self.a, "B": self.b}
        if self.train_phi:
            out["PHI"] = self.phi
        return out


@dataclass
class AdapterCache:
    layer: AdaptedLinear
    version: int
    z_tilde: np.ndarray
    mask: np.ndarray | None
    az: np.ndarray
    single: bool


@dataclass
class AdapterGrads:
    d_a: np.ndarray
    d_b: np.ndarray
    d_phi: np.ndarray
    d_z: np.ndarray | None = None

    def __iadd__(self, other: AdapterGrads):
        self.d_a = self.d_a + other.d_a
        self.d_b = self.d_b + other.d_b
        self.d_phi = self.d_phi + other.d_phi
        self.d_z = None
        return self

    @classmethod
    def zeros_like(cls, layer: AdaptedLinear) -> AdapterGrads:
        return cls(np.zeros_like(layer.a), np.zeros_like(layer.b), np.zeros_like(layer.phi))


@dataclass(frozen=True)
class MergedLinear:
    """Plain affine layer ``w @ z + bias`` with frozen parameters."""

    w: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w))
        object.__setattr__(self, "bias", _frozen(self.bias))
        if self.w.ndim != 2 or self.bias.shape != (self.w.shape[0],):
            raise ShapeError(f"bias{self.bias.shape} does not fit weight{self.w.shape}")

    def __call__(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.w.shape[1]:
            raise ShapeError(f"input dim {z.shape[-1]} != {self.w.shape[1]}")
        return z @ self.w.T + self.bias


def _check_config(d1, d2, rank, dropout_p):
    if not 1 <= rank < min(d1, d2):
        raise ConfigError(f"rank must satisfy 1 <= rank < min(d1, d2) = {min(d1, d2)}, got {rank}")
    if not 0.0 <= dropout_p < 1.0:
        raise ConfigError(f"dropout_p must lie in [0, 1), got {dropout_p}")


def init_adapter(
    w0,
    rng: Rng,
    rank: int = DEFAULT_RANK,
    gamma: float = DEFAULT_GAMMA,
    dropout_p: float = DEFAULT_DROPOUT,
) -> AdaptedLinear:
    """Attach a fresh adapter to ``w0``: A ~ N(0, 1), B = 0, phi = 0."""
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim != 2:
        raise ShapeError(f"w0 must be 2-D, got {w0.shape}")
    d1, d2 = w0.shape
    _check_config(d1, d2, rank, dropout_p)
    return AdaptedLinear(
        w0=w0,
        a=sample_normal(rng, rank, d2),
        b=np.zeros((d1, rank)),
        phi=np.zeros(d1),
        gamma=float(gamma),
        dropout_p=float(dropout_p),
    )


def forward(layer: AdaptedLinear, z, train_mode: bool = False, rng: Rng | None = None):
    """Return ``(o, cache)``; the cache feeds :func:`backward`."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    zz = np.atleast_2d(z)
    if zz.ndim != 2 or zz.shape[1] != layer.d2:
        raise ShapeError(f"input shape {z.shape} does not match d2={layer.d2}")

    # same op as the frozen layer on the caller's shape, so a zero delta is bit-exact
    base = z @ layer.w0.T
    mask = None
    z_tilde = zz
    if train_mode and layer.dropout_p > 0.0:
        if rng is None:
            raise UsageError("train-mode dropout needs an Rng")
        mask = rng.keep_mask(zz.shape, layer.dropout_p)
        z_tilde = zz * mask / (1.0 - layer.dropout_p)
    az = z_tilde @ layer.a.T

    if not train_mode and layer.is_identity_delta():
        out = base
    else:
        delta = layer.gamma * (az @ layer.b.T) + layer.phi
        out = base + (delta[0] if single else delta)

    return out, AdapterCache(layer, layer.version, z_tilde, mask, az, single)


def backward(layer: AdaptedLinear, cache: AdapterCache, grad_o) -> AdapterGrads:
    if cache is None or cache.layer is not layer:
        raise UsageError("backward called with a cache from another layer")
    if cache.version != layer.version:
        raise UsageError("stale cache: layer parameters changed since forward")
    g = np.atleast_2d(np.asarray(grad_o, dtype=np.float64))
    if g.shape != (cache.az.shape[0], layer.d1):
        raise ShapeError(f"grad_o shape {np.shape(grad_o)} does not match forward output")

    gamma = layer.gamma
    d_phi = g.sum(axis=0) if g.shape[0] > 1 else g[0].copy()
    d_b = gamma * (g.T @ cache.az)
    gb = g @ layer.b
    d_a = gamma * (gb.T @ cache.z_tilde)
    d_branch = gamma * (gb @ layer.a)
    if cache.mask is not None:
        d_branch = d_branch * cache.mask / (1.0 - layer.dropout_p)
    d_z = g @ layer.w0 + d_branch
    return AdapterGrads(d_a, d_b, d_phi, d_z[0] if cache.single else d_z)


def merge(layer: AdaptedLinear) -> MergedLinear:
    """Fold the adapter into a single affine layer."""
    return MergedLinear(w=layer.w0 + layer.gamma * (layer.b @ layer.a), bias=layer.phi.copy())


def as_plain_lora(layer: AdaptedLinear) -> AdaptedLinear:
    """Copy of ``layer`` with phi pinned at zero and excluded from training."""
    return AdaptedLinear(
        w0=layer.w0,
        a=layer.a.copy(),
        b=layer.b.copy(),
        phi=np.zeros_like(layer.phi),
        gamma=layer.gamma,
        dropout_p=layer.dropout_p,
        train_phi=False,
    )
