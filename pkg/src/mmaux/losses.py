"""Training objective: contrastive (ITC), matching (ITM), weighted CE, and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DegenerateBatchError, InputError
from .fusion import FusedRepr
from .numcore import Param, Tensor

TAU_MIN = 1e-3
TAU_MAX = 10.0
TAU_INIT = math.log(0.07)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.0
    lambda3: float = 0.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")

    def as_tuple(self) -> tuple:
        return (self.lambda1, self.lambda2, self.lambda3)


PRESETS = {
    "base": LossWeights(1.0, 0.0, 0.0),
    "C": LossWeights(0.9, 0.1, 0.0),
    "M": LossWeights(0.9, 0.0, 0.1),
    "CM": LossWeights(0.8, 0.1, 0.1),
}
_PRESET_ALIASES = {"+base": "base", "+C": "C", "+M": "M", "+C+M": "CM", "C+M": "CM"}


def preset(name: str) -> LossWeights:
    key = _PRESET_ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


class Temperature:
    """Learnable log-temperature. Effective temperature exp(tau) is clamped at use sites."""

    def __init__(self, tau: float = TAU_INIT, name: str = "tau"):
        self.tau = Param(np.array(tau), name)

    def params(self) -> list[Param]:
        return [self.tau]

    def effective(self) -> Tensor:
        return nc.clip(nc.exp(self.tau), TAU_MIN, TAU_MAX)


def itc_logits(L_unit: Tensor, I_unit: Tensor, temp: Temperature, mode: str = "divide") -> Tensor:
    sims = L_unit @ nc.swap_last(I_unit)
    t = temp.effective()
    if mode == "divide":
        return sims / t
    if mode == "multiply":
        return sims * t
    raise ConfigError(f"unknown temperature mode {mode!r}")


def itc_loss(L_unit: Tensor, I_unit: Tensor, temp: Temperature, mode: str = "divide", unit_tol: float = 1e-6) -> Tensor:
    """Symmetric in-batch contrastive loss: mean of text->image and image->text CE on the diagonal.

    ``mode="divide"`` scales similarities by 1/exp(tau); ``"multiply"`` uses exp(tau) as a
    logit scale instead.
    """
    n = L_unit.shape[0]
    if n < 2:
        raise DegenerateBatchError("ITC needs at least 2 posts in the batch")
    if I_unit.shape != L_unit.shape:
        raise InputError(f"text/image shapes differ: {L_unit.shape} vs {I_unit.shape}")
    for name, t in (("text", L_unit), ("image", I_unit)):
        norms = np.sqrt((t.data**2).sum(axis=-1))
        if np.any(np.abs(norms - 1.0) > unit_tol):
            raise InputError(f"{name} rows are not unit-norm")
    logits = itc_logits(L_unit, I_unit, temp, mode)
    diag = (np.arange(n), np.arange(n))
    l1 = -nc.mean(nc.log_softmax(logits)[diag])
    l2 = -nc.mean(nc.log_softmax(nc.swap_last(logits))[diag])
    return (l1 + l2) * 0.5


@dataclass
class ItmBatch:
    image_indices: np.ndarray
    match_labels: np.ndarray


def itm_perturb(batch_size: int, replace_prob: float, rng: np.random.Generator) -> ItmBatch:
    """Per post, with probability ``replace_prob`` swap in another post's image.

    Labels: 1 = matched (own image), 0 = mismatched (donor image).
    """
    if batch_size < 2:
        raise DegenerateBatchError("ITM needs at least 2 posts in the batch")
    if not 0.0 <= replace_prob <= 1.0:
        raise ConfigError(f"replace_prob must be in [0, 1], got {replace_prob}")
    replace = rng.random(batch_size) < replace_prob
    # donor drawn from the other N-1 posts: offset in [1, N-1] modulo N
    offsets = rng.integers(1, batch_size, size=batch_size)
    own = np.arange(batch_size)
    indices = np.where(replace, (own + offsets) % batch_size, own)
    return ItmBatch(image_indices=indices.astype(np.int64), match_labels=(~replace).astype(np.int64))


class LinearHead:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str):
        bound = 1.0 / math.sqrt(in_dim)
        self.w = Param(rng.uniform(-bound, bound, (in_dim, out_dim)), f"{name}.w")
        self.b = Param(np.zeros(out_dim), f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return nc.linear(x, self.w, self.b)

    def params(self) -> list[Param]:
        return [self.w, self.b]


class MLPHead:
    """Two-layer GELU head; used where the target is an interaction of both halves of h."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator, name: str):
        self.hidden = LinearHead(in_dim, hidden, rng, f"{name}.hidden")
        self.out = LinearHead(hidden, out_dim, rng, f"{name}.out")

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(nc.gelu(self.hidden(x)))

    def params(self) -> list[Param]:
        return self.hidden.params() + self.out.params()


def _nll_mean(logits: Tensor, targets: np.ndarray) -> Tensor:
    logp = nc.log_softmax(logits)
    return -nc.mean(logp[(np.arange(len(targets)), targets)])


def itm_loss(h_perturbed: FusedRepr | Tensor, itm: ItmBatch, head) -> Tensor:
    """Mean binary cross-entropy of the 2-way match head. Class 1 = match."""
    h = h_perturbed.h if isinstance(h_perturbed, FusedRepr) else h_perturbed
    if h.shape[0] != len(itm.match_labels):
        raise InputError("ITM batch and fused representation differ in size")
    return _nll_mean(head(h), np.asarray(itm.match_labels, dtype=np.int64))


@dataclass
class ClassWeights:
    weights: np.ndarray


def balanced_class_weights(label_counts: Sequence[int], in_use: Sequence[bool] | None = None) -> ClassWeights:
    """w_c = N_total / (K * N_c), K counting only classes in use.

    Classes not in use get weight 0. By default every class is in use.
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    used = np.ones(len(counts), dtype=bool) if in_use is None else np.asarray(in_use, dtype=bool)
    if np.any(counts[used] <= 0):
        raise ConfigError(f"zero count for an in-use class: {label_counts}")
    k = int(used.sum())
    if k == 0:
        raise ConfigError("no classes in use")
    total = counts[used].sum()
    w = np.zeros(len(counts))
    w[used] = total / (k * counts[used])
    return ClassWeights(w)


def ce_loss(logits: Tensor, labels, class_weights: ClassWeights | None = None) -> Tensor:
    """Class-weighted cross-entropy normalized by the summed weights of the batch's labels."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.ndim != 1 or len(labels) != logits.shape[0]:
        raise InputError("labels must be a vector aligned with logits rows")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise InputError(f"label out of range [0, {k})")
    logp = nc.log_softmax(logits)[(np.arange(len(labels)), labels)]
    if class_weights is None:
        return -nc.mean(logp)
    w = class_weights.weights[labels]
    total = float(w.sum())
    if total <= 0:
        raise InputError("batch labels carry zero total class weight")
    return -nc.sum(logp * Tensor(w / total))


def joint_loss(l_ce, l_itc, l_itm, w: LossWeights):
    """lambda1*CE + lambda2*ITC + lambda3*ITM; absent or zero-weighted terms are dropped."""
    out = l_ce * w.lambda1
    if w.lambda2 and l_itc is not None:
        out = out + l_itc * w.lambda2
    if w.lambda3 and l_itm is not None:
        out = out + l_itm * w.lambda3
    return out
