"""Dual-stream fusion producing the multimodal vector fed to the classifier and ITM head."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import ModalRepr
from .errors import ConfigError, InputError
from .numcore import Param, Tensor


class Strategy(str, enum.Enum):
    CONC = "Conc"
    ATT = "Att"

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        for s in cls:
            if s.value.lower() == str(value).lower():
                return s
        raise ConfigError(f"unknown fusion strategy {value!r} (expected Conc or Att)")


@dataclass
class FusedRepr:
    h: Tensor
    strategy: Strategy


class AttFusionParams:
    """One cross-attention layer: text states query image states."""

    def __init__(self, model_dim: int, heads: int, rng: np.random.Generator, prefix: str = "fusion"):
        if model_dim % heads != 0:
            raise ConfigError(f"model_dim {model_dim} not divisible by heads {heads}")
        d = model_dim
        bound = 1.0 / math.sqrt(d)
        self.heads = heads
        self.model_dim = d

        def p(name, value):
            return Param(value, f"{prefix}.{name}")

        self.wq = p("wq", rng.uniform(-bound, bound, (d, d)))
        self.wk = p("wk", rng.uniform(-bound, bound, (d, d)))
        self.wv = p("wv", rng.uniform(-bound, bound, (d, d)))
        self.wo = p("wo", rng.uniform(-bound, bound, (d, d)))
        self.bo = p("bo", np.zeros(d))
        self.ln_g = p("ln_g", np.ones(d))
        self.ln_b = p("ln_b", np.zeros(d))

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv, self.wo, self.bo, self.ln_g, self.ln_b]


def _check_batch(text: ModalRepr, image: ModalRepr) -> None:
    if text.batch_size != image.batch_size:
        raise InputError(f"batch sizes differ: text {text.batch_size}, image {image.batch_size}")


def fuse_conc(text: ModalRepr, image: ModalRepr) -> FusedRepr:
    _check_batch(text, image)
    return FusedRepr(nc.concat([text.cls_raw, image.cls_raw], axis=-1), Strategy.CONC)


def cross_attend(queries: Tensor, image: ModalRepr, params: AttFusionParams) -> Tensor:
    """Cross-attention layer output for the given text query states (N, Tq, d)."""
    q = queries @ params.wq
    k = image.seq_states @ params.wk
    v = image.seq_states @ params.wv
    att = nc.attention(q, k, v, params.heads, key_mask=image.key_mask)
    return nc.layer_norm(queries + nc.linear(att, params.wo, params.bo), params.ln_g, params.ln_b)


def fuse_att(text: ModalRepr, image: ModalRepr, params: AttFusionParams) -> FusedRepr:
    _check_batch(text, image)
    # queries are position-wise, so only the CLS query is needed for h
    out = cross_attend(text.seq_states[:, :1, :], image, params)
    return FusedRepr(nc.concat([text.cls_raw, out[:, 0, :]], axis=-1), Strategy.ATT)
