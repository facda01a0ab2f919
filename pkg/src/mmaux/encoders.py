"""Toy text and image-patch transformer encoders.

Both encoders prepend a learnable CLS state, add learned positions, run a
pre-norm transformer stack and finish with a layer norm. The CLS state is
then projected to a shared width and unit-normalized; that unit vector is
what the contrastive objective consumes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .errors import ConfigError, InputError, ParseError
from .numcore import Param, Tensor, normalize_rows

__all__ = [
    "EncoderConfig",
    "EncoderParams",
    "ModalRepr",
    "init_text_encoder",
    "init_image_encoder",
    "encode_text",
    "encode_image",
    "normalize_rows",
    "pad_tokens",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class EncoderConfig:
    model_dim: int = 32
    shared_dim: int = 16
    num_layers: int = 2
    heads: int = 4
    ffn_dim: int = 64
    vocab_size: int = 64
    max_len: int = 16
    patch_count: int = 4
    patch_dim: int = 16
    use_positions: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        for name in ("model_dim", "shared_dim", "num_layers", "heads", "ffn_dim", "vocab_size", "max_len", "patch_count", "patch_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class EncoderParams:
    """Parameters of one encoder. ``modality`` is "text" or "image"."""

    def __init__(self, modality: str, config: EncoderConfig, rng: np.random.Generator, prefix: str | None = None):
        if modality not in ("text", "image"):
            raise ConfigError(f"unknown modality {modality!r}")
        self.modality = modality
        self.config = config
        self.prefix = prefix or modality
        d, f, ds = config.model_dim, config.ffn_dim, config.shared_dim
        p = self._param

        if modality == "text":
            self.embed = p("tok_emb", _uniform(rng, (config.vocab_size, d), d))
            self.embed_bias = None
            n_pos = config.max_len + 1
        else:
            self.embed = p("patch_w", _uniform(rng, (config.patch_dim, d), config.patch_dim))
            self.embed_bias = p("patch_b", np.zeros(d))
            n_pos = config.patch_count + 1
        self.pos = p("pos_emb", _uniform(rng, (n_pos, d), d)) if config.use_positions else None
        self.cls = p("cls", _uniform(rng, (d,), d))

        self.layers = []
        for i in range(config.num_layers):
            self.layers.append(
                {
                    "ln1_g": p(f"l{i}.ln1_g", np.ones(d)),
                    "ln1_b": p(f"l{i}.ln1_b", np.zeros(d)),
                    "wq": p(f"l{i}.wq", _uniform(rng, (d, d), d)),
                    "wk": p(f"l{i}.wk", _uniform(rng, (d, d), d)),
                    "wv": p(f"l{i}.wv", _uniform(rng, (d, d), d)),
                    "wo": p(f"l{i}.wo", _uniform(rng, (d, d), d)),
                    "bo": p(f"l{i}.bo", np.zeros(d)),
                    "ln2_g": p(f"l{i}.ln2_g", np.ones(d)),
                    "ln2_b": p(f"l{i}.ln2_b", np.zeros(d)),
                    "w1": p(f"l{i}.w1", _uniform(rng, (d, f), d)),
                    "b1": p(f"l{i}.b1", np.zeros(f)),
                    "w2": p(f"l{i}.w2", _uniform(rng, (f, d), f)),
                    "b2": p(f"l{i}.b2", np.zeros(d)),
                }
            )
        self.lnf_g = p("lnf_g", np.ones(d))
        self.lnf_b = p("lnf_b", np.zeros(d))
        self.proj_w = p("proj_w", _uniform(rng, (d, ds), d))
        self.proj_b = p("proj_b", np.zeros(ds))

    def _param(self, name, value) -> Param:
        return Param(value, f"{self.prefix}.{name}")

    def params(self) -> list[Param]:
        out = [self.embed]
        if self.embed_bias is not None:
            out.append(self.embed_bias)
        if self.pos is not None:
            out.append(self.pos)
        out.append(self.cls)
        for layer in self.layers:
            out.extend(layer.values())
        out.extend([self.lnf_g, self.lnf_b, self.proj_w, self.proj_b])
        return out


def init_text_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    return EncoderParams("text", config, rng)


def init_image_encoder(config: EncoderConfig, rng: np.random.Generator) -> EncoderParams:
    return EncoderParams("image", config, rng)


@dataclass
class ModalRepr:
    """Encoder outputs for one batch.

    seq_states is (N, T+1, d) with the CLS state at position 0. key_mask is
    (N, T+1) booleans, True for real positions (CLS included).
    """

    seq_states: Tensor
    key_mask: np.ndarray
    cls_raw: Tensor
    cls_proj: Tensor
    cls_unit: Tensor

    @property
    def batch_size(self) -> int:
        return self.cls_raw.shape[0]

    def take(self, idx) -> "ModalRepr":
        """Reorder or repeat batch rows (e.g. pair texts with donor images)."""
        idx = np.asarray(idx, dtype=np.int64)
        return ModalRepr(
            seq_states=nc.take_rows(self.seq_states, idx),
            key_mask=self.key_mask[idx],
            cls_raw=nc.take_rows(self.cls_raw, idx),
            cls_proj=nc.take_rows(self.cls_proj, idx),
            cls_unit=nc.take_rows(self.cls_unit, idx),
        )


def _block(x: Tensor, layer: dict, heads: int, key_mask: np.ndarray) -> Tensor:
    h = nc.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
    att = nc.attention(h @ layer["wq"], h @ layer["wk"], h @ layer["wv"], heads, key_mask=key_mask)
    x = x + nc.linear(att, layer["wo"], layer["bo"])
    h = nc.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
    h = nc.linear(nc.gelu(nc.linear(h, layer["w1"], layer["b1"])), layer["w2"], layer["b2"])
    return x + h


def _run_stack(body: Tensor, params: EncoderParams, key_mask: np.ndarray) -> ModalRepr:
    n, t, d = body.shape
    cls = nc.reshape(params.cls, (1, 1, d)) + Tensor(np.zeros((n, 1, d)))
    x = nc.concat([cls, body], axis=1)
    if params.pos is not None:
        x = x + params.pos[: t + 1]
    for layer in params.layers:
        x = _block(x, layer, params.config.heads, key_mask)
    x = nc.layer_norm(x, params.lnf_g, params.lnf_b)
    cls_raw = x[:, 0, :]
    cls_proj = nc.linear(cls_raw, params.proj_w, params.proj_b)
    return ModalRepr(seq_states=x, key_mask=key_mask, cls_raw=cls_raw, cls_proj=cls_proj, cls_unit=normalize_rows(cls_proj))


def pad_tokens(tokens_batch: Sequence[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence. Returns (ids, mask) with mask True on real tokens."""
    width = max((len(s) for s in tokens_batch), default=0)
    ids = np.full((len(tokens_batch), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(tokens_batch), width), dtype=bool)
    for i, seq in enumerate(tokens_batch):
        ids[i, : len(seq)] = seq
        mask[i, : len(seq)] = True
    return ids, mask


def encode_text(tokens_batch, params: EncoderParams, mask: np.ndarray | None = None) -> ModalRepr:
    """Encode token id sequences.

    ``tokens_batch`` is either a list of variable-length sequences (padded
    here) or an int array together with an explicit ``mask``.
    """
    cfg = params.config
    if mask is None:
        ids, mask = pad_tokens(tokens_batch)
    else:
        ids = np.asarray(tokens_batch, dtype=np.int64)
        mask = np.asarray(mask, dtype=bool)
    if ids.ndim != 2 or ids.shape[0] == 0:
        raise InputError("encode_text expects a non-empty batch of sequences")
    if ids.shape[1] > cfg.max_len:
        raise InputError(f"sequence length {ids.shape[1]} exceeds max_len {cfg.max_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise InputError(f"token id out of vocabulary [0, {cfg.vocab_size})")
    body = nc.take_rows(params.embed, ids)
    key_mask = np.concatenate([np.ones((ids.shape[0], 1), dtype=bool), mask], axis=1)
    return _run_stack(body, params, key_mask)


def encode_image(patches_batch, params: EncoderParams) -> ModalRepr:
    cfg = params.config
    patches = patches_batch.data if isinstance(patches_batch, Tensor) else np.asarray(patches_batch, dtype=np.float64)
    if patches.ndim != 3 or patches.shape[0] == 0:
        raise InputError("encode_image expects an (N, P, patch_dim) array")
    if patches.shape[2] != cfg.patch_dim:
        raise InputError(f"patch_dim {patches.shape[2]} does not match encoder patch_dim {cfg.patch_dim}")
    if patches.shape[1] > cfg.patch_count:
        raise InputError(f"{patches.shape[1]} patches exceeds patch_count {cfg.patch_count}")
    src = patches_batch if isinstance(patches_batch, Tensor) else Tensor(patches)
    body = nc.linear(src, params.embed, params.embed_bias)
    key_mask = np.ones(patches.shape[:2][:1] + (patches.shape[1] + 1,), dtype=bool)
    return _run_stack(body, params, key_mask)


# ---------------------------------------------------------------------------
# checkpoints: {"format": "mmaux-checkpoint", "version": 1,
#               "params": {name: {"shape": [...], "values": [flat row-major]}}}


def save_checkpoint(params: Sequence[Param], path) -> None:
    doc = {
        "format": "mmaux-checkpoint",
        "version": 1,
        "params": {p.name: {"shape": list(p.shape), "values": p.data.reshape(-1).tolist()} for p in params},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(params: Sequence[Param], path) -> None:
    """Overwrite ``params`` in place from a checkpoint written by save_checkpoint."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid checkpoint JSON: {exc}") from exc
    stored = doc.get("params", {})
    missing = [p.name for p in params if p.name not in stored]
    if missing:
        raise ParseError(f"checkpoint lacks params: {missing[:5]}")
    for p in params:
        entry = stored[p.name]
        if tuple(entry["shape"]) != p.shape:
            raise ParseError(f"shape mismatch for {p.name}: {entry['shape']} vs {list(p.shape)}")
        p.data[...] = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape)
