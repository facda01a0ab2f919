"""Dual-encoder multimodal classifier with ITM head and contrastive temperature."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoders import EncoderConfig, ModalRepr, encode_image, encode_text, init_image_encoder, init_text_encoder, pad_tokens
from .fusion import AttFusionParams, FusedRepr, Strategy, fuse_att, fuse_conc
from .losses import LinearHead, MLPHead, Temperature
from .numcore import Param, Tensor


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    patches: np.ndarray
    labels: np.ndarray
    relations: list

    def __len__(self):
        return len(self.labels)


def make_batch(posts) -> Batch:
    ids, mask = pad_tokens([p.tokens for p in posts])
    return Batch(
        ids=ids,
        mask=mask,
        patches=np.stack([p.patches for p in posts]),
        labels=np.array([p.label for p in posts], dtype=np.int64),
        relations=[p.relation for p in posts],
    )


class MultimodalModel:
    def __init__(self, encoder: EncoderConfig, num_classes: int, strategy: Strategy | str, seed: int = 0):
        self.encoder_config = encoder
        self.num_classes = num_classes
        self.strategy = Strategy.parse(strategy)
        rng = np.random.default_rng([seed, 101])
        self.text_encoder = init_text_encoder(encoder, rng)
        self.image_encoder = init_image_encoder(encoder, rng)
        self.fusion = AttFusionParams(encoder.model_dim, encoder.heads, rng) if self.strategy is Strategy.ATT else None
        width = 2 * encoder.model_dim
        self.classifier = LinearHead(width, num_classes, rng, "classifier")
        self.itm_head = MLPHead(width, encoder.model_dim, 2, rng, "itm_head")
        self.temperature = Temperature()

    def params(self) -> list[Param]:
        out = self.text_encoder.params() + self.image_encoder.params()
        if self.fusion is not None:
            out += self.fusion.params()
        return out + self.classifier.params() + self.itm_head.params() + self.temperature.params()

    def snapshot(self) -> dict:
        return {p.name: p.data.copy() for p in self.params()}

    def restore(self, snap: dict) -> None:
        for p in self.params():
            p.data[...] = snap[p.name]

    def encode(self, batch: Batch) -> tuple[ModalRepr, ModalRepr]:
        text = encode_text(batch.ids, self.text_encoder, mask=batch.mask)
        image = encode_image(batch.patches, self.image_encoder)
        return text, image

    def fuse(self, text: ModalRepr, image: ModalRepr) -> FusedRepr:
        if self.strategy is Strategy.ATT:
            return fuse_att(text, image, self.fusion)
        return fuse_conc(text, image)

    def logits(self, batch: Batch) -> Tensor:
        text, image = self.encode(batch)
        return self.classifier(self.fuse(text, image).h)

    def predict(self, posts, batch_size: int = 64) -> np.ndarray:
        preds = []
        with nc.no_grad():
            for i in range(0, len(posts), batch_size):
                batch = make_batch(posts[i : i + batch_size])
                preds.append(self.logits(batch).data.argmax(axis=-1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)

    def match_scores(self, posts, image_posts, batch_size: int = 64) -> np.ndarray:
        """ITM match probability for (text of posts[i], image of image_posts[i])."""
        out = []
        with nc.no_grad():
            for i in range(0, len(posts), batch_size):
                tb = make_batch(posts[i : i + batch_size])
                ib = make_batch(image_posts[i : i + batch_size])
                tb.patches = ib.patches
                text, image = self.encode(tb)
                probs = nc.softmax_rows(self.itm_head(self.fuse(text, image).h)).data
                out.append(probs[:, 1])
        return np.concatenate(out) if out else np.zeros(0)
