"""Training loop: Adam on the weighted joint loss, early stopping on validation loss,
multi-seed aggregation and training-fraction sweeps."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import losses as L
from . import metrics
from . import numcore as nc
from .encoders import EncoderConfig
from .errors import ConfigError
from .fusion import Strategy
from .model import Batch, MultimodalModel, make_batch
from .synthdata import Dataset, subsample

log = logging.getLogger(__name__)

COMPONENTS = ("ce", "itc", "itm", "joint")


@dataclass(frozen=True)
class TrainConfig:
    strategy: str = "Att"
    weights: L.LossWeights = L.PRESETS["base"]
    preset: str = "base"
    learning_rate: float = 1e-4
    max_epochs: int = 20
    patience: int = 3
    batch_size: int = 16
    seed: int = 0
    data_fraction: float = 1.0
    model_dim: int = 32
    shared_dim: int = 16
    num_layers: int = 2
    heads: int = 4
    ffn_dim: int = 64
    replace_prob: float = 0.5
    temperature_mode: str = "divide"
    val_criterion: str = "joint"

    def __post_init__(self):
        Strategy.parse(self.strategy)
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.batch_size < 2 and (self.weights.lambda2 > 0 or self.weights.lambda3 > 0):
            raise ConfigError("batch_size must be >= 2 when ITC or ITM is enabled")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ConfigError("data_fraction must lie in (0, 1]")
        if self.temperature_mode not in ("divide", "multiply"):
            raise ConfigError("temperature_mode must be 'divide' or 'multiply'")
        if self.val_criterion not in ("joint", "ce"):
            raise ConfigError("val_criterion must be 'joint' or 'ce'")

    @classmethod
    def from_preset(cls, name: str, **kw) -> "TrainConfig":
        key = L._PRESET_ALIASES.get(name, name)
        return cls(weights=L.preset(key), preset=key, **kw)

    def with_preset(self, name: str) -> "TrainConfig":
        key = L._PRESET_ALIASES.get(name, name)
        return replace(self, weights=L.preset(key), preset=key)

    def encoder_config(self, data: Dataset) -> EncoderConfig:
        c = data.config
        return EncoderConfig(
            model_dim=self.model_dim,
            shared_dim=self.shared_dim,
            num_layers=self.num_layers,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            vocab_size=c.vocab_size,
            max_len=c.max_len,
            patch_count=c.patch_count,
            patch_dim=c.patch_dim,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        return d


@dataclass
class RunRecord:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    test: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_json(self) -> dict:
        return {"config": self.config, "epochs": self.epochs, "best_epoch": self.best_epoch, "test": self.test, "seconds": self.seconds}


class _Meter:
    def __init__(self):
        self.sums = {"ce": 0.0, "itc": 0.0, "itm": 0.0}
        self.counts = {"ce": 0, "itc": 0, "itm": 0}

    def add(self, name, value, n):
        self.sums[name] += value * n
        self.counts[name] += n

    def result(self, w: L.LossWeights) -> dict:
        out = {k: (self.sums[k] / self.counts[k] if self.counts[k] else 0.0) for k in self.sums}
        out["joint"] = w.lambda1 * out["ce"] + w.lambda2 * out["itc"] + w.lambda3 * out["itm"]
        return out


def batch_loss(model: MultimodalModel, batch: Batch, config: TrainConfig, class_weights, itm_rng):
    """Per-batch loss terms. Returns (joint Tensor, {name: float or None})."""
    w = config.weights
    text, image = model.encode(batch)
    fused = model.fuse(text, image)
    l_ce = L.ce_loss(model.classifier(fused.h), batch.labels, class_weights)
    l_itc = l_itm = None
    n = len(batch)
    if w.lambda2 > 0 and n >= 2:
        l_itc = L.itc_loss(text.cls_unit, image.cls_unit, model.temperature, mode=config.temperature_mode)
    if w.lambda3 > 0 and n >= 2:
        itm = L.itm_perturb(n, config.replace_prob, itm_rng)
        # second fusion pass on the perturbed pairing; encoders are shared
        perturbed = model.fuse(text, image.take(itm.image_indices))
        l_itm = L.itm_loss(perturbed, itm, model.itm_head)
    total = L.joint_loss(l_ce, l_itc, l_itm, w)
    parts = {"ce": l_ce.item(), "itc": None if l_itc is None else l_itc.item(), "itm": None if l_itm is None else l_itm.item()}
    return total, parts


def _batches(posts, size):
    for i in range(0, len(posts), size):
        yield make_batch(posts[i : i + size])


def _class_weights(train: Dataset, k: int) -> L.ClassWeights:
    counts = np.bincount(train.labels, minlength=k)
    cw = L.balanced_class_weights(counts, in_use=counts > 0)
    # classes never seen in training only matter on validation batches; weight them neutrally
    cw.weights[counts == 0] = 1.0
    return cw


def evaluate_losses(model, data: Dataset, config: TrainConfig, class_weights) -> dict:
    """Mean loss components over ``data`` in fixed order with a fixed ITM perturbation stream."""
    meter = _Meter()
    itm_rng = np.random.default_rng([config.seed, 3])
    with nc.no_grad():
        for batch in _batches(data.posts, config.batch_size):
            _, parts = batch_loss(model, batch, config, class_weights, itm_rng)
            for name, v in parts.items():
                if v is not None:
                    meter.add(name, v, len(batch))
    return meter.result(config.weights)


def itm_probe_accuracy(model: MultimodalModel, data: Dataset, seed: int = 0) -> float | None:
    """Match/mismatch accuracy on an easy probe.

    Every post is scored once with its own image and once with a donor image
    from a post in a different topic group, so the mismatch is detectable
    from shared content. Returns None when no such donor exists.
    """
    posts = data.posts
    k = data.config.num_classes
    groups = np.array([p.topic // k for p in posts])
    rng = np.random.default_rng([seed, 11])
    donors = []
    for i, g in enumerate(groups):
        pool = np.flatnonzero(groups != g)
        if pool.size == 0:
            return None
        donors.append(posts[int(pool[rng.integers(pool.size)])])
    own = model.match_scores(posts, posts)
    other = model.match_scores(posts, donors)
    correct = (own > 0.5).sum() + (other <= 0.5).sum()
    return float(correct / (2 * len(posts)))


def evaluate_metrics(model: MultimodalModel, data: Dataset) -> dict:
    preds = model.predict(data.posts)
    golds = data.labels
    k = data.config.num_classes
    breakdown = metrics.accuracy_by_relation(preds, golds, data.relations)
    rel = breakdown.to_json()
    return {
        "weighted_f1": metrics.weighted_f1(preds, golds, k),
        "accuracy": float((preds == golds).mean()),
        "per_class_f1": metrics.per_class_f1(preds, golds, k).tolist(),
        "per_relation_acc": {r: v["accuracy"] for r, v in rel.items()},
        "per_relation_support": {r: v["support"] for r, v in rel.items()},
    }


def train(config: TrainConfig, train_data: Dataset, val_data: Dataset, test_data: Dataset | None = None):
    """Train one model. Returns (model restored to its best-validation epoch, RunRecord)."""
    if len(train_data) == 0 or len(val_data) == 0:
        raise ConfigError("train and validation sets must be non-empty")
    start = time.perf_counter()
    if config.data_fraction < 1.0:
        train_data = subsample(train_data, config.data_fraction, seed=config.seed)
    k = train_data.config.num_classes
    class_weights = _class_weights(train_data, k)
    model = MultimodalModel(config.encoder_config(train_data), k, config.strategy, seed=config.seed)
    params = model.params()
    adam = nc.AdamState(learning_rate=config.learning_rate)
    itm_rng = np.random.default_rng([config.seed, 2])
    record = RunRecord(config=config.to_dict())

    best = (np.inf, -1, None)
    stale = 0
    for epoch in range(config.max_epochs):
        order = np.random.default_rng([config.seed, epoch, 7]).permutation(len(train_data))
        posts = [train_data.posts[i] for i in order]
        meter = _Meter()
        for batch in _batches(posts, config.batch_size):
            nc.zero_grads(params)
            total, parts = batch_loss(model, batch, config, class_weights, itm_rng)
            total.backward()
            nc.adam_step(params, adam)
            for name, v in parts.items():
                if v is not None:
                    meter.add(name, v, len(batch))
        train_losses = meter.result(config.weights)
        val_losses = evaluate_losses(model, val_data, config, class_weights)
        record.epochs.append({"train": train_losses, "val": val_losses})
        crit = val_losses["joint"] if config.val_criterion == "joint" else val_losses["ce"]
        log.debug("epoch %d train %.4f val %.4f", epoch, train_losses["joint"], crit)
        if crit < best[0]:
            best = (crit, epoch, model.snapshot())
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.restore(best[2])
    record.best_epoch = best[1]
    if test_data is not None and len(test_data):
        record.test = evaluate_metrics(model, test_data)
        if config.weights.lambda3 > 0:
            record.test["itm_probe_acc"] = itm_probe_accuracy(model, test_data, seed=config.seed)
    record.seconds = time.perf_counter() - start
    return model, record


# ---------------------------------------------------------------------------
# multi-seed and sweeps


@dataclass
class MultiSeedResult:
    records: list
    aggregate: dict


def _aggregate(records: list) -> dict:
    f1s = [r.test["weighted_f1"] for r in records]
    mean, std = metrics.aggregate(f1s)
    rel_keys = sorted({k for r in records for k in r.test.get("per_relation_acc", {})})
    per_rel = {}
    for key in rel_keys:
        vals = [r.test["per_relation_acc"][key] for r in records if key in r.test["per_relation_acc"]]
        m, s = metrics.aggregate(vals)
        per_rel[key] = {"mean": m, "std": s}
    out = {"seeds": [r.config["seed"] for r in records], "f1s": f1s, "mean_f1": mean, "std_f1": std, "per_relation_acc": per_rel}
    probes = [r.test["itm_probe_acc"] for r in records if r.test.get("itm_probe_acc") is not None]
    if probes:
        out["itm_probe_acc"] = metrics.aggregate(probes)[0]
    return out


def _run_one(args):
    config, train_data, val_data, test_data = args
    return train(config, train_data, val_data, test_data)[1]


def run_multi_seed(config: TrainConfig, seeds, train_data, val_data, test_data, workers: int = 1) -> MultiSeedResult:
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("need at least one seed")
    jobs = [(replace(config, seed=s), train_data, val_data, test_data) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_run_one, jobs))
    else:
        records = [_run_one(j) for j in jobs]
    return MultiSeedResult(records, _aggregate(records))


def sweep_fractions(config: TrainConfig, fractions, seeds, train_data, val_data, test_data, presets=("base", "C", "M", "CM"), workers: int = 1) -> list:
    """One row per (fraction, preset): mean/std test weighted F1 over seeds."""
    rows = []
    for frac in fractions:
        if not 0.0 < frac <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {frac}")
        for name in presets:
            cfg = replace(config.with_preset(name), data_fraction=float(frac))
            res = run_multi_seed(cfg, seeds, train_data, val_data, test_data, workers=workers)
            rows.append({"fraction": float(frac), "preset": cfg.preset, "mean_f1": res.aggregate["mean_f1"], "std_f1": res.aggregate["std_f1"], "result": res})
    return rows
