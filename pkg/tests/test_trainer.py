import json
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from mmaux import losses as L
from mmaux import numcore as nc
from mmaux import trainer
from mmaux.errors import ConfigError
from mmaux.model import MultimodalModel, make_batch
from mmaux.synthdata import SynthConfig, generate, split
from mmaux.trainer import TrainConfig, evaluate_metrics, run_multi_seed, sweep_fractions, train

FIXTURES = Path(__file__).parent / "fixtures"

TINY_DIMS = dict(model_dim=8, shared_dim=4, num_layers=1, heads=2, ffn_dim=16)


@pytest.fixture(scope="module")
def small_data():
    d = generate(SynthConfig(num_posts=120, num_classes=3, noise_level=0.2, pair_signal=0.5, seed=0))
    return split(d, (0.8, 0.1, 0.1), seed=0)


def tiny(preset="base", **kw):
    base = dict(TINY_DIMS, batch_size=8, max_epochs=3, learning_rate=1e-3)
    base.update(kw)
    return TrainConfig.from_preset(preset, **base)


def without_seconds(record):
    doc = record.to_json()
    doc.pop("seconds")
    return doc


class TestTrainConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.batch_size, c.max_epochs, c.patience) == (1e-4, 16, 20, 3)
        assert c.weights.as_tuple() == (1.0, 0.0, 0.0)
        assert c.val_criterion == "joint" and c.temperature_mode == "divide"

    @pytest.mark.parametrize(
        "kwargs",
        [{"max_epochs": 0}, {"patience": 0}, {"batch_size": 0}, {"learning_rate": 0.0}, {"data_fraction": 0.0}, {"strategy": "Sum"}, {"val_criterion": "f1"}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_auxiliary_losses_need_pairs(self):
        TrainConfig.from_preset("base", batch_size=1)
        for name in ("C", "M", "CM"):
            with pytest.raises(ConfigError):
                TrainConfig.from_preset(name, batch_size=1)

    def test_preset_aliases(self):
        assert TrainConfig.from_preset("+C+M").preset == "CM"
        assert TrainConfig().with_preset("+M").weights.as_tuple() == (0.9, 0.0, 0.1)


class TestTrain:
    def test_base_has_zero_auxiliary_curves(self, small_data):
        _, rec = train(tiny("base"), *small_data)
        for ep in rec.epochs:
            for part in ("train", "val"):
                assert ep[part]["itc"] == 0.0 and ep[part]["itm"] == 0.0
                assert ep[part]["joint"] == ep[part]["ce"]

    def test_auxiliary_curves_populated(self, small_data):
        _, rec = train(tiny("CM", max_epochs=1), *small_data)
        assert rec.epochs[0]["train"]["itc"] > 0 and rec.epochs[0]["train"]["itm"] > 0

    def test_deterministic(self, small_data):
        cfg = tiny("CM", strategy="Att")
        _, a = train(cfg, *small_data)
        _, b = train(cfg, *small_data)
        assert json.dumps(without_seconds(a)) == json.dumps(without_seconds(b))

    def test_record_schema(self, small_data):
        _, rec = train(tiny("M", max_epochs=1), *small_data)
        doc = json.loads(json.dumps(rec.to_json()))
        assert set(doc) == {"config", "epochs", "best_epoch", "test", "seconds"}
        assert set(doc["epochs"][0]) == {"train", "val"}
        assert set(doc["epochs"][0]["train"]) == {"ce", "itc", "itm", "joint"}
        assert {"weighted_f1", "per_class_f1", "per_relation_acc"} <= set(doc["test"])
        assert doc["config"]["weights"] == [0.9, 0.0, 0.1]

    def test_base_matches_ce_only_loop_bitwise(self, small_data):
        tr, va, _ = small_data
        cfg = tiny("base", max_epochs=2, patience=5)
        model, rec = train(cfg, tr, va)

        # independent CE-only loop with the same seeding
        ref = MultimodalModel(cfg.encoder_config(tr), 3, cfg.strategy, seed=cfg.seed)
        params = ref.params()
        adam = nc.AdamState(learning_rate=cfg.learning_rate)
        counts = np.bincount(tr.labels, minlength=3)
        cw = L.balanced_class_weights(counts)
        snaps = []
        for epoch in range(cfg.max_epochs):
            order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(len(tr))
            posts = [tr.posts[i] for i in order]
            for i in range(0, len(posts), cfg.batch_size):
                batch = make_batch(posts[i : i + cfg.batch_size])
                nc.zero_grads(params)
                L.ce_loss(ref.logits(batch), batch.labels, cw).backward()
                nc.adam_step(params, adam)
            snaps.append(ref.snapshot())
        best = snaps[rec.best_epoch]
        for name, value in model.snapshot().items():
            assert value.tobytes() == best[name].tobytes(), name

    def test_restores_best_epoch(self, small_data, monkeypatch):
        vals = iter([1.0, 0.5, 0.8, 0.9, 0.95, 0.2, 0.1])
        snaps = []

        def fake_eval(model, data, config, class_weights):
            snaps.append(model.snapshot())
            v = next(vals)
            return {"ce": v, "itc": 0.0, "itm": 0.0, "joint": v}

        monkeypatch.setattr(trainer, "evaluate_losses", fake_eval)
        model, rec = train(tiny(max_epochs=10, patience=3), *small_data)
        assert rec.best_epoch == 1
        assert len(rec.epochs) == 5
        final = model.snapshot()
        for name in final:
            np.testing.assert_array_equal(final[name], snaps[1][name])
        assert any(not np.array_equal(final[n], snaps[-1][n]) for n in final)

    def test_ties_resolve_to_earliest(self, small_data, monkeypatch):
        vals = iter([1.0, 0.5, 0.5, 0.5, 0.5])
        monkeypatch.setattr(trainer, "evaluate_losses", lambda *a: {"ce": (v := next(vals)), "itc": 0.0, "itm": 0.0, "joint": v})
        _, rec = train(tiny(max_epochs=10, patience=3), *small_data)
        assert rec.best_epoch == 1 and len(rec.epochs) == 5

    def test_ce_validation_criterion(self, small_data, monkeypatch):
        vals = iter([(1.0, 5.0), (2.0, 1.0), (3.0, 1.0), (4.0, 1.0)])

        def fake_eval(*a):
            ce, joint = next(vals)
            return {"ce": ce, "itc": 0.0, "itm": 0.0, "joint": joint}

        monkeypatch.setattr(trainer, "evaluate_losses", fake_eval)
        _, rec = train(tiny(max_epochs=4, patience=3, val_criterion="ce"), *small_data)
        assert rec.best_epoch == 0

    def test_batch_order_depends_only_on_seed_and_epoch(self, small_data, monkeypatch):
        seen = []
        real = trainer.make_batch

        def spy(posts):
            seen.append(tuple(p.post_id for p in posts))
            return real(posts)

        monkeypatch.setattr(trainer, "make_batch", spy)
        cfg = tiny("CM", max_epochs=2, patience=5)
        train(cfg, *small_data[:2])
        first, seen[:] = list(seen), []
        train(replace(cfg, learning_rate=5e-3), *small_data[:2])
        assert seen == first

    def test_singleton_last_batch(self, small_data):
        tr, va, _ = small_data
        _, rec = train(tiny("CM", batch_size=len(tr) - 1, max_epochs=1), tr, va)
        assert all(math.isfinite(v) for v in rec.epochs[0]["train"].values())

    def test_fraction_subsamples(self, small_data):
        _, rec = train(tiny(data_fraction=0.25, max_epochs=1), *small_data)
        assert rec.config["data_fraction"] == 0.25

    def test_empty_inputs(self, small_data):
        tr, va, _ = small_data
        with pytest.raises(ConfigError):
            train(tiny(), tr, va.subset([]))

    @pytest.mark.parametrize("case", range(50))
    def test_loss_curves_finite(self, case):
        rng = np.random.default_rng([77, case])
        presets = ["base", "C", "M", "CM"]
        data = generate(
            SynthConfig(
                num_posts=int(rng.integers(12, 30)),
                num_classes=int(rng.integers(2, 4)),
                noise_level=float(rng.uniform(0, 1)),
                text_signal=float(rng.uniform(0, 1)),
                image_signal=float(rng.uniform(0, 1)),
                pair_signal=float(rng.uniform(0, 1)),
                seed=case,
            )
        )
        tr, va, _ = split(data, (0.6, 0.2, 0.2), seed=case)
        cfg = TrainConfig.from_preset(
            presets[case % 4],
            strategy="Att" if case % 2 else "Conc",
            temperature_mode="multiply" if case % 5 == 0 else "divide",
            batch_size=int(rng.integers(2, 9)),
            max_epochs=2,
            seed=case,
            **TINY_DIMS,
        )
        _, rec = train(cfg, tr, va)
        for ep in rec.epochs:
            for part in ep.values():
                assert all(math.isfinite(v) for v in part.values())


def logistic_oracle_accuracy(data, epochs=300, lr=0.5):
    """Multinomial logistic regression on [mean patch vector, token histogram]."""
    k = data.config.num_classes
    x = np.stack(
        [np.concatenate([p.patches.mean(0), np.bincount(p.tokens, minlength=data.config.vocab_size) / len(p.tokens)]) for p in data]
    )
    x = np.hstack([x, np.ones((len(x), 1))])
    y = np.eye(k)[data.labels]
    w = np.zeros((x.shape[1], k))
    for _ in range(epochs):
        z = x @ w
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        w -= lr * x.T @ (p - y) / len(x)
    return float(((x @ w).argmax(1) == data.labels).mean())


@pytest.mark.slow
def test_easy_regime_conc_fits_training_data():
    d = generate(SynthConfig(num_posts=2000, num_classes=2, relation_mix=(1, 0, 0, 0), text_signal=1.0, image_signal=1.0, noise_level=0.1, seed=0))
    tr, va, _ = split(d, (0.8, 0.1, 0.1), seed=0)
    assert logistic_oracle_accuracy(tr) > 0.95
    model, _ = train(TrainConfig(strategy="Conc", max_epochs=20), tr, va)
    assert evaluate_metrics(model, tr)["weighted_f1"] > 0.95


class TestMultiSeed:
    def test_one_seed_has_zero_std(self, small_data):
        res = run_multi_seed(tiny(max_epochs=1), [4], *small_data)
        assert res.aggregate["std_f1"] == 0.0
        assert res.aggregate["mean_f1"] == res.records[0].test["weighted_f1"]

    def test_repeated_seed_has_zero_std(self, small_data):
        single = run_multi_seed(tiny(max_epochs=1), [4], *small_data)
        res = run_multi_seed(tiny(max_epochs=1), [4, 4, 4], *small_data)
        assert res.aggregate["std_f1"] == 0.0
        assert res.aggregate["mean_f1"] == single.aggregate["mean_f1"]

    def test_golden_aggregate(self, small_data):
        golden = json.loads((FIXTURES / "aggregate_golden.json").read_text())
        res = run_multi_seed(tiny("CM", strategy="Att"), golden["seeds"], *small_data)
        assert res.aggregate["f1s"] == pytest.approx(golden["f1s"], abs=1e-12)
        assert res.aggregate["mean_f1"] == pytest.approx(golden["mean_f1"], abs=1e-12)
        assert res.aggregate["std_f1"] == pytest.approx(golden["std_f1"], abs=1e-12)

    def test_parallel_matches_serial(self, small_data):
        cfg = tiny(max_epochs=1)
        a = run_multi_seed(cfg, [1, 2], *small_data)
        b = run_multi_seed(cfg, [1, 2], *small_data, workers=2)
        assert a.aggregate == b.aggregate

    def test_no_seeds(self, small_data):
        with pytest.raises(ConfigError):
            run_multi_seed(tiny(), [], *small_data)


class TestSweep:
    def test_shape(self, small_data):
        rows = sweep_fractions(tiny(max_epochs=1), [0.2, 1.0], [0], *small_data, presets=("base", "CM"))
        assert [(r["fraction"], r["preset"]) for r in rows] == [(0.2, "base"), (0.2, "CM"), (1.0, "base"), (1.0, "CM")]

    def test_full_fraction_equals_multi_seed(self, small_data):
        cfg = tiny(max_epochs=1)
        rows = sweep_fractions(cfg, [1.0], [0, 1], *small_data, presets=("base",))
        assert rows[0]["result"].aggregate == run_multi_seed(cfg, [0, 1], *small_data).aggregate

    def test_bad_fraction(self, small_data):
        with pytest.raises(ConfigError):
            sweep_fractions(tiny(), [0.0], [0], *small_data)
