"""Self-check suite behind ``mmaux verify``.

Gradient checks run on deliberately tiny configurations so that every
coordinate can be perturbed; the identities and oracle comparisons are the
same ones the test suite pins.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import metrics
from . import numcore as nc
from .encoders import EncoderConfig, encode_image, encode_text, init_image_encoder, init_text_encoder
from .fusion import AttFusionParams, fuse_att
from .model import Batch, MultimodalModel
from .numcore import Param, Tensor
from .synthdata import ALL_RELATIONS

GRAD_EPS = 1e-5
GRAD_TOL = 1e-4
INSTANCES = 10

TINY = EncoderConfig(model_dim=8, shared_dim=4, num_layers=1, heads=2, ffn_dim=8, vocab_size=10, max_len=4, patch_count=2, patch_dim=3)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _u(rng, *shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _tokens(rng, n, cfg=TINY):
    lengths = rng.integers(1, cfg.max_len + 1, size=n)
    return [list(rng.integers(1, cfg.vocab_size, size=k)) for k in lengths]


def _grad_instances(build: Callable[[np.random.Generator], tuple], fault: bool, seed: int) -> str:
    """Run finite_diff_check on INSTANCES random problems; raise AssertionError on failure."""
    transform = (lambda g: g * 1.1) if fault else None
    worst = 0.0
    for i in range(INSTANCES):
        rng = np.random.default_rng([seed, i])
        f, params = build(rng)
        rep = nc.finite_diff_check(f, params, eps=GRAD_EPS, tol=GRAD_TOL, grad_transform=transform)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            raise AssertionError(f"instance {i}: {rep}")
    return f"max rel err {worst:.2e} over {INSTANCES} instances"


# ---------------------------------------------------------------------------
# gradient problem builders: each returns (scalar closure, params to check)


def build_itc(rng):
    n, d = int(rng.integers(2, 6)), 4
    a = Param(_u(rng, n, d), "L")
    b = Param(_u(rng, n, d), "I")
    temp = L.Temperature(tau=float(rng.uniform(-1.0, 1.0)))
    return (lambda: L.itc_loss(nc.normalize_rows(a), nc.normalize_rows(b), temp)), [a, b, temp.tau]


def build_itm(rng):
    n, width = 4, 6
    h = Param(_u(rng, n, width), "h")
    head = L.MLPHead(width, 5, 2, rng, "itm")
    itm = L.itm_perturb(n, 0.5, rng)
    return (lambda: L.itm_loss(h, itm, head)), [h] + head.params()


def build_ce(rng):
    n, k = 5, 3
    logits = Param(_u(rng, n, k) * 3, "logits")
    labels = rng.integers(0, k, size=n)
    cw = L.balanced_class_weights(np.bincount(labels, minlength=k) + 1)
    return (lambda: L.ce_loss(logits, labels, cw)), [logits]


def build_text_encoder(rng):
    enc = init_text_encoder(TINY, rng)
    toks = _tokens(rng, 3)
    w = _u(rng, TINY.shared_dim)
    return (lambda: nc.sum(encode_text(toks, enc).cls_proj * w)), enc.params()


def build_image_encoder(rng):
    enc = init_image_encoder(TINY, rng)
    patches = _u(rng, 3, TINY.patch_count, TINY.patch_dim)
    w = _u(rng, TINY.shared_dim)
    return (lambda: nc.sum(encode_image(patches, enc).cls_proj * w)), enc.params()


def build_fuse_att(rng):
    text = init_text_encoder(TINY, rng)
    image = init_image_encoder(TINY, rng)
    fusion = AttFusionParams(TINY.model_dim, TINY.heads, rng)
    toks = _tokens(rng, 3)
    patches = _u(rng, 3, TINY.patch_count, TINY.patch_dim)
    w = _u(rng, 2 * TINY.model_dim)

    def f():
        return nc.sum(fuse_att(encode_text(toks, text), encode_image(patches, image), fusion).h * w)

    # the encoders are checked separately; here only the fusion layer and its inputs' last stage
    return f, fusion.params() + [text.lnf_g, image.lnf_b]


def build_joint(rng):
    from .trainer import TrainConfig, batch_loss

    model = MultimodalModel(TINY, 3, "Att", seed=int(rng.integers(1 << 30)))
    model.temperature.tau.data[...] = rng.uniform(-1.0, 0.5)
    toks = _tokens(rng, 4)
    ids = np.zeros((4, TINY.max_len), dtype=np.int64)
    mask = np.zeros_like(ids, dtype=bool)
    for i, t in enumerate(toks):
        ids[i, : len(t)] = t
        mask[i, : len(t)] = True
    batch = Batch(ids, mask, _u(rng, 4, TINY.patch_count, TINY.patch_dim), rng.integers(0, 3, size=4), [ALL_RELATIONS[0]] * 4)
    cfg = TrainConfig.from_preset("CM", model_dim=8, heads=2)
    cw = L.balanced_class_weights([1, 2, 3])
    itm_seed = int(rng.integers(1 << 30))
    f = lambda: batch_loss(model, batch, cfg, cw, np.random.default_rng(itm_seed))[0]  # noqa: E731
    return f, model.params()


GRADIENT_CHECKS = {
    "itc_loss": build_itc,
    "itm_loss": build_itm,
    "ce_loss": build_ce,
    "encode_text": build_text_encoder,
    "encode_image": build_image_encoder,
    "fuse_att": build_fuse_att,
    "joint_pipeline": build_joint,
}


# ---------------------------------------------------------------------------
# identities and oracle comparisons


def check_itc_identities() -> str:
    temp = L.Temperature(tau=0.0)
    same = Tensor(np.tile([[1.0, 0.0]], (4, 1)))
    v = L.itc_loss(same, same, temp).item()
    assert abs(v - math.log(4)) <= 1e-9, f"uniform batch gave {v}"
    eye = Tensor(np.eye(2))
    v2 = L.itc_loss(eye, eye, temp).item()
    direct = -math.log(math.e / (math.e + 1.0))
    assert abs(v2 - direct) <= 1e-6, f"identity batch gave {v2}, expected {direct}"
    rng = np.random.default_rng(0)
    a = nc.normalize_rows(Tensor(rng.standard_normal((6, 5))))
    b = nc.normalize_rows(Tensor(rng.standard_normal((6, 5))))
    t = L.Temperature()
    base = L.itc_loss(a, b, t).item()
    assert abs(L.itc_loss(b, a, t).item() - base) <= 1e-12, "swap symmetry"
    perm = rng.permutation(6)
    pa, pb = Tensor(a.data[perm]), Tensor(b.data[perm])
    assert abs(L.itc_loss(pa, pb, t).item() - base) <= 1e-12, "joint permutation invariance"
    return f"ln4 and identity case ({v2:.6f}) exact; symmetric; permutation invariant"


def check_itm_protocol() -> str:
    rng = np.random.default_rng(1234)
    n, trials = 8, 10_000
    mismatches = 0
    for _ in range(trials):
        b = L.itm_perturb(n, 0.5, rng)
        own = np.arange(n)
        assert np.all((b.image_indices == own) == (b.match_labels == 1)), "label/index disagreement"
        mismatches += int((b.match_labels == 0).sum())
    total = n * trials
    sigma = math.sqrt(total * 0.25)
    z = (mismatches - total / 2) / sigma
    assert abs(z) <= 3.0, f"mismatch rate {mismatches / total:.4f} is {z:.2f} sigma from 0.5"
    return f"mismatch rate {mismatches / total:.4f} ({z:+.2f} sigma)"


def check_ce_identities() -> str:
    logits = Tensor(np.zeros((4, 3)))
    labels = np.array([0, 1, 2, 1])
    for w in ([1.0, 1.0, 1.0], [2.0, 0.5, 7.0]):
        v = L.ce_loss(logits, labels, L.ClassWeights(np.array(w))).item()
        assert abs(v - math.log(3)) <= 1e-12, f"uniform logits gave {v}"
    # p(true) = 0.5 for a class-0 post and 0.25 for a class-1 post
    lg = Tensor(np.log([[0.5, 0.5], [0.75, 0.25]]))
    cw = L.balanced_class_weights([10, 30])
    v = L.ce_loss(lg, np.array([0, 1]), cw).item()
    expected = (2.0 * math.log(2) + (2.0 / 3.0) * math.log(4)) / (8.0 / 3.0)
    assert abs(v - expected) <= 1e-12, f"weighted case gave {v}, expected {expected}"
    return "uniform logits give ln K under any weights; balanced weights exact"


def _f1_oracle(preds, golds, k):
    total = 0.0
    for c in range(k):
        tp = sum(1 for p, g in zip(preds, golds) if p == c and g == c)
        fp = sum(1 for p, g in zip(preds, golds) if p == c and g != c)
        fn = sum(1 for p, g in zip(preds, golds) if p != c and g == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        total += f1 * (tp + fn)
    return total / len(golds)


def check_metrics_oracle() -> str:
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(200):
        k = int(rng.integers(2, 5))
        n = int(rng.integers(1, 40))
        g = rng.integers(0, k, size=n)
        p = rng.integers(0, k, size=n)
        diff = abs(metrics.weighted_f1(p, g, k) - _f1_oracle(p.tolist(), g.tolist(), k))
        worst = max(worst, diff)
        assert diff <= 1e-12, f"instance {i}: weighted F1 off by {diff}"
    hand = metrics.weighted_f1([0, 1, 1, 1], [0, 0, 1, 1])
    assert abs(hand - 11 / 15) <= 1e-12, f"hand case gave {hand}"
    return f"200 random instances, max diff {worst:.1e}; hand case {hand:.4f}"


IDENTITY_CHECKS = {
    "itc_identities": check_itc_identities,
    "itm_protocol": check_itm_protocol,
    "ce_identities": check_ce_identities,
    "metrics_oracle": check_metrics_oracle,
}


def run_all(inject_fault: str | None = None, seed: int = 2024) -> list[CheckResult]:
    results = []
    for name, build in GRADIENT_CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail = _grad_instances(build, fault=(name == inject_fault), seed=seed)
            ok = True
        except (AssertionError, ArithmeticError, ValueError) as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(f"grad:{name}", ok, detail, time.perf_counter() - t0))
    for name, fn in IDENTITY_CHECKS.items():
        t0 = time.perf_counter()
        try:
            detail, ok = fn(), True
        except AssertionError as exc:
            detail, ok = str(exc), False
        results.append(CheckResult(name, ok, detail, time.perf_counter() - t0))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check'.ljust(width)}  status  secs   detail"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {'PASS' if r.passed else 'FAIL':6}  {r.seconds:5.1f}  {r.detail}")
    return "\n".join(lines)
