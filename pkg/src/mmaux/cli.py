"""Command-line entry point.

    mmaux generate --config exp.ini --out data/
    mmaux train    --config exp.ini --preset CM [--fraction 0.2] [--seeds 1,2,3] --out runs/cm
    mmaux sweep    --config exp.ini --fractions 0.2,0.4,0.6,0.8,1.0 --out runs/sweep
    mmaux compare  runs/base runs/cm
    mmaux verify

Exit codes: 0 success, 1 check or experiment failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import metrics, synthdata, trainer, verify
from .errors import ConfigError, DegenerateTestError, MMAuxError, ParseError

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

_SYNTH_FIELDS = {f.name: f for f in fields(synthdata.SynthConfig)}
_TRAIN_FIELDS = {f.name: f for f in fields(trainer.TrainConfig) if f.name not in ("weights",)}
_EXPERIMENT_KEYS = {"seeds", "data_dir", "out_dir", "split", "split_seed", "workers"}


@dataclass
class ExperimentConfig:
    synth: synthdata.SynthConfig
    train: trainer.TrainConfig
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    split: tuple = (0.8, 0.1, 0.1)
    split_seed: int = 0
    data_dir: Path | None = None
    out_dir: Path | None = None
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "data": self.synth.to_dict(),
            "train": self.train.to_dict(),
            "experiment": {
                "seeds": list(self.seeds),
                "split": list(self.split),
                "split_seed": self.split_seed,
                "workers": self.workers,
            },
        }


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(" ", "").split(",") if x]


def _ints(text: str) -> list:
    return [int(x) for x in text.replace(" ", "").split(",") if x]


def _coerce(name: str, raw: str, annotation):
    ann = str(annotation)
    try:
        if name == "relation_mix":
            return tuple(_floats(raw))
        if "bool" in ann:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if "int" in ann:
            return int(raw)
        if "float" in ann:
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Parse an INI experiment file with [data], [train] and [experiment] sections.

    Unknown sections or keys are rejected. Relative paths resolve against the
    config file's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    unknown_sections = set(parser.sections()) - {"data", "train", "experiment"}
    if unknown_sections:
        raise ConfigError(f"unknown config sections: {sorted(unknown_sections)}")

    synth_kw, train_kw = {}, {}
    if parser.has_section("data"):
        for key, raw in parser.items("data"):
            if key not in _SYNTH_FIELDS:
                raise ConfigError(f"unknown key in [data]: {key}")
            synth_kw[key] = _coerce(key, raw, _SYNTH_FIELDS[key].type)
    preset_name = "base"
    if parser.has_section("train"):
        for key, raw in parser.items("train"):
            if key not in _TRAIN_FIELDS:
                raise ConfigError(f"unknown key in [train]: {key}")
            if key == "preset":
                preset_name = raw.strip()
            else:
                train_kw[key] = _coerce(key, raw, _TRAIN_FIELDS[key].type)
    exp = {}
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key not in _EXPERIMENT_KEYS:
                raise ConfigError(f"unknown key in [experiment]: {key}")
            exp[key] = raw.strip()

    overrides = overrides or {}
    if overrides.get("preset"):
        preset_name = overrides["preset"]
    if overrides.get("fraction") is not None:
        train_kw["data_fraction"] = overrides["fraction"]
    try:
        synth = synthdata.SynthConfig(**synth_kw)
        train = trainer.TrainConfig.from_preset(preset_name, **train_kw)
        cfg = ExperimentConfig(synth=synth, train=train)
        if "seeds" in exp:
            cfg.seeds = _ints(exp["seeds"])
        if "split" in exp:
            cfg.split = tuple(_floats(exp["split"]))
        if "split_seed" in exp:
            cfg.split_seed = int(exp["split_seed"])
        if "workers" in exp:
            cfg.workers = int(exp["workers"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if overrides.get("seeds"):
        cfg.seeds = list(overrides["seeds"])
    if not cfg.seeds:
        raise ConfigError("seeds must list at least one seed")
    synthdata.split_sizes(0, cfg.split)
    base = path.parent
    if "data_dir" in exp:
        cfg.data_dir = (base / exp["data_dir"]).resolve()
    if "out_dir" in exp:
        cfg.out_dir = (base / exp["out_dir"]).resolve()
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_splits(data_dir: Path):
    names = ("train", "val", "test")
    paths = [data_dir / f"{n}.jsonl" for n in names]
    missing = [str(p) for p in paths if not p.is_file()]
    if missing:
        raise ConfigError(f"dataset files missing: {', '.join(missing)}")
    return [synthdata.read_jsonl(p) for p in paths]


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.data_dir or "data")
    out.mkdir(parents=True, exist_ok=True)
    ds = synthdata.generate(cfg.synth)
    parts = synthdata.split(ds, cfg.split, seed=cfg.split_seed)
    for part in parts:
        synthdata.write_jsonl(part, out / f"{part.split_name}.jsonl")
        s = part.summary()
        print(f"{s['split']:5} posts={s['posts']:5d} per_class={s['per_class']} per_relation={s['per_relation']}")
    _write_json(out / "effective_config.json", cfg.to_dict())
    return EXIT_OK


def _resolve_data_dir(args, cfg) -> Path:
    data_dir = Path(args.data) if getattr(args, "data", None) else cfg.data_dir
    if data_dir is None:
        raise ConfigError("no dataset directory: pass --data or set data_dir in [experiment]")
    return data_dir


def cmd_train(args) -> int:
    overrides = {"preset": args.preset, "fraction": args.fraction, "seeds": _ints(args.seeds) if args.seeds else None}
    cfg = load_config(args.config, overrides)
    train_ds, val_ds, test_ds = _load_splits(_resolve_data_dir(args, cfg))
    out = Path(args.out or cfg.out_dir or "runs")
    out.mkdir(parents=True, exist_ok=True)
    res = trainer.run_multi_seed(cfg.train, cfg.seeds, train_ds, val_ds, test_ds, workers=args.workers or cfg.workers)
    for rec in res.records:
        _write_json(out / f"run_seed{rec.config['seed']}.json", rec.to_json())
    _write_json(out / "aggregate.json", {"preset": cfg.train.preset, "fraction": cfg.train.data_fraction, **res.aggregate})
    _write_json(out / "effective_config.json", cfg.to_dict())
    agg = res.aggregate
    print(f"preset={cfg.train.preset} fraction={cfg.train.data_fraction} seeds={agg['seeds']} weighted_f1={agg['mean_f1']:.4f} +- {agg['std_f1']:.4f}")
    for key, v in agg["per_relation_acc"].items():
        print(f"  {key:16} acc={v['mean']:.4f} +- {v['std']:.4f}")
    if "itm_probe_acc" in agg:
        print(f"  itm probe accuracy {agg['itm_probe_acc']:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    overrides = {"seeds": _ints(args.seeds) if args.seeds else None}
    cfg = load_config(args.config, overrides)
    train_ds, val_ds, test_ds = _load_splits(_resolve_data_dir(args, cfg))
    fractions = _floats(args.fractions)
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    out = Path(args.out or cfg.out_dir or "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = trainer.sweep_fractions(cfg.train, fractions, cfg.seeds, train_ds, val_ds, test_ds, presets=presets, workers=args.workers or cfg.workers)
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fraction", "preset", "mean_f1", "std_f1"])
        for r in rows:
            writer.writerow([repr(r["fraction"]), r["preset"], repr(r["mean_f1"]), repr(r["std_f1"])])
    _write_json(out / "sweep.json", [{k: v for k, v in r.items() if k != "result"} | {"f1s": r["result"].aggregate["f1s"]} for r in rows])
    _write_json(out / "effective_config.json", cfg.to_dict())
    for r in rows:
        print(f"fraction={r['fraction']:.2f} preset={r['preset']:4} weighted_f1={r['mean_f1']:.4f} +- {r['std_f1']:.4f}")
    return EXIT_OK


def _load_f1s(run_dir: Path) -> list:
    path = Path(run_dir) / "aggregate.json"
    if not path.is_file():
        raise ConfigError(f"no aggregate.json in {run_dir}")
    try:
        return [float(x) for x in json.loads(path.read_text())["f1s"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"malformed aggregate in {run_dir}: {exc}") from exc


def cmd_compare(args) -> int:
    a, b = _load_f1s(args.run_a), _load_f1s(args.run_b)
    try:
        res = metrics.welch_t_test(b, a)
    except DegenerateTestError as exc:
        print(f"degenerate test: {exc} (A={a}, B={b})")
        return EXIT_FAIL
    mean_a, mean_b = metrics.aggregate(a)[0], metrics.aggregate(b)[0]
    verdict = "significant" if res.p < 0.05 else "not significant"
    print(f"A {args.run_a}: mean weighted F1 {mean_a:.4f} (n={len(a)})")
    print(f"B {args.run_b}: mean weighted F1 {mean_b:.4f} (n={len(b)})")
    print(f"difference B-A {mean_b - mean_a:+.4f}  welch t={res.t:.4f} df={res.df:.3f} p={res.p:.4g}  -> {verdict} at p < 0.05")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_all(inject_fault=args.inject_fault)
    print(verify.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print("all checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mmaux", description="Multimodal classification with ITC/ITM auxiliary losses on synthetic posts.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate and split a synthetic dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one preset over several seeds")
    t.add_argument("--config", required=True)
    t.add_argument("--preset", choices=sorted(trainer.L.PRESETS), default=None)
    t.add_argument("--fraction", type=float)
    t.add_argument("--seeds")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--workers", type=int, default=0)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="training-fraction sweep across presets")
    s.add_argument("--config", required=True)
    s.add_argument("--fractions", default="0.2,0.4,0.6,0.8,1.0")
    s.add_argument("--presets", default="base,C,M,CM")
    s.add_argument("--seeds")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--workers", type=int, default=0)
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="Welch t-test between two train output directories")
    c.add_argument("run_a")
    c.add_argument("run_b")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="run gradient checks and analytic identities")
    v.add_argument("--inject-fault", help=argparse.SUPPRESS, choices=sorted(verify.GRADIENT_CHECKS))
    v.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MMAuxError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
