"""Command-line interface: ``vog {train,vog,toy,memtest,ood,report}``.

Datasets are named with short spec strings::

    digits:n=2000,seed=100,split=test
    blobs:n=1000,seed=0,std=1.2,split=test
    blobs-csv:path=points.csv,split=test
    idx:images=t10k-images-idx3-ubyte,labels=t10k-labels-idx1-ubyte,split=test
    gaussian:n=10000,seed=7,shape=1x28x28

Failures exit with status 1 (2 for usage errors) and print a single
``error_kind: message`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__, nn
from ._io import atomic_write_json, atomic_write_text
from .data import BlobConfig, DataFormatError, LabeledDataset, gaussian_ood, load_idx, make_blobs, read_blobs_csv
from .digits import make_digits
from .engine import (LABEL_SOURCES, VogRecord, compute_vog, normalize_by_class, rank, read_scores_csv,
                     write_scores_csv)
from .evaluation import (
    decile_error,
    flip_between,
    ood_metrics,
    ood_percentile_representation,
    vog_detection_scores,
)
from .evaluation.analysis import StageFlipReport
from .experiments import (
    MemConfig,
    OodConfig,
    ToyConfig,
    ood_evaluation,
    report_header,
    run_memtest,
    run_ood,
    run_toy,
    top_bottom_ids,
)
from .training import STAGES, CheckpointError, TrainConfig, read_manifest, train

log = logging.getLogger("vog")

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


# -- dataset specs ---------------------------------------------------------------------


PATH_KEYS = {"path", "images", "labels"}


def _parse_kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise ConfigError(f"expected key=value in dataset spec, got {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_spec(spec: str, base: Path) -> str:
    """Make file paths inside a dataset spec absolute relative to ``base``."""
    kind, _, body = spec.partition(":")
    kv = _parse_kv(body)
    for k in PATH_KEYS & kv.keys():
        kv[k] = str((base / kv[k]).resolve())
    return kind + ":" + ",".join(f"{k}={v}" for k, v in kv.items())


def load_dataset(spec: str) -> LabeledDataset:
    kind, _, body = spec.partition(":")
    kv = _parse_kv(body)

    def take(key: str, default: Any = None, cast=str):
        if key in kv:
            try:
                return cast(kv.pop(key))
            except ValueError:
                raise ConfigError(f"bad value for {key!r} in dataset spec {spec!r}") from None
        if default is None:
            raise ConfigError(f"dataset spec {spec!r} is missing {key!r}")
        return default

    if kind == "digits":
        ds = make_digits(take("n", cast=int), take("seed", 0, int), take("split", "train"),
                         max_blend=take("max_blend", 0.5, float), distortion=take("distortion", 0.3, float))
    elif kind == "blobs":
        split = take("split", "test")
        cfg = BlobConfig(take("n", 1000, int), cluster_std=take("std", 1.0, float), seed=take("seed", 0, int))
        tr, te = make_blobs(cfg)
        ds = {"train": tr, "test": te}.get(split)
        if ds is None:
            raise ConfigError(f"blobs split must be train or test, got {split!r}")
    elif kind == "blobs-csv":
        ds = read_blobs_csv(take("path"), take("split", "test"))
    elif kind == "idx":
        ds = load_idx(take("images"), take("labels"), take("split", "train"), take("classes", 10, int))
    elif kind == "gaussian":
        shape = tuple(int(s) for s in take("shape", "1x28x28").split("x"))
        if len(shape) != 3:
            raise ConfigError(f"gaussian shape must be CxHxW, got {shape}")
        ds = gaussian_ood(take("n", cast=int), shape, take("seed", 0, int), take("classes", 10, int))
    else:
        raise ConfigError(f"unknown dataset kind {kind!r} (digits, blobs, blobs-csv, idx, gaussian)")
    if kv:
        raise ConfigError(f"unknown keys {sorted(kv)} in dataset spec {spec!r}")
    return ds


# -- run config ----------------------------------------------------------------------------


MODEL_KEYS = {"kind", "input_shape", "num_classes", "hidden", "activation", "channels", "kernel"}
VOG_KEYS = {"stage", "label_source", "workers"}
TOP_KEYS = {"config_version", "model", "train", "data", "vog", "paths", "experiment"}
EXPERIMENTS = {"toy": ToyConfig, "memtest": MemConfig, "ood": OodConfig}


def _check_keys(section: str, d: Any, allowed: set[str]) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")


@dataclass
class RunConfig:
    """One JSON document describing a run; every section is optional except where a command needs it."""

    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    vog: dict = field(default_factory=dict)
    paths: dict = field(default_factory=dict)
    experiment: dict = field(default_factory=dict)
    config_version: int = CONFIG_VERSION

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "RunConfig":
        _check_keys("<top>", d, TOP_KEYS)
        version = d.get("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config_version {version!r} not supported (expected {CONFIG_VERSION})")
        model, tr = d.get("model", {}), d.get("train", {})
        data, vog, paths, exp = d.get("data", {}), d.get("vog", {}), d.get("paths", {}), d.get("experiment", {})
        _check_keys("model", model, MODEL_KEYS)
        _check_keys("train", tr, {f for f in TrainConfig.__dataclass_fields__})
        _check_keys("data", data, {"train", "test", "ood"})
        _check_keys("vog", vog, VOG_KEYS)
        _check_keys("paths", paths, {"out", "checkpoints"})
        _check_keys("experiment", exp, set(EXPERIMENTS))
        for name, sub in exp.items():
            EXPERIMENTS[name].from_dict(sub)  # validates keys and values
        if vog.get("stage", "late") not in STAGES:
            raise ConfigError(f"vog.stage must be one of {STAGES}")
        if vog.get("label_source", "true") not in LABEL_SOURCES:
            raise ConfigError(f"vog.label_source must be one of {LABEL_SOURCES}")
        if base is not None:
            data = {k: resolve_spec(v, base) for k, v in data.items()}
            paths = {k: str((base / v).resolve()) for k, v in paths.items()}
        return cls(dict(model), dict(tr), dict(data), dict(vog), dict(paths), dict(exp), int(version))

    def to_dict(self) -> dict:
        return {
            "config_version": self.config_version,
            "model": self.model,
            "train": self.train,
            "data": self.data,
            "vog": self.vog,
            "paths": self.paths,
            "experiment": self.experiment,
        }

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, path.parent.resolve())

    def model_spec(self) -> nn.ModelSpec:
        m = dict(self.model)
        kind = m.get("kind", "mlp")
        shape = tuple(m.get("input_shape", (1, 28, 28)))
        classes = int(m.get("num_classes", 10))
        if kind == "mlp":
            return nn.mlp(shape, m.get("hidden", [128]), classes, m.get("activation", "relu"))
        if kind == "convnet":
            return nn.convnet(shape, m.get("channels", [8]), int(m.get("kernel", 5)), m.get("hidden", []), classes)
        raise ConfigError(f"model.kind must be mlp or convnet, got {kind!r}")

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        d.setdefault("epochs", 10)
        return TrainConfig.from_dict(d)


# -- commands --------------------------------------------------------------------------


def _workers(args) -> int:
    if getattr(args, "workers", None) is not None:
        return max(1, args.workers)
    env = os.environ.get("VOG_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"VOG_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out) if args.out else Path(cfg.paths.get("out", ""))
    if not str(out):
        raise ConfigError("no output directory: pass --out or set paths.out")
    if "train" not in cfg.data:
        raise ConfigError("config data.train is required for training")
    spec, tc = cfg.model_spec(), cfg.train_config()
    data = load_dataset(cfg.data["train"])
    cs = train(spec, data, tc, out)
    print(cs.root / "manifest.json")
    return 0


def cmd_vog(args) -> int:
    cs = read_manifest(args.checkpoints)
    data = load_dataset(args.data)
    records = compute_vog(cs, data, args.label_source, args.stage, _workers(args))
    write_scores_csv(args.out, rank(records).records)
    print(args.out)
    return 0


def _cfg_from(args, cls, **overrides):
    base = {}
    if getattr(args, "config", None):
        rc = RunConfig.load(args.config)
        name = {v: k for k, v in EXPERIMENTS.items()}[cls]
        base = rc.experiment.get(name, {})
    cfg = cls.from_dict(base)
    kw = {k: v for k, v in overrides.items() if v is not None}
    return cls.from_dict({**cfg.to_dict(), **kw})


def cmd_toy(args) -> int:
    cfg = _cfg_from(args, ToyConfig, seed=args.seed)
    out = Path(args.out)
    res = run_toy(cfg, out, _workers(args))
    report = res.to_dict()
    atomic_write_json(out / "toy_report.json", report)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["example_id", "x0", "x1", "label", "raw_vog", "normalized_vog", "boundary_distance"])
    pts = res.test.images.reshape(-1, 2)
    for r, (a, b), d in zip(res.records, pts, res.boundary.distances):
        w.writerow([r.example_id, f"{a:.12g}", f"{b:.12g}", r.true_label, f"{r.raw_vog:.12g}",
                    f"{r.normalized_vog:.12g}", f"{d:.12g}"])
    atomic_write_text(out / "toy_points.csv", buf.getvalue())
    b = report["boundary"]
    print(f"test error {res.test_error_percent:.2f}%  spearman(VoG, distance) {b['spearman_rho']}")
    return 0


def cmd_memtest(args) -> int:
    cfg = _cfg_from(args, MemConfig, shuffle_fraction=args.shuffle_fraction, seed=args.seed, epochs=args.epochs)
    out = Path(args.out)
    data = load_dataset(args.data) if args.data else None
    res = run_memtest(cfg, out, _workers(args), data)
    report = res.to_dict()
    if data is not None:
        report["data"] = args.data
    atomic_write_json(out / "memtest.json", report)
    wt = res.welch
    print(f"shuffled mean {wt.mean1:.6g} vs clean {wt.mean2:.6g}: t={wt.t_statistic:.4g} p={wt.p_value:.3g} "
          f"reject={wt.reject_at_alpha}")
    return 0


def _quartile_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quartile", "size", "n_ood", "fraction_of_ood", "ood_share"])
    for q in rows:
        w.writerow([q.quartile, q.size, q.n_ood, f"{q.fraction_of_ood:.12g}", f"{q.ood_share:.12g}"])
    return buf.getvalue()


def _records_with_offset(records: list[VogRecord], offset: int) -> list[VogRecord]:
    return [replace(r, example_id=r.example_id + offset) for r in records]


def cmd_ood(args) -> int:
    out = Path(args.out)
    workers = _workers(args)
    if args.in_scores or args.ood_scores:
        if not (args.in_scores and args.ood_scores):
            raise ConfigError("--in-scores and --ood-scores must be given together")
        ins = read_scores_csv(args.in_scores)
        outs = _records_with_offset(read_scores_csv(args.ood_scores), len(ins))
        # OoD raw scores are re-normalized with in-distribution class statistics
        ins, outs = normalize_by_class(ins), normalize_by_class(outs, reference=ins)
        vog = ood_metrics(vog_detection_scores(ins), vog_detection_scores(outs))
        quart = ood_percentile_representation(ins, outs)
        config = {"in_scores": str(args.in_scores), "ood_scores": str(args.ood_scores)}
        report = {**report_header(config, 0), "config": config, "vog": vog.to_dict(), "msp": None,
                  "quartiles": [q.to_dict() for q in quart],
                  "top_quartile_ge_bottom": quart[-1].fraction_of_ood >= quart[0].fraction_of_ood}
    elif args.checkpoints:
        if not (args.data and args.ood_data):
            raise ConfigError("--checkpoints needs --data and --ood-data")
        cs = read_manifest(args.checkpoints)
        res = ood_evaluation(cs, load_dataset(args.data), load_dataset(args.ood_data), args.stage, workers)
        config = {"checkpoints": str(Path(args.checkpoints).name), "data": args.data, "ood_data": args.ood_data,
                  "stage": args.stage}
        res.header, res.config = report_header(config, 0), config
        report, quart = res.to_dict(), res.quartiles
    else:
        cfg = _cfg_from(args, OodConfig, seed=args.seed)
        res = run_ood(cfg, out, workers)
        report, quart = res.to_dict(), res.quartiles
    atomic_write_json(out / "ood.json", report)
    atomic_write_text(out / "ood_quartiles.csv", _quartile_csv(quart))
    msp = report.get("msp")
    print(f"VoG AUROC {report['vog']['auroc']:.4f}" + (f"  MSP AUROC {msp['auroc']:.4f}" if msp else ""))
    return 0


def _correctness(records: list[VogRecord], path: str | None) -> dict[int, bool]:
    if path is None:
        return {r.example_id: r.true_label == r.predicted_label for r in records}
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"example_id", "correct"} <= set(reader.fieldnames):
            raise DataFormatError(f"{path}: correctness CSV needs example_id and correct columns")
        return {int(r["example_id"]): r["correct"].strip().lower() in ("1", "true") for r in reader}


def _decile_csv(tables) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", "decile", "lo_percentile", "hi_percentile", "n_examples", "top1_error_percent"])
    for t in tables:
        for i, r in enumerate(t.rows, start=1):
            w.writerow([t.stage, i, f"{r.lo_percentile:g}", f"{r.hi_percentile:g}", r.n_examples,
                        f"{r.top1_error_percent:.12g}"])
    return buf.getvalue()


def cmd_report(args) -> int:
    out = Path(args.out)
    late = read_scores_csv(args.scores)
    table = decile_error(rank(late), _correctness(late, args.correctness))
    config = {"scores": Path(args.scores).name, "correctness": args.correctness and Path(args.correctness).name,
              "early_scores": args.early_scores and Path(args.early_scores).name, "top_k": args.top_k}
    report: dict[str, Any] = {**report_header(config, 0), "config": config, "decile": table.to_dict(),
                              "top_bottom_ids": top_bottom_ids(late, args.top_k)}
    tables = [table]
    if args.early_scores:
        early = read_scores_csv(args.early_scores)
        early_ok = _correctness(early, args.early_correctness) if args.early_correctness else \
            _correctness(early, args.correctness)
        etable = decile_error(rank(early), early_ok)
        flip = StageFlipReport(etable, table, flip_between(etable, table))
        report["stage_flip"] = flip.to_dict()
        tables = [etable, table]
    atomic_write_json(out / "report.json", report)
    atomic_write_text(out / "decile_error.csv", _decile_csv(tables))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "end", "rank", "example_id"])
    for cls, ends in report["top_bottom_ids"].items():
        for end in ("lowest", "highest"):
            for i, ex in enumerate(ends[end], start=1):
                w.writerow([cls, end, i, ex])
    atomic_write_text(out / "top_bottom_ids.csv", buf.getvalue())
    rho, p = table.trend()
    print(f"decile errors {[round(e, 1) for e in table.errors]}  spearman {rho:.3f} (p={p:.3g})")
    return 0


# -- parser ----------------------------------------------------------------------------


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append defaults only to optional flags whose help does not already state one."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.required or "(default" in text:
            return text
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="vog", description="Rank examples by learning difficulty with Variance of Gradients (VoG).",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def workers(sp):
        sp.add_argument("--workers", type=int, default=None,
                        help="worker threads (default: VOG_WORKERS env var, else CPU count)")

    sp = sub.add_parser("train", help="train a model and write checkpoints", formatter_class=fmt)
    sp.add_argument("--config", required=True, help="run config JSON (model, train, data.train)")
    sp.add_argument("--out", default=None, help="checkpoint directory (default: paths.out from the config)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("vog", help="score a dataset with VoG", formatter_class=fmt)
    sp.add_argument("--checkpoints", required=True, help="directory containing manifest.json")
    sp.add_argument("--data", required=True, help="dataset spec")
    sp.add_argument("--stage", choices=STAGES, default="late", help="checkpoint window")
    sp.add_argument("--label-source", choices=LABEL_SOURCES, default="true", help="class whose score is differentiated")
    sp.add_argument("--out", required=True, help="output score CSV")
    workers(sp)
    sp.set_defaults(func=cmd_vog)

    sp = sub.add_parser("toy", help="two-blob boundary experiment", formatter_class=fmt)
    sp.add_argument("--seed", type=int, default=None, help="data, init and batching seed (default: config or 0)")
    sp.add_argument("--config", default=None, help="run config JSON with an experiment.toy section")
    sp.add_argument("--out", required=True, help="output directory")
    workers(sp)
    sp.set_defaults(func=cmd_toy)

    sp = sub.add_parser("memtest", help="shuffled-label memorization test", formatter_class=fmt)
    sp.add_argument("--data", default=None, help="training dataset spec (default: 10000 generated digits)")
    sp.add_argument("--shuffle-fraction", type=float, default=None, help="fraction of labels to reassign (default: 0.2)")
    sp.add_argument("--epochs", type=int, default=None, help="training epochs (default: 45)")
    sp.add_argument("--seed", type=int, default=None, help="training seed (default: 0)")
    sp.add_argument("--config", default=None, help="run config JSON with an experiment.memtest section")
    sp.add_argument("--out", required=True, help="output directory")
    workers(sp)
    sp.set_defaults(func=cmd_memtest)

    sp = sub.add_parser("ood", help="VoG and MSP out-of-distribution detection", formatter_class=fmt)
    sp.add_argument("--in-scores", default=None, help="in-distribution VoG score CSV")
    sp.add_argument("--ood-scores", default=None, help="OoD VoG score CSV (normalized against in-distribution)")
    sp.add_argument("--checkpoints", default=None, help="trained checkpoint directory")
    sp.add_argument("--data", default=None, help="in-distribution dataset spec (with --checkpoints)")
    sp.add_argument("--ood-data", default=None, help="OoD dataset spec (with --checkpoints)")
    sp.add_argument("--stage", choices=STAGES, default="late", help="checkpoint window")
    sp.add_argument("--seed", type=int, default=None, help="seed for the built-in experiment (default: 0)")
    sp.add_argument("--config", default=None, help="run config JSON with an experiment.ood section")
    sp.add_argument("--out", required=True, help="output directory")
    workers(sp)
    sp.set_defaults(func=cmd_ood)

    sp = sub.add_parser("report", help="decile error table, stage flip and per-class id lists", formatter_class=fmt)
    sp.add_argument("--scores", required=True, help="late-stage (or any) VoG score CSV")
    sp.add_argument("--early-scores", default=None, help="early-stage score CSV; enables the stage-flip report")
    sp.add_argument("--correctness", default=None,
                    help="CSV with example_id,correct (default: predicted_label == true_label from the scores)")
    sp.add_argument("--early-correctness", default=None, help="correctness CSV for the early table")
    sp.add_argument("--top-k", type=int, default=10, help="ids listed per class at each end of the ranking")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_report)
    return p


def _error_kind(e: BaseException) -> str:
    if isinstance(e, ConfigError):
        return "config_error"
    if isinstance(e, DataFormatError):
        return "data_format_error"
    if isinstance(e, CheckpointError):
        return "checkpoint_error"
    if isinstance(e, nn.ShapeError):
        return "shape_error"
    if isinstance(e, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return "io_error"
    if isinstance(e, ValueError):
        return "validation_error"
    return "runtime_error"


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as e:  # one machine-parseable line, no traceback
        msg = " ".join(str(e).split())
        print(f"{_error_kind(e)}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
