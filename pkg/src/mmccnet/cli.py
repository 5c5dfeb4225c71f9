"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(unreadable images, bad checkpoints, missing files), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    DataError,
    NetpbmError,
    SamplePair,
    SplitPlan,
    binarize_mask,
    load_dataset,
    load_netpbm,
    make_splits,
    save_dataset,
    save_netpbm,
    synth_polyp_dataset,
)
from .experiments import ExperimentSpec, collect_runs, run_experiment, write_reports
from .metrics import basic_metrics, confusion_counts
from .model import FEATURE_NAMES, ConfigError, ModelConfig, build_mmcc_net, grad_cam
from .training import CheckpointError, NumericError, Trainer, TrainPlan, checkpoint_load, evaluate

logger = logging.getLogger("mmccnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- configuration ------------------------------------------------------------


@dataclass
class SynthSettings:
    n: int = 16
    height: int = 64
    width: int = 96
    seed: int = 0
    difficulty: str = "easy"

    def build(self, prefix: str = "syn") -> list[SamplePair]:
        return synth_polyp_dataset(self.n, self.height, self.width, self.seed, self.difficulty, prefix)


@dataclass
class DataSettings:
    root: str | None = None
    size: tuple[int, int] | None = None
    split: str | None = None
    synthetic: SynthSettings | None = None
    test_synthetic: SynthSettings | None = None

    def load(self) -> list[SamplePair]:
        if self.root is not None:
            return load_dataset(self.root, self.size)
        if self.synthetic is not None:
            return self.synthetic.build()
        raise DataError("no data: pass --data or set data.root / data.synthetic in the config")

    def load_test(self) -> list[SamplePair] | None:
        return None if self.test_synthetic is None else self.test_synthetic.build(prefix="test")


@dataclass
class RunConfig:
    """Resolved configuration; JSON sections mirror the dataclasses."""

    model: ModelConfig = field(default_factory=ModelConfig.tiny)
    data: DataSettings = field(default_factory=DataSettings)
    train: TrainPlan = field(default_factory=TrainPlan)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "data", "train", "experiment"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        model = ModelConfig.from_dict({**ModelConfig.tiny().to_dict(), **d.get("model", {})})
        data_d = dict(d.get("data", {}))
        bad = set(data_d) - set(DataSettings.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown data config keys: {sorted(bad)}")
        for key in ("synthetic", "test_synthetic"):
            if data_d.get(key) is not None:
                sub = data_d[key]
                bad = set(sub) - set(SynthSettings.__dataclass_fields__)
                if bad:
                    raise ConfigError(f"unknown data.{key} keys: {sorted(bad)}")
                data_d[key] = SynthSettings(**sub)
        if data_d.get("size") is not None:
            data_d["size"] = tuple(data_d["size"])
        try:
            train = TrainPlan.from_dict(d.get("train", {}))
            experiment = ExperimentSpec.from_dict(d.get("experiment", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cls(model, DataSettings(**data_d), train, experiment)

    def to_dict(self) -> dict:
        return dict(model=self.model.to_dict(), data=asdict(self.data), train=self.train.to_dict(), experiment=self.experiment.to_dict())


def resolve_config(args) -> RunConfig:
    try:
        return _resolve_config(args)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DataError):
            raise
        raise ConfigError(str(exc)) from exc


def _resolve_config(args) -> RunConfig:
    raw = {}
    if getattr(args, "config", None):
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from exc
    cfg = RunConfig.from_dict(raw)
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.model = replace(cfg.model, init_seed=seed)
        cfg.train = replace(cfg.train, seed=seed)
        cfg.experiment = replace(cfg.experiment, seed=seed)
    overrides = {k: getattr(args, k, None) for k in ("lr", "epochs", "loss", "optimizer")}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        cfg.train = replace(cfg.train, **overrides)
    if getattr(args, "variant", None):
        cfg.model = ModelConfig.for_variant(args.variant, cfg.model)
    if getattr(args, "data", None):
        cfg.data = replace(cfg.data, root=args.data)
    if getattr(args, "protocol", None):
        cfg.experiment = replace(cfg.experiment, protocol=args.protocol)
    return cfg


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


# -- subcommands ------------------------------------------------------------------


def cmd_synth(args) -> None:
    s = SynthSettings(args.n, args.height, args.width, args.seed or 0, args.difficulty)
    samples = s.build()
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_split(args) -> None:
    if args.data:
        ids = [s.id for s in load_dataset(args.data)]
    elif args.count:
        ids = [f"img{i:05d}" for i in range(args.count)]
    else:
        raise UsageError("split needs --data or --count")
    plan = make_splits(ids, args.kind, k=args.k, seed=args.seed or 0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.tsv").write_text(plan.to_text())
    counts = {r: len(plan.members(r)) for r in plan.roles}
    print(" ".join(f"{r}={n}" for r, n in counts.items()))


def _split_samples(cfg: RunConfig, samples: list[SamplePair]):
    if cfg.data.split:
        plan = SplitPlan.from_text(Path(cfg.data.split).read_text())
    else:
        plan = make_splits([s.id for s in samples], "table1", seed=cfg.train.seed)
    by_id = {s.id: s for s in samples}
    missing = set(plan.assignment) - set(by_id)
    if missing:
        raise DataError(f"split names {len(missing)} unknown ids, e.g. {sorted(missing)[0]!r}")
    return [[by_id[i] for i in plan.members(r)] for r in ("train", "val", "test")]


def cmd_train(args) -> None:
    cfg = resolve_config(args)
    samples = cfg.data.load()
    train, val, test = _split_samples(cfg, samples)
    if not train:
        raise DataError("training split is empty")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    if args.resume:
        trainer = Trainer.resume(args.resume, cfg.model)
        # an explicit --epochs extends a run that finished its plan without early stopping
        if args.epochs is not None and args.epochs > trainer.epoch and not trainer.log.stopped_early:
            trainer.plan = replace(trainer.plan, epochs=args.epochs)
            trainer.finished = False
    else:
        trainer = Trainer(build_mmcc_net(cfg.model), cfg.train)
    try:
        log = trainer.fit(train, val)
    finally:
        (out / "train_log.csv").write_text(trainer.log.to_csv())
    trainer.save(out / "model.ckpt")
    summary = dict(epochs=len(log.records), best_epoch=log.best_epoch, stopped_early=log.stopped_early,
                   parameters=asdict(trainer.model.count_parameters()))
    if test:
        summary["test"] = evaluate(trainer.model, test, cfg.train.threshold).means
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"trained {len(log.records)} epochs; checkpoint {out / 'model.ckpt'}")


def _per_image_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\r\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()


def cmd_eval(args) -> None:
    ck = checkpoint_load(args.checkpoint)
    samples = load_dataset(args.data, args.size)
    report = evaluate(ck.model, samples, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(dict(condition="eval", order=0, metrics=report.means), indent=2, sort_keys=True) + "\n")
    (out / "per_image.csv").write_text(_per_image_csv(report.per_image))
    print(" ".join(f"{k}={v:.4f}" for k, v in report.means.items()))


def _load_image(path) -> np.ndarray:
    img = load_netpbm(path)
    return np.repeat(img, 3, axis=0) if img.shape[0] == 1 else img


def overlay(image: np.ndarray, pred: np.ndarray, truth: np.ndarray | None) -> np.ndarray:
    """Colour overlay: hits yellow, missed ground truth green, false alarms red."""
    out = 0.5 * image.copy()
    p = pred[0].astype(bool)
    colours = {}
    if truth is None:
        colours[(1.0, 1.0, 0.0)] = p
    else:
        t = truth[0].astype(bool)
        colours[(1.0, 1.0, 0.0)] = p & t
        colours[(0.0, 1.0, 0.0)] = t & ~p
        colours[(1.0, 0.0, 0.0)] = p & ~t
    for rgb, where in colours.items():
        for c in range(3):
            out[c][where] = rgb[c]
    return out


def cmd_segment(args) -> None:
    ck = checkpoint_load(args.checkpoint)
    image = _load_image(args.image)
    truth = binarize_mask(load_netpbm(args.mask)[:1]) if args.mask else None
    if truth is not None and truth.shape[1:] != image.shape[1:]:
        raise DataError(f"mask {truth.shape[1:]} does not match image {image.shape[1:]}")
    prob = ck.model.predict_proba(image[None].astype(np.float32))[0]
    pred = (prob >= args.threshold).astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_netpbm(pred, out / "mask.pgm")
    save_netpbm(overlay(image, pred, truth), out / "overlay.ppm")
    if truth is not None:
        c = confusion_counts(pred, truth)
        result = dict(counts=asdict(c), metrics=basic_metrics(c))
        (out / "segment.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'mask.pgm'} and {out / 'overlay.ppm'}")


def cmd_gradcam(args) -> None:
    ck = checkpoint_load(args.checkpoint)
    image = _load_image(args.image)
    try:
        cam = grad_cam(ck.model, image, args.layer)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_netpbm(cam[0], out / "heatmap.pgm")
    print(f"wrote {out / 'heatmap.pgm'}")


def cmd_experiment(args) -> None:
    cfg = resolve_config(args)
    samples = cfg.data.load()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    run_experiment(cfg.experiment, samples, cfg.model, cfg.train, out, test_samples=cfg.data.load_test())
    print(f"wrote {out / 'report.md'}")


def cmd_report(args) -> None:
    runs = collect_runs(args.runs)
    csv_path, md_path = write_reports(runs, args.out)
    sys.stdout.write(md_path.read_text())


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmccnet", description="Polyp segmentation: training, evaluation and experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, data=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory with images/ and masks/")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--difficulty", choices=("easy", "hard"), default="easy")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write an id<TAB>role split file")
    common(p)
    p.add_argument("--count", type=int, help="split N placeholder ids instead of a dataset")
    p.add_argument("--kind", choices=("table1", "kfold"), default="table1")
    p.add_argument("--k", type=int, default=5)
    p.set_defaults(func=cmd_split)

    for name, func in (("train", cmd_train), ("experiment", cmd_experiment)):
        p = sub.add_parser(name, help=f"{name} from a JSON run config")
        common(p)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--lr", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--loss")
        p.add_argument("--optimizer", choices=("sgd", "adam"))
        p.add_argument("--variant", choices=("network1", "network2", "network3", "network4"))
        if name == "train":
            p.add_argument("--resume", help="continue from a checkpoint written by train")
        else:
            p.add_argument("--protocol")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment one image into a mask and an overlay")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="ground-truth mask for the overlay and counts")
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gradcam", help="write a Grad-CAM heatmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--layer", default="DF_A", help=f"one of {', '.join(FEATURE_NAMES)}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gradcam)

    p = sub.add_parser("report", help="aggregate run directories into CSV and markdown tables")
    p.add_argument("runs", help="directory containing run metrics.json files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}; lower the learning rate or check the inputs", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, NetpbmError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
