"""``asdscreen`` command line.

Exit codes: 0 success, 1 operational error, 2 audit or metric violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import ingest, metrics, preprocess, privacy, reporting, trainer
from .errors import AsdScreenError, ConfigError, ViolationError
from .model_zoo import (
    BACKBONE_NAMES,
    HeadConfig,
    backbone_spec,
    build_classifier,
    forward,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("asdscreen")

EXIT_OK, EXIT_ERROR, EXIT_VIOLATION = 0, 1, 2


class UsageError(AsdScreenError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for violations here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# access control


class _Access:
    def __init__(self, args):
        self.enabled = bool(getattr(args, "policy", None))
        if not self.enabled:
            return
        if not args.role:
            raise UsageError("--policy requires --role")
        self.policy = privacy.RolePolicy.load(args.policy)
        self.role = args.role
        self.log = privacy.AccessLog(args.access_log)

    def require(self, action: str, artifact_class: str, artifact) -> None:
        if not self.enabled:
            return
        if not privacy.authorize(self.policy, self.role, action, artifact_class, self.log,
                                 artifact=str(artifact)):
            raise ConfigError(f"access denied: role {self.role!r} may not {action} "
                              f"{artifact_class} ({artifact})")


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " +
                         ", ".join("--" + n.replace("_", "-") for n in missing))


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    _require(args, "root", "out", "salt")
    access = _Access(args)
    manifest = ingest.scan_corpus(args.root, args.salt.encode("utf-8"),
                                  timestamp=not args.no_timestamps)
    access.require("write", "manifests", args.out)
    ingest.write_manifest(manifest, args.out, timestamps=not args.no_timestamps)
    subjects = ingest.class_counts(manifest.records, by_subject=True)
    samples = ingest.class_counts(manifest.records)
    print(f"subjects: label1={subjects[1]} label0={subjects[0]}")
    print(f"samples:  label1={samples[1]} label0={samples[0]}")
    print(f"wrote {len(manifest)} records to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    _require(args, "manifest", "out")
    access = _Access(args)
    access.require("read", "manifests", args.manifest)
    manifest = ingest.read_manifest(args.manifest, args.locator)
    cfg = ingest.SplitConfig(args.train, args.val, args.test, args.seed,
                             stratify=not args.no_stratify, image_level=args.image_level)
    out = ingest.make_splits(manifest, cfg)
    access.require("write", "manifests", args.out)
    ingest.write_manifest(out, args.out, timestamps=not args.no_timestamps)
    for split in ("train", "val", "test"):
        counts = ingest.class_counts(out.split_records(split))
        print(f"{split:5s} {counts[0] + counts[1]:6d}  (label1={counts[1]} label0={counts[0]})")
    return EXIT_OK


def _plan_from_args(value) -> List[preprocess.AugmentationSpec]:
    if not value:
        return list(preprocess.DEFAULT_PLAN)
    if isinstance(value, list):
        tags = value
    elif Path(value).is_file():
        tags = json.loads(Path(value).read_text(encoding="utf-8"))
    else:
        tags = [t.strip() for t in value.split(";") if t.strip()]
    return [preprocess.AugmentationSpec.from_tag(t) for t in tags]


def cmd_augment_plan(args) -> int:
    _require(args, "manifest", "out")
    access = _Access(args)
    access.require("read", "manifests", args.manifest)
    manifest = ingest.read_manifest(args.manifest, args.locator)
    plan = _plan_from_args(args.augmentations)
    out = preprocess.expand_dataset(manifest, plan)
    access.require("write", "manifests", args.out)
    ingest.write_manifest(out, args.out, timestamps=not args.no_timestamps)
    before = len(manifest.split_records("train"))
    after = len(out.split_records("train"))
    print("plan: " + ", ".join(s.tag for s in plan))
    print(f"train records: {before} -> {after}")
    return EXIT_OK


def _load_split(manifest, split: str, side: int):
    recs = [r for r in manifest.records if r.split == split and r.modality == "color_frame"]
    cache = {}
    images = np.empty((len(recs), side, side, 3))
    for i, rec in enumerate(recs):
        base = ingest.base_sample_id(rec.sample_id)
        if base not in cache:
            cache[base] = preprocess.resize(
                preprocess.normalize(preprocess.load_image(manifest.resolve(rec))), side)
        spec = preprocess.augmentation_of(rec)
        images[i] = preprocess.augment(cache[base], spec) if spec else cache[base]
    labels = np.array([r.label for r in recs], dtype=np.int64)
    return recs, images, labels


def _class_weights(value, manifest):
    if value in (None, "", "none"):
        return None
    if value == "auto":
        return trainer.class_weights_from_manifest(manifest)
    if isinstance(value, (list, tuple)):
        return tuple(float(v) for v in value)
    parts = [float(v) for v in str(value).split(",")]
    if len(parts) != 2:
        raise ConfigError("--class-weights takes 'auto', 'none' or 'w0,w1'")
    return tuple(parts)


def cmd_train(args) -> int:
    _require(args, "manifest", "output_dir", "backbone")
    access = _Access(args)
    spec = backbone_spec(args.backbone, input_side=args.input_side,
                         feature_channels=args.feature_channels, frozen=not args.unfreeze)
    head = HeadConfig(hidden_units=args.hidden_units, dropout_rate=args.dropout)
    clf = build_classifier(spec, head, seed=args.seed, weights_dir=args.weights_dir)

    access.require("read", "manifests", args.manifest)
    manifest = ingest.read_manifest(args.manifest, args.locator)
    if args.oversample:
        manifest = trainer.oversample(manifest, seed=args.seed)
    cfg = trainer.TrainConfig(
        learning_rate=args.learning_rate, batch_size=args.batch_size, max_epochs=args.max_epochs,
        early_stop_patience=args.early_stop_patience, adagrad_epsilon=args.adagrad_epsilon,
        seed=args.seed, class_weights=_class_weights(args.class_weights, manifest),
        restore_best=not args.no_restore_best)

    _, x_train, y_train = _load_split(manifest, "train", spec.input_side)
    _, x_val, y_val = _load_split(manifest, "val", spec.input_side)
    if len(y_train) == 0 or len(y_val) == 0:
        raise ConfigError(f"need non-empty train and val image splits "
                          f"(got {len(y_train)} train, {len(y_val)} val)")

    def show(stats):
        print(f"epoch {stats.epoch:3d}  loss {stats.train_loss:.4f}  acc {stats.train_accuracy:.4f}"
              f"  val_loss {stats.val_loss:.4f}  val_acc {stats.val_accuracy:.4f}")

    result = trainer.train(clf, (x_train, y_train), (x_val, y_val), cfg, on_epoch=show,
                           timestamps=not args.no_timestamps)

    out = Path(args.output_dir)
    access.require("write", "checkpoints", out)
    save_checkpoint(result.classifier, out / "best.ckpt")
    save_checkpoint(result.last_classifier, out / "last.ckpt")
    trainer.write_history(result.history, out / "history.csv")
    _write_json(out / "train_config.json", {
        "backbone": asdict(spec),
        "head": asdict(head),
        "train": cfg.to_dict(),
        "manifest": str(args.manifest),
        "oversample": bool(args.oversample),
        "n_train": int(len(y_train)),
        "n_val": int(len(y_val)),
        "stop_reason": result.stop_reason,
        "best_epoch": result.best_epoch,
    })
    if not args.no_plots:
        reporting.plot_history(result.history, out / "history.png", title=spec.name)
    print(f"stopped: {result.stop_reason} after {len(result.history)} epochs; "
          f"best epoch {result.best_epoch}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _require(args, "checkpoint", "manifest", "output_dir")
    access = _Access(args)
    access.require("read", "checkpoints", args.checkpoint)
    clf = load_checkpoint(args.checkpoint, weights_dir=args.weights_dir)
    access.require("read", "manifests", args.manifest)
    manifest = ingest.read_manifest(args.manifest, args.locator)
    recs, images, labels = _load_split(manifest, args.split, clf.backbone.input_side)
    if len(recs) == 0:
        raise ConfigError(f"split {args.split!r} has no image records")
    scores = np.concatenate([forward(clf, images[i:i + 64]) for i in range(0, len(images), 64)])

    out = Path(args.output_dir)
    access.require("write", "reports", out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_id", "label", "score"])
        for rec, y, s in zip(recs, labels, scores):
            writer.writerow([rec.sample_id, int(y), repr(float(s))])

    groups = None
    if args.group_by:
        groups = [r.attributes.get(args.group_by, "unknown") for r in recs]
    name = args.name or clf.backbone.name
    report = metrics.evaluate(scores, labels, args.threshold, groups=groups, model=name)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    curve = metrics.roc_curve(scores, labels)
    (out / "roc.csv").write_text(curve.to_csv(), encoding="utf-8")
    if not args.no_plots:
        reporting.plot_roc(curve, out / "roc.png", report.auc, title=name)
    print(f"{name} on {args.split}: n={report.n} accuracy={report.accuracy:.4f} "
          f"precision={report.precision:.4f} recall={report.recall:.4f} auc={report.auc:.4f}")
    if report.disparity is not None:
        print(f"subgroup accuracy gap ({args.group_by}): {report.disparity:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    access = _Access(args)
    paths = list(args.reports or [])
    if args.reference:
        paths.append(reporting.reference_table_path())
    if not paths:
        raise UsageError("give at least one report file or --reference")
    rows = []
    for path in paths:
        access.require("read", "reports", path)
        rows.extend(reporting.load_rows(path))
    table = reporting.ComparisonTable(rows)
    text = table.render(args.report_format, extended=args.extended)
    if args.out:
        access.require("export", "reports", args.out)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if args.plot_dir:
        access.require("export", "reports", args.plot_dir)
        for metric in ("accuracy", "auc", "precision", "recall"):
            reporting.plot_metric_bars(table, metric, Path(args.plot_dir) / f"{metric}.png")
    return EXIT_OK


def _read_table_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_audit(args) -> int:
    _require(args, "k")
    access = _Access(args)
    if bool(args.manifest) == bool(args.table):
        raise UsageError("give exactly one of --manifest or --table")
    results = []
    manifest = None
    if args.manifest:
        access.require("read", "manifests", args.manifest)
        manifest = ingest.read_manifest(args.manifest, args.locator)
        rows = privacy.manifest_table(manifest, per_subject=not args.per_record)
    else:
        rows = _read_table_csv(args.table)
    qi = [c.strip() for c in (args.qi or "").split(",") if c.strip()]
    if not qi:
        raise UsageError("--qi needs at least one column")
    sensitive = args.sensitive or ("label" if args.l else None)
    table = privacy.QuasiIdentifierTable(rows, qi, sensitive)
    results.append(privacy.k_anonymity(table, args.k))
    if args.l:
        results.append(privacy.l_diversity(table, args.l))
    if args.names:
        if manifest is None:
            raise UsageError("--names needs --manifest")
        names = [n.strip() for n in Path(args.names).read_text(encoding="utf-8").splitlines()]
        results.append(privacy.anonymization_audit(manifest, [n for n in names if n]))

    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{status}  {res.check}  violations={len(res.violations)}")
        for v in res.violations[:20]:
            print(f"      {v}")
    if args.out:
        access.require("write", "reports", args.out)
        _write_json(Path(args.out), [r.as_dict() for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_VIOLATION


# --------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="JSON file with option defaults (CLI flags win)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-timestamps", action="store_true",
                   help="omit wall-clock values so reruns are byte-identical")
    p.add_argument("--policy", help="RBAC policy JSON; enables access checks")
    p.add_argument("--role", help="actor role checked against --policy")
    p.add_argument("--access-log", default="asdscreen_access.jsonl")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="asdscreen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("ingest", help="scan a corpus into a pseudonymized manifest")
    p.add_argument("--root")
    p.add_argument("--out")
    p.add_argument("--salt")
    _common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", help="assign train/val/test splits")
    p.add_argument("--manifest")
    p.add_argument("--locator")
    p.add_argument("--out")
    p.add_argument("--train", type=float, default=0.9)
    p.add_argument("--val", type=float, default=0.1)
    p.add_argument("--test", type=float, default=0.0)
    p.add_argument("--no-stratify", action="store_true")
    p.add_argument("--image-level", action="store_true",
                   help="split individual samples instead of subjects")
    _common(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("augment-plan", help="add augmented train records to a manifest")
    p.add_argument("--manifest")
    p.add_argument("--locator")
    p.add_argument("--out")
    p.add_argument("--plan", dest="augmentations",
                   help="JSON file of 7 tags, or ';'-separated tags (default plan otherwise)")
    _common(p)
    p.set_defaults(func=cmd_augment_plan)

    p = sub.add_parser("train", help="train the classification head")
    p.add_argument("--manifest")
    p.add_argument("--locator")
    p.add_argument("--backbone", choices=BACKBONE_NAMES)
    p.add_argument("--weights-dir")
    p.add_argument("--input-side", type=int, help="stub backbone only")
    p.add_argument("--feature-channels", type=int, help="stub backbone only")
    p.add_argument("--hidden-units", type=int, default=512)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--lr", dest="learning_rate", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", dest="max_epochs", type=int, default=50)
    p.add_argument("--patience", dest="early_stop_patience", type=int, default=5)
    p.add_argument("--adagrad-epsilon", type=float, default=1e-7)
    p.add_argument("--class-weights", help="'auto', 'none' or 'w0,w1'")
    p.add_argument("--oversample", action="store_true")
    p.add_argument("--unfreeze", action="store_true", help="also train the (stub) backbone")
    p.add_argument("--no-restore-best", action="store_true")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--no-plots", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a split with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--locator")
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=metrics.DEFAULT_THRESHOLD)
    p.add_argument("--group-by", help="attribute for per-subgroup metrics")
    p.add_argument("--name", help="model name recorded in the report")
    p.add_argument("--weights-dir")
    p.add_argument("--out", dest="output_dir")
    p.add_argument("--no-plots", action="store_true")
    _common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="render a model comparison table")
    p.add_argument("reports", nargs="*")
    p.add_argument("--reference", action="store_true",
                   help="include the bundled transcribed reference results")
    p.add_argument("--extended", action="store_true", help="add precision and recall columns")
    p.add_argument("--format", dest="report_format", default="markdown",
                   choices=reporting.FORMATS)
    p.add_argument("--out")
    p.add_argument("--plot-dir", help="write per-metric bar charts here")
    _common(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("audit", help="k-anonymity / l-diversity / anonymization audit")
    p.add_argument("--manifest")
    p.add_argument("--locator")
    p.add_argument("--table", help="CSV table instead of a manifest")
    p.add_argument("--k", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--qi", help="comma-separated quasi-identifier columns")
    p.add_argument("--sensitive", help="sensitive column (default: label when --l is given)")
    p.add_argument("--names", help="file of original subject names, one per line")
    p.add_argument("--per-record", action="store_true",
                   help="audit one row per record instead of one per subject")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_audit)
    return parser


def _apply_config(parser, argv):
    """CLI flags > --config file > built-in defaults."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return
    pre = _Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    try:
        raw = json.loads(Path(known.config).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {known.config}: {exc}") from None
    if not isinstance(raw, dict):
        raise UsageError("config file must hold a JSON object")
    subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in subparsers.choices), None)
    if command is None:
        return
    target = subparsers.choices[command]
    dests = {a.dest for a in target._actions}
    unknown = sorted(set(raw) - dests)
    if unknown:
        raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    target.set_defaults(**raw)


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
    except UsageError as exc:
        print(f"asdscreen: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_help(sys.stderr)
        return EXIT_ERROR
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser._subparsers._group_actions[0].choices[args.command].print_usage(sys.stderr)
        print(f"asdscreen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ViolationError as exc:
        print(f"asdscreen {args.command}: {exc}", file=sys.stderr)
        return EXIT_VIOLATION
    except (AsdScreenError, OSError, ValueError) as exc:
        print(f"asdscreen {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
