"""Command-line entry point: ``stereo3d <command> [flags]``.

Numeric settings come from YAML config files; flags pick files and modes.
Relative paths resolve against ``--root``. Exit status is 0 on success, 1
on data errors and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import yaml

from .anchor import PriorSizeEstimator, format_prior_table
from .dataset.kitti import KittiDataset, read_label_dir, write_label_dir
from .dataset.synth import SceneSpec, generate_dataset
from .errors import Stereo3DError
from .evaluation import EvalConfig, evaluate, evaluate_labels, plot_pr_dir, write_report
from .pipeline import DetectorConfig, detection_to_label, infer, load_model, train

ABLATION_FUSIONS = ("concat", "add", "reweight")
ABLATION_IOUS = (0.3, 0.5, 0.7)


class UsageError(Exception):
    pass


def _path(root: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else root / p


def _detector_config(root, path) -> DetectorConfig:
    return DetectorConfig() if path is None else DetectorConfig.load(_path(root, path))


def _eval_config(root, path) -> EvalConfig:
    if path is None:
        return EvalConfig()
    d = yaml.safe_load(_path(root, path).read_text()) or {}
    return EvalConfig(**d)


# ---------------------------------------------------------------------------
# commands


def cmd_priors(args, root):
    labels = [lab for labs in read_label_dir(_path(root, args.labels)).values() for lab in labs]
    est = PriorSizeEstimator(classes=args.classes or None).fit(labels)
    text = format_prior_table(est.priors_)
    if args.out:
        _path(root, args.out).write_text(text)
    print(text, end="")


def cmd_synth(args, root):
    spec = SceneSpec.from_dict(yaml.safe_load(_path(root, args.scene).read_text()) or {})
    out = KittiDataset(_path(root, args.out), stereo=spec.stereo)
    for frame in generate_dataset(spec, args.count, args.start):
        out.write(frame)
    print(f"wrote {args.count} frames to {out.root}")


def _frames(root, data, stereo, split=None, require_labels=True):
    ds = KittiDataset(
        _path(root, data), stereo=stereo, split_file=None if split is None else _path(root, split), require_labels=require_labels
    )
    return list(ds)


def cmd_train(args, root):
    config = _detector_config(root, args.config)
    frames = _frames(root, args.data, config.mode == "stereo", args.split)
    result = train(config, frames, _path(root, args.out), verbose=not args.quiet)
    result.config.save(_path(root, args.out) / "config.yaml")
    print(f"trained {sum(config.iterations)} iterations; checkpoint {_path(root, args.out) / 'final.tlnt'}")


def _write_detections(model, config, frames, out_dir):
    labels = {}
    for f in frames:
        labels[f.id] = [detection_to_label(d, f.calib) for d in infer(f, config, model)]
    write_label_dir(out_dir, labels)
    return labels


def cmd_infer(args, root):
    override = None if args.config is None else _detector_config(root, args.config)
    model, config = load_model(_path(root, args.checkpoint), override)
    frames = _frames(root, args.data, config.mode == "stereo", args.split, require_labels=False)
    labels = _write_detections(model, config, frames, _path(root, args.out))
    print(f"wrote detections for {len(labels)} frames to {_path(root, args.out)}")


def cmd_eval(args, root):
    report = evaluate(_path(root, args.det), _path(root, args.gt), _eval_config(root, args.config), _path(root, args.out))
    print(report.table())


def cmd_ablate(args, root):
    base = _detector_config(root, args.config)
    eval_cfg = _eval_config(root, args.eval_config)
    out = _path(root, args.out)
    train_frames = _frames(root, args.train, True)
    test_frames = _frames(root, args.test, True)
    gts = {f.id: f.labels for f in test_frames}
    reports = {}
    for name, mode, fusion in [("mono", "mono", base.fusion)] + [(f, "stereo", f) for f in ABLATION_FUSIONS]:
        config = base.replace(mode=mode, fusion=fusion)
        result = train(config, train_frames, out / name, verbose=not args.quiet)
        dets = _write_detections(result.model, result.config, test_frames, out / name / "detections")
        reports[name] = evaluate_labels(dets, gts, eval_cfg)
        write_report(reports[name], out / name / "eval")
    rows = ablation_rows(reports, eval_cfg.regimes)
    with open(out / "ablation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("model", "iou", *eval_cfg.regimes))
        for r in rows:
            w.writerow([r[0], r[1], *(repr(v) for v in r[2:])])
    print(format_ablation(rows, eval_cfg.regimes))


def ablation_rows(reports: dict, regimes) -> list[tuple]:
    """AP3D rows ``(model, iou, *per-regime AP)``: fusion modes first, then mono if present."""
    names = [n for n in ABLATION_FUSIONS if n in reports] + (["mono"] if "mono" in reports else [])
    return [
        (name, iou, *(reports[name].ap("iou3d", iou, r) for r in regimes)) for name in names for iou in ABLATION_IOUS
    ]


def format_ablation(rows, regimes) -> str:
    head = f"{'model':<10s}{'IoU':>6s}" + "".join(f"{r:>10s}" for r in regimes)
    lines = [head, "-" * len(head)]
    for name, iou, *aps in rows:
        lines.append(f"{name:<10s}{iou:6.1f}" + "".join(f"{100 * v:10.2f}" for v in aps))
    return "\n".join(lines)


def cmd_gradcheck(args, root):
    from .gradsuite import run_suite

    ops_report, comp_report = run_suite(args.configs, args.seed)
    for rep in (ops_report, comp_report):
        if args.verbose:
            for line in rep.lines():
                print(line)
        status = "pass" if rep.passed else "FAIL"
        print(f"{status}: {len(rep.errors)} checks, max relative error {rep.max_error:.3e} (tolerance {rep.tolerance:g})")
    return 0 if ops_report.passed and comp_report.passed else 1


def cmd_plot(args, root):
    for p in plot_pr_dir(_path(root, args.pr), _path(root, args.out)):
        print(p)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stereo3d", description="Stereo 3D detection toolkit.")
    parser.add_argument("--root", default=".", help="base directory for relative paths")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("priors", help="per-class mean box sizes from a label directory")
    p.add_argument("--labels", required=True)
    p.add_argument("--classes", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_priors)

    p = sub.add_parser("synth", help="render a synthetic stereo dataset from a scene file")
    p.add_argument("--scene", required=True, help="YAML scene spec")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--start", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--config", help="YAML detector config")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="write KITTI detections for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", help="override the config stored in the checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--split")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AP over detection and ground-truth label directories")
    p.add_argument("--det", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--config", help="YAML evaluation config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train mono and each fusion mode, compare AP3D")
    p.add_argument("--config", help="YAML detector config shared by all runs")
    p.add_argument("--eval-config")
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="SVG plots from PR-curve CSVs")
    p.add_argument("--pr", required=True, help="directory of recall,precision CSV files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    root = Path(args.root)
    try:
        return args.func(args, root) or 0
    except (Stereo3DError, FileNotFoundError, ValueError, yaml.YAMLError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
