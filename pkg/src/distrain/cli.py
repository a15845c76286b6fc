"""Operator commands: train, evaluate, explain, robustness.

Every command is a pure function of its inputs and seeds; rerunning with
the same config produces byte-identical artifacts. Exit codes: 0 ok,
2 config error, 3 data error, 4 numeric failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, parse_config, parse_synth_spec
from .data import Dataset, load_dir, resize_bilinear, split, synth_generate
from .distraction import train_distraction
from .errors import (
    ConfigError,
    DataError,
    DegenerateSampleError,
    DistrainError,
    NumericError,
)
from .layers import build_small_cam_net
from .metrics import (
    EvalReport,
    erased_copy,
    evaluate_report,
    paired_t_test,
)
from .optim import predict, train_baseline
from .pnm import read_pnm
from .saliency import export_heatmap, grad_cam, threshold_mask
from .tensor import Tensor

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


def _load_dataset(spec: str, image_size: int, seed: int) -> Dataset:
    if spec.startswith("synth:"):
        return synth_generate(parse_synth_spec(spec, seed))
    return load_dir(spec, image_size)


def _parse_range(text: str, what: str) -> tuple:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise ConfigError(f"{what} must be LO:HI, got {text!r}")


def _summary_table(reports: list[EvalReport]) -> str:
    keys = EvalReport.record_header().split("\t")
    rows = ["metric\tmean\tstd"]
    values = {k: np.array([r.values()[k] for r in reports]) for k in keys}
    for k in keys:
        rows.append(f"{k}\t{values[k].mean():.6f}\t{values[k].std():.6f}")
    return "\n".join(rows) + "\n"


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(cfg.dataset, cfg.image_size, cfg.seed)
    reports: list[EvalReport] = []
    runs_lines = ["run\tseed\t" + EvalReport.record_header()]
    for run in range(cfg.runs):
        run_seed = cfg.seed + run
        train_set, val_set, test_set = split(dataset, SPLIT_FRACTIONS, run_seed)
        model = build_small_cam_net(
            dataset.images.shape[1], dataset.num_classes, run_seed
        )
        tc = cfg.train_config(run_seed)
        log_path = out / f"run{run}.log"
        step_path = out / f"run{run}.steps.tsv" if args.step_log else None
        dump_dir = None
        if args.dump_occluded > 0:
            dump_dir = out / "occluded"
            dump_dir.mkdir(exist_ok=True)
        with open(log_path, "w") as log_fh:
            sink = lambda line: print(line, file=log_fh)
            if cfg.mode == "baseline":
                result = train_baseline(
                    model, train_set.images, train_set.labels,
                    val_set.images, val_set.labels, tc, log_sink=sink,
                )
            else:
                step_fh = open(step_path, "w") if step_path else None
                try:
                    result = train_distraction(
                        model, train_set.images, train_set.labels,
                        val_set.images, val_set.labels, tc, log_sink=sink,
                        step_log=(
                            (lambda line: print(line, file=step_fh)) if step_fh else None
                        ),
                        dump_dir=str(dump_dir) if dump_dir else None,
                        dump_first=args.dump_occluded,
                    )
                finally:
                    if step_fh:
                        step_fh.close()
        checkpoint.save_model(out / f"run{run}.ckpt", result.model)
        preds = predict(result.model, test_set.images)
        report = evaluate_report(test_set.labels, preds, dataset.num_classes)
        reports.append(report)
        runs_lines.append(f"{run}\t{run_seed}\t" + report.to_record())
        print(
            f"run {run}: epochs={result.epochs_run} best_val={result.best_val_acc:.6f} "
            f"test_acc={report.accuracy:.6f}"
        )
    (out / "runs.tsv").write_text("\n".join(runs_lines) + "\n")
    summary = _summary_table(reports)
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def _read_runs_accuracies(path) -> np.ndarray:
    lines = Path(path).read_text().strip().splitlines()
    if len(lines) < 2:
        raise DataError(f"runs table {path} has no data rows")
    header = lines[0].split("\t")
    try:
        col = header.index("accuracy")
    except ValueError:
        raise DataError(f"runs table {path} has no accuracy column")
    return np.array([float(line.split("\t")[col]) for line in lines[1:]])


def cmd_evaluate(args) -> int:
    if args.compare:
        a = _read_runs_accuracies(args.compare[0])
        b = _read_runs_accuracies(args.compare[1])
        t, p = paired_t_test(a, b)
        print(f"t={t:.6f}\np={p:.6f}")
        return 0
    if not args.checkpoint or not args.dataset:
        raise ConfigError("evaluate needs CHECKPOINT and DATASET (or --compare A B)")
    model = checkpoint.load_model(args.checkpoint)
    dataset = _load_dataset(args.dataset, args.image_size, args.seed)
    if model.num_classes != dataset.num_classes:
        raise DataError(
            f"checkpoint has {model.num_classes} classes, dataset has {dataset.num_classes}"
        )
    preds = predict(model, dataset.images)
    report = evaluate_report(dataset.labels, preds, dataset.num_classes)
    text = report.to_text()
    out_path = args.out or (str(args.checkpoint) + ".eval.txt")
    Path(out_path).write_text(text)
    print(text, end="")
    return 0


def cmd_explain(args) -> int:
    model = checkpoint.load_model(args.checkpoint)
    arr = read_pnm(args.image)
    if arr.ndim != 3:
        raise DataError(f"explain expects a color P6 image: {args.image}")
    image = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    if args.size:
        image = resize_bilinear(image, args.size, args.size)
    logits = model.forward(Tensor(image[None, ...]))
    predicted = int(logits.data.argmax())
    target = predicted if args.target is None else int(args.target)
    if not (0 <= target < model.num_classes):
        raise ConfigError(
            f"target class {target} outside [0, {model.num_classes})"
        )
    heat = grad_cam(model, Tensor(image), target)
    prefix = args.out_prefix or str(Path(args.image).with_suffix(""))
    heat_path, overlay_path = export_heatmap(prefix, image, heat)
    area = threshold_mask(heat, args.th).fraction
    print(f"predicted_class={predicted}")
    print(f"target_class={target}")
    print(f"salient_area@{args.th:g}={area:.6f}")
    print(f"heat={heat_path}")
    print(f"overlay={overlay_path}")
    return 0


def cmd_robustness(args) -> int:
    area = _parse_range(args.area, "--area")
    aspect = _parse_range(args.aspect, "--aspect")
    models = [checkpoint.load_model(args.checkpoint)]
    names = [str(args.checkpoint)]
    if args.second:
        models.append(checkpoint.load_model(args.second))
        names.append(str(args.second))
    if len(models) == 2 and models[0].num_classes != models[1].num_classes:
        raise DataError("the two checkpoints disagree on class count")
    dataset = _load_dataset(args.dataset, args.image_size, args.seed)
    if models[0].num_classes != dataset.num_classes:
        raise DataError(
            f"checkpoint has {models[0].num_classes} classes, "
            f"dataset has {dataset.num_classes}"
        )
    erased = erased_copy(dataset.images, args.erase_seed, area, aspect)
    reports = [
        evaluate_report(dataset.labels, predict(m, erased), dataset.num_classes)
        for m in models
    ]
    lines = []
    if len(reports) == 1:
        lines.append(f"# erased evaluation of {names[0]}")
        lines.append(reports[0].to_text().rstrip("\n"))
    else:
        lines.append("metric\tmodel_a\tmodel_b")
        for key in EvalReport.record_header().split("\t"):
            a, b = reports[0].values()[key], reports[1].values()[key]
            lines.append(f"{key}\t{a:.6f}\t{b:.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distrain",
        description="Train and inspect small CNN classifiers with "
        "saliency-guided occlusion training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run seeded training repetitions")
    p_train.add_argument("config", help="flat key=value config file")
    p_train.add_argument(
        "--step-log", action="store_true", help="write per-step gate decisions"
    )
    p_train.add_argument(
        "--dump-occluded", type=int, default=0, metavar="K",
        help="dump modified batches for the first K applied steps",
    )
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("checkpoint", nargs="?", default=None)
    p_eval.add_argument("dataset", nargs="?", default=None)
    p_eval.add_argument("--image-size", type=int, default=64)
    p_eval.add_argument("--seed", type=int, default=42, help="synth dataset seed")
    p_eval.add_argument("--out", default=None, help="where to write the report")
    p_eval.add_argument(
        "--compare", nargs=2, metavar=("RUNS_A", "RUNS_B"),
        help="paired t-test between two runs.tsv accuracy columns",
    )
    p_eval.set_defaults(fn=cmd_evaluate)

    p_explain = sub.add_parser("explain", help="write heat map and overlay for an image")
    p_explain.add_argument("checkpoint")
    p_explain.add_argument("image", help="P6 portable pixmap")
    p_explain.add_argument(
        "--target", type=int, default=None,
        help="class to explain (default: predicted class)",
    )
    p_explain.add_argument("--th", type=float, default=0.85)
    p_explain.add_argument("--size", type=int, default=None, help="resize before explain")
    p_explain.add_argument("--out-prefix", default=None)
    p_explain.set_defaults(fn=cmd_explain)

    p_rob = sub.add_parser("robustness", help="evaluate on a randomly-erased test set")
    p_rob.add_argument("checkpoint")
    p_rob.add_argument("dataset")
    p_rob.add_argument("--second", default=None, help="second checkpoint to compare")
    p_rob.add_argument("--erase-seed", type=int, default=0)
    p_rob.add_argument("--seed", type=int, default=42, help="synth dataset seed")
    p_rob.add_argument("--image-size", type=int, default=64)
    p_rob.add_argument("--area", default="0.02:0.4")
    p_rob.add_argument("--aspect", default="0.3:3.3")
    p_rob.add_argument("--out", default=None)
    p_rob.set_defaults(fn=cmd_robustness)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    except DegenerateSampleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DistrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
