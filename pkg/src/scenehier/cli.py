"""Command-line entry points.

Subcommands: gen-synth, build-hierarchy, train, eval, infill. Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical abort. Every report
CSV gets a rendered figure next to it.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .data_model import (
    ClassCatalog,
    DataError,
    Hyperparameters,
    TrainingSample,
    ValidatedDataset,
    validate_dataset,
)
from .evaluation import (
    ConfusionMatrix,
    accuracy,
    confusion_from_maps,
    per_class_delta,
    predict_label_map,
    write_confusion_csv,
    write_delta_csv,
    write_metrics_csv,
)
from .hierarchy import (
    assign_subclasses,
    build_aggregation_matrix,
    build_labelmap_hierarchy,
    build_scene_name_hierarchy,
    default_n_star,
    describe_subclass,
    hierarchy_digest,
    load_hierarchy,
    partition_classes,
    save_hierarchy,
)
from .ingestion import (
    AugmentationConfig,
    augment_image,
    load_images,
    read_class_list,
    sample_centers,
    save_labelmap,
    write_class_list,
    write_manifest,
)
from .network import (
    CLASS_SPACE,
    NumericalAbort,
    build_default_model,
    load_checkpoint,
    save_checkpoint,
)
from .rng import derive_seed
from .schedules import baseline_schedule, hierarchical_schedule, run_schedule, sequential_schedule
from .synthetic import SyntheticSpec, generate_synthetic
from . import plots
from .hierarchy import infill_unlabeled


def load_dataset_with_samples(
    manifest: str, class_list: str, grid_cell_pixels: int
) -> tuple[ValidatedDataset, list[TrainingSample]]:
    """Load, validate, grid-sample, and tally per-class sample counts."""
    images = load_images(Path(manifest))
    names = read_class_list(Path(class_list))
    validate_dataset(images, ClassCatalog(tuple(names), (0,) * len(names)))
    samples: list[TrainingSample] = []
    for img in images:
        for center in sample_centers(img, grid_cell_pixels):
            samples.append(
                TrainingSample(img.id, center, int(img.labels[center[0], center[1]]))
            )
    counts = np.zeros(len(names), dtype=np.int64)
    for s in samples:
        counts[s.class_label] += 1
    catalog = ClassCatalog(tuple(names), tuple(int(c) for c in counts))
    return validate_dataset(images, catalog), samples


def _hierarchy_path(cfg: ExperimentConfig) -> Path:
    if cfg.hierarchy_file is not None:
        return Path(cfg.hierarchy_file)
    return Path(cfg.out_dir) / "hierarchy.txt"


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(
        classes=args.classes,
        contexts=args.contexts,
        images=args.images,
        size=args.size,
        noise=args.noise,
        seed=args.seed,
    )
    generate_synthetic(spec, Path(args.out))
    print(f"wrote {args.images} images to {args.out}")
    return 0


def cmd_build_hierarchy(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, samples = load_dataset_with_samples(
        cfg.manifest, cfg.class_list, cfg.grid_cell_pixels
    )
    common, rare = partition_classes(dataset.catalog, cfg.hyper.rho)
    if cfg.hierarchy_mode == "scene-name":
        hierarchy, assigned = build_scene_name_hierarchy(samples, dataset, common, rare)
    else:
        n_star = cfg.n_star if cfg.n_star is not None else default_n_star(samples, common, rare)
        hierarchy, assigned, _ = build_labelmap_hierarchy(
            samples, dataset, common, rare, cfg.hyper.R, n_star,
            derive_seed(cfg.seed, "hierarchy"),
        )
    save_hierarchy(out / "hierarchy.txt", hierarchy)

    counts = np.zeros(hierarchy.n_subclasses, dtype=np.int64)
    for s in assigned:
        counts[s.subclass_label] += 1
    rows = sorted(
        range(hierarchy.n_subclasses), key=lambda sid: (-int(counts[sid]), sid)
    )
    names = [describe_subclass(hierarchy, dataset.catalog, sid) for sid in range(hierarchy.n_subclasses)]
    with open(out / "subclass_frequencies.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subclass_id", "subclass_name", "parent_class", "count"])
        for sid in rows:
            writer.writerow([sid, names[sid], hierarchy.parent[sid], int(counts[sid])])
    plots.subclass_frequency_figure(
        out / "subclass_frequencies.png", names, [int(c) for c in counts]
    )
    print(
        f"hierarchy: {hierarchy.n_subclasses} subclasses over "
        f"{hierarchy.n_classes} classes ({len(common)} common, {len(rare)} rare)"
    )
    return 0


def _training_corpus(cfg: ExperimentConfig, dataset: ValidatedDataset, samples):
    """Originals plus augmented copies, with samples for every copy."""
    extra = {}
    all_samples = list(samples)
    if cfg.augment_copies > 0:
        aug_cfg = AugmentationConfig(
            seed=cfg.seed,
            n_copies=cfg.augment_copies,
            scale_range=cfg.scale_range,
            rotation_range_deg=cfg.rotation_range,
            flip_probability=cfg.flip_probability,
        )
        for img in dataset.images:
            for k in range(cfg.augment_copies):
                copy = augment_image(img, aug_cfg, k)
                extra[copy.id] = copy
                for center in sample_centers(copy, cfg.grid_cell_pixels):
                    all_samples.append(
                        TrainingSample(
                            copy.id, center, int(copy.labels[center[0], center[1]])
                        )
                    )
    return all_samples, extra


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, samples = load_dataset_with_samples(
        cfg.manifest, cfg.class_list, cfg.grid_cell_pixels
    )
    L = dataset.catalog.n_classes
    expected = cfg.expected_stage_count()
    if len(cfg.iterations) != expected:
        raise DataError(
            f"strategy {cfg.strategy} needs {expected} iteration counts, "
            f"got {len(cfg.iterations)}"
        )
    samples, extra = _training_corpus(cfg, dataset, samples)
    images_by_id = dict(dataset.by_id)
    images_by_id.update(extra)

    model_seed = derive_seed(cfg.seed, "model")
    if cfg.strategy == "baseline":
        model = build_default_model(
            cfg.hyper.patch_size, L, model_seed, cfg.conv_channels, cfg.fc_dim
        )
        stages = baseline_schedule(cfg.iterations[0])
    else:
        hpath = _hierarchy_path(cfg)
        if not hpath.exists():
            raise DataError(f"strategy {cfg.strategy} needs a hierarchy file at {hpath}")
        hierarchy = load_hierarchy(hpath)
        if hierarchy.n_classes != L:
            raise DataError(
                f"hierarchy covers {hierarchy.n_classes} classes, dataset has {L}"
            )
        samples = assign_subclasses(samples, images_by_id, hierarchy, cfg.hyper.R)
        if cfg.strategy == "sequential":
            model = build_default_model(
                cfg.hyper.patch_size, L, model_seed, cfg.conv_channels, cfg.fc_dim
            )
            stages = sequential_schedule(
                hierarchy.n_subclasses, L, cfg.iterations, cfg.include_step3
            )
        else:
            model = build_default_model(
                cfg.hyper.patch_size, hierarchy.n_subclasses, model_seed,
                cfg.conv_channels, cfg.fc_dim,
            )
            stages = hierarchical_schedule(build_aggregation_matrix(hierarchy), cfg.iterations)
        model.hierarchy_id = hierarchy_digest(hierarchy)

    try:
        model, report = run_schedule(
            model, stages, samples, dataset, cfg.hyper, cfg.seed,
            record_interval=cfg.record_interval, early_stop=cfg.early_stop,
            extra_images=extra,
        )
    except NumericalAbort as exc:
        partial = getattr(exc, "partial_report", None)
        if partial is not None:
            partial.to_csv(out / "report.csv")
        print(f"training aborted: {exc}", file=sys.stderr)
        return 3
    save_checkpoint(out / "checkpoint.bin", model)
    report.to_csv(out / "report.csv")
    plots.loss_curves_figure(out / "loss_curves.png", report)
    print(f"trained {cfg.strategy} for {sum(s.iterations for s in stages)} budgeted iterations")
    return 0


def _check_class_capable(model, L: int) -> None:
    if model.aggregation_W is not None:
        if model.aggregation_W.shape[0] != L:
            raise DataError(
                f"checkpoint aggregates to {model.aggregation_W.shape[0]} classes, "
                f"dataset has {L}"
            )
    elif model.head_label_space != CLASS_SPACE or model.n_outputs != L:
        raise DataError(
            f"checkpoint head ({model.head_label_space}, {model.n_outputs} outputs) "
            f"cannot predict the {L}-class catalog"
        )


def _evaluate_checkpoint(model, dataset: ValidatedDataset, stride: int):
    conf = ConfusionMatrix(np.zeros((dataset.catalog.n_classes, dataset.catalog.n_classes), dtype=np.int64))
    maps = {}
    for img in dataset.images:
        predicted = predict_label_map(model, img, stride)
        maps[img.id] = predicted
        conf = conf.merged(confusion_from_maps(img.labels, predicted, dataset.catalog.n_classes))
    return conf, maps


def cmd_eval(cfg: ExperimentConfig, checkpoint: str, compare: str | None,
             manifest: str | None) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataset, _ = load_dataset_with_samples(
        manifest or cfg.manifest, cfg.class_list, cfg.grid_cell_pixels
    )
    L = dataset.catalog.n_classes
    model = load_checkpoint(checkpoint)
    _check_class_capable(model, L)
    conf, maps = _evaluate_checkpoint(model, dataset, cfg.eval_stride)

    predictions = out / "predictions"
    predictions.mkdir(exist_ok=True)
    for image_id in sorted(maps):
        save_labelmap(predictions / f"{image_id}.png", maps[image_id])
    per_pixel, per_class = accuracy(conf)
    write_metrics_csv(out / "metrics.csv", per_pixel, per_class, conf.ignored)
    write_confusion_csv(out / "confusion.csv", conf, dataset.catalog)
    totals = conf.counts.sum(axis=1)
    recalls = {
        j: float(conf.counts[j, j] / totals[j]) for j in range(L) if totals[j] > 0
    }
    plots.per_class_accuracy_figure(out / "per_class_accuracy.png", dataset.catalog, recalls)
    print(f"per_pixel={per_pixel:.4f} per_class={per_class:.4f} ignored={conf.ignored}")

    if compare is not None:
        other = load_checkpoint(compare)
        _check_class_capable(other, L)
        conf_other, _ = _evaluate_checkpoint(other, dataset, cfg.eval_stride)
        deltas = per_class_delta(conf_other, conf)
        write_delta_csv(out / "per_class_delta.csv", deltas, dataset.catalog)
        plots.per_class_delta_figure(out / "per_class_delta.png", dataset.catalog, deltas)
        print(f"wrote per-class deltas over {compare}")
    return 0


def cmd_infill(cfg: ExperimentConfig, checkpoint: str) -> int:
    out = Path(cfg.out_dir) / "infilled"
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    images = load_images(Path(cfg.manifest))
    names = read_class_list(Path(cfg.class_list))
    validate_dataset(images, ClassCatalog(tuple(names), (0,) * len(names)))
    model = load_checkpoint(checkpoint)
    _check_class_capable(model, len(names))

    filled_images, filled_ids = infill_unlabeled(
        images,
        lambda img: predict_label_map(model, img, cfg.eval_stride),
        cfg.infill_threshold,
    )
    source = {row[0]: row for row in _manifest_rows(cfg.manifest)}
    manifest_base = Path(cfg.manifest).parent
    rows = []
    for img in filled_images:
        _, image_rel, labels_rel, scene = source[img.id]
        image_name = Path(image_rel).name
        shutil.copyfile(manifest_base / image_rel, out / "images" / image_name)
        label_name = Path(labels_rel).name
        if img.id in filled_ids:
            save_labelmap(out / "labels" / label_name, img.labels)
        else:
            shutil.copyfile(manifest_base / labels_rel, out / "labels" / label_name)
        rows.append((img.id, f"images/{image_name}", f"labels/{label_name}", scene))
    write_manifest(out / "manifest.tsv", rows)
    write_class_list(out / "classes.txt", names)
    print(f"infilled {len(filled_ids)} of {len(images)} images into {out}")
    return 0


def _manifest_rows(manifest: str):
    from .ingestion import read_manifest

    return read_manifest(Path(manifest))


# ---------------------------------------------------------------------------
# Argument wiring
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out_dir"] = args.out
    if getattr(args, "hierarchy_mode", None) is not None:
        updates["hierarchy_mode"] = args.hierarchy_mode
    if getattr(args, "infill_threshold", None) is not None:
        updates["infill_threshold"] = args.infill_threshold
    if getattr(args, "n_star", None) is not None:
        updates["n_star"] = args.n_star
    hyper_updates = {}
    if getattr(args, "rho", None) is not None:
        hyper_updates["rho"] = args.rho
    if getattr(args, "R", None) is not None:
        hyper_updates["R"] = float("inf") if args.R == "inf" else float(int(args.R))
    if hyper_updates:
        updates["hyper"] = dataclasses.replace(cfg.hyper, **hyper_updates)
    return dataclasses.replace(cfg, **updates) if updates else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="override the output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="scenehier", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-synth", help="generate a planted synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--contexts", type=int, default=2)
    g.add_argument("--images", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--seed", type=int, required=True)

    b = sub.add_parser("build-hierarchy", help="build and save a label hierarchy")
    _add_common(b)
    b.add_argument("--rho", type=float, default=None)
    b.add_argument("--R", default=None, help='histogram window, odd integer or "inf"')
    b.add_argument("--hierarchy-mode", choices=("scene-name", "label-cluster"), default=None)
    b.add_argument("--infill-threshold", type=float, default=None)
    b.add_argument("--n-star", type=int, default=None, help="balance floor override")

    t = sub.add_parser("train", help="train per the configured strategy")
    _add_common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--compare", default=None, help="second checkpoint; deltas are main minus this")
    e.add_argument("--manifest", default=None, help="evaluate this manifest instead of the config one")

    i = sub.add_parser("infill", help="fill unlabeled pixels with model predictions")
    _add_common(i)
    i.add_argument("--checkpoint", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "gen-synth":
            return cmd_gen_synth(args)
        cfg = _apply_overrides(load_config(Path(args.config)), args)
        if args.command == "build-hierarchy":
            return cmd_build_hierarchy(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.compare, args.manifest)
        if args.command == "infill":
            return cmd_infill(cfg, args.checkpoint)
        parser.error(f"unknown command {args.command!r}")
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
