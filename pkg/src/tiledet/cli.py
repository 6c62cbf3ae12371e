"""Operator command line: dataset generation, tiling, filtering, detection,
evaluation, benchmarking, and the HTTP server.

Every command that writes outputs also writes a run manifest (command,
config snapshot, seed, paths, timing) alongside them; every stochastic
command takes a --seed and is deterministic given its flags.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import click

from . import __version__
from .data_io import (
    DatasetManifest,
    ImageRecord,
    SplitSpec,
    SynthConfig,
    emit_yolo_labels,
    load_manifest,
    load_raster,
    materialize_extended,
    parse_yolo_labels,
    save_manifest,
    split_dataset,
    synth_gen,
)
from .detector import (
    OracleDetector,
    OracleParams,
    ReplayDetector,
    load_replay_store,
    raster_digest,
)
from .geometry import NmsConfig
from .metrics import evaluate, render_table
from .pipeline import (
    PipelineConfig,
    compare_runs,
    detections_document,
    run_pipeline,
    untiled_variant,
)
from .tile_filter import (
    FilterDataset,
    HistogramConfig,
    build_filter_dataset,
    filter_eval,
    load_model,
    save_model,
    svm_train,
)
from .tiling import TileGridSpec, plan_tiles


def _parse_grid(value: str) -> tuple[int, int]:
    try:
        cols, rows = value.lower().split("x")
        return int(cols), int(rows)
    except ValueError:
        raise click.BadParameter(f"expected COLSxROWS like '5x5', got {value!r}")


def _parse_pair(value: str, flag: str) -> tuple[int, int]:
    try:
        lo, hi = value.split("-")
        return int(lo), int(hi)
    except ValueError:
        raise click.BadParameter(f"{flag} expects LO-HI like '5-15', got {value!r}")


def _write_run_manifest(
    target: Path, command: str, params: dict, seed: int | None, inputs: list, outputs: list, t0: float
) -> None:
    doc = {
        "command": command,
        "params": params,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "duration_seconds": time.monotonic() - t0,
        "tool_version": __version__,
    }
    if target.is_dir():
        path = target / "run_manifest.json"
    else:
        path = target.with_name(target.name + ".manifest.json")
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _oracle_options(fn):
    for decorator in reversed(
        [
            click.option("--input-size", default=640, show_default=True, help="Model input side in pixels."),
            click.option("--area-ref", default=1024.0, show_default=True, help="Reference area for full detection probability."),
            click.option("--jitter", default=0.05, show_default=True, help="Box perturbation as a fraction of min(w, h)."),
            click.option("--fp-rate", default=0.5, show_default=True, help="Expected false positives per view."),
            click.option("--score-noise", default=0.05, show_default=True, help="Std of confidence noise."),
        ]
    ):
        fn = decorator(fn)
    return fn


def _pipeline_options(fn):
    for decorator in reversed(
        [
            click.option("--grid", default="5x5", show_default=True, help="Tile grid as COLSxROWS."),
            click.option("--overlap", default=0.5, show_default=True, help="Overlap fraction between consecutive tiles."),
            click.option("--nms-threshold", default=0.45, show_default=True, help="Joint NMS IoU threshold."),
            click.option("--score-floor", default=0.01, show_default=True, help="Minimum confidence kept before NMS."),
            click.option("--filter", "filter_path", type=click.Path(exists=True, dir_okay=False), default=None, help="Tile-filter model file."),
            click.option("--filter-bias", default=0.0, show_default=True, help="Decision bias added to the filter margin."),
            click.option("--threads", default=1, show_default=True, help="Worker threads for tile passes."),
        ]
    ):
        fn = decorator(fn)
    return fn


def _build_pipeline_config(
    tiling_on: bool,
    grid: str,
    overlap: float,
    nms_threshold: float,
    score_floor: float,
    filter_path: str | None,
    filter_bias: float,
    input_size: int,
) -> PipelineConfig:
    cols, rows = _parse_grid(grid)
    return PipelineConfig(
        tiling_enabled=tiling_on,
        grid=TileGridSpec(cols, rows, overlap),
        nms=NmsConfig(nms_threshold, True),
        input_size=input_size,
        score_floor=score_floor,
        filter_model=load_model(filter_path) if filter_path else None,
        filter_bias=filter_bias,
    )


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """Tiled small-object detection pipeline."""


# --------------------------------------------------------------------- synth


@cli.group()
def synth() -> None:
    """Synthetic benchmark datasets."""


@synth.command("gen")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True, help="Output dataset directory.")
@click.option("--images", default=200, show_default=True, help="Number of images.")
@click.option("--size", default="1920x1920", show_default=True, help="Image size as WxH.")
@click.option("--objects", default="5-15", show_default=True, help="Objects per image as LO-HI.")
@click.option("--object-size", default="10-40", show_default=True, help="Object extent range in pixels as LO-HI.")
@click.option("--classes", default=3, show_default=True, help="Number of object classes.")
@click.option("--background", default="mix", show_default=True, type=click.Choice(["noise", "gradient", "mix"]))
@click.option("--seed", default=42, show_default=True)
def synth_gen_cmd(out_dir, images, size, objects, object_size, classes, background, seed) -> None:
    """Generate a seeded synthetic small-object dataset."""
    t0 = time.monotonic()
    w, h = _parse_grid(size)
    obj_lo, obj_hi = _parse_pair(objects, "--objects")
    size_lo, size_hi = _parse_pair(object_size, "--object-size")
    try:
        cfg = SynthConfig(
            image_count=images,
            width=w,
            height=h,
            objects_min=obj_lo,
            objects_max=obj_hi,
            object_size_min=size_lo,
            object_size_max=size_hi,
            class_count=classes,
            background=background,
            seed=seed,
        )
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    manifest = synth_gen(cfg, out_dir)
    out = Path(out_dir)
    _write_run_manifest(out, "synth gen", cfg.to_dict(), seed, [], [out], t0)
    click.echo(
        f"generated {len(manifest.images)} images, {len(manifest.annotations)} objects -> {out_dir}"
    )


# --------------------------------------------------------------------- tiles


@cli.group()
def tiles() -> None:
    """Tile grid planning."""


@tiles.command("plan")
@click.option("--width", type=int, required=True)
@click.option("--height", type=int, required=True)
@click.option("--grid", default="5x5", show_default=True, help="Tile grid as COLSxROWS.")
@click.option("--overlap", default=0.5, show_default=True)
def tiles_plan_cmd(width, height, grid, overlap) -> None:
    """Print the planned tile layout for an image size."""
    cols, rows = _parse_grid(grid)
    plan = plan_tiles(width, height, TileGridSpec(cols, rows, overlap))
    click.echo("col row x y w h")
    for t in plan:
        click.echo(f"{t.col} {t.row} {t.origin_x} {t.origin_y} {t.width} {t.height}")


# ------------------------------------------------------------------- dataset


@cli.group()
def dataset() -> None:
    """Splitting, format conversion, and tile materialization."""


@dataset.command("split")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--ratios", default="0.6,0.2,0.2", show_default=True, help="train,val,test ratios.")
@click.option("--seed", default=0, show_default=True)
def dataset_split_cmd(manifest_path, out_dir, ratios, seed) -> None:
    """Split a manifest into train/val/test manifests (image level)."""
    t0 = time.monotonic()
    try:
        r_train, r_val, r_test = (float(v) for v in ratios.split(","))
        spec = SplitSpec(r_train, r_val, r_test, seed)
    except ValueError as exc:
        raise click.BadParameter(f"--ratios: {exc}")
    manifest = load_manifest(manifest_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ("train", "val", "test")
    outputs = []
    for name, part in zip(names, split_dataset(manifest, spec)):
        path = out / f"{name}.json"
        save_manifest(part, path)
        outputs.append(path)
        click.echo(f"{name}: {len(part.images)} images, {len(part.annotations)} annotations")
    _write_run_manifest(out, "dataset split", {"ratios": ratios}, seed, [manifest_path], outputs, t0)


@dataset.command("convert")
@click.option("--from-coco", "coco_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--to-yolo", "yolo_out", type=click.Path(file_okay=False), default=None)
@click.option("--from-yolo", "yolo_in", type=click.Path(file_okay=False, exists=True), default=None)
@click.option("--images-dir", type=click.Path(file_okay=False, exists=True), default=None, help="Image files for --from-yolo (dimensions and records).")
@click.option("--classes-file", type=click.Path(exists=True, dir_okay=False), default=None, help="Category names, one per line (default: classes.txt next to the labels).")
@click.option("--to-coco", "coco_out", type=click.Path(dir_okay=False), default=None)
def dataset_convert_cmd(coco_path, yolo_out, yolo_in, images_dir, classes_file, coco_out) -> None:
    """Convert between the COCO-style manifest and YOLO label files."""
    t0 = time.monotonic()
    if coco_path and yolo_out:
        manifest = load_manifest(coco_path)
        out = Path(yolo_out)
        out.mkdir(parents=True, exist_ok=True)
        for record in manifest.images:
            gts = manifest.annotations_for(record.image_id)
            (out / f"{record.image_id}.txt").write_text(
                emit_yolo_labels(gts, record.width, record.height)
            )
        (out / "classes.txt").write_text("\n".join(manifest.categories) + "\n")
        _write_run_manifest(out, "dataset convert", {"direction": "coco->yolo"}, None, [coco_path], [out], t0)
        click.echo(f"wrote {len(manifest.images)} label files -> {yolo_out}")
        return
    if yolo_in and coco_out:
        labels_dir = Path(yolo_in)
        if images_dir is None:
            raise click.UsageError("--from-yolo needs --images-dir for image dimensions")
        classes_path = Path(classes_file) if classes_file else labels_dir / "classes.txt"
        if not classes_path.exists():
            raise click.UsageError(f"missing category names: {classes_path}")
        categories = [l.strip() for l in classes_path.read_text().splitlines() if l.strip()]
        records, annotations = [], []
        for label_file in sorted(labels_dir.glob("*.txt")):
            if label_file.name == "classes.txt":
                continue
            stem = label_file.stem
            image_path = None
            for ext in (".png", ".jpg", ".jpeg"):
                candidate = Path(images_dir) / f"{stem}{ext}"
                if candidate.exists():
                    image_path = candidate
                    break
            if image_path is None:
                raise click.ClickException(f"no image found for label file {label_file}")
            raster = load_raster(image_path)
            h, w = raster.shape[:2]
            records.append(ImageRecord(stem, image_path.name, w, h))
            annotations.extend(parse_yolo_labels(label_file.read_text(), w, h, stem))
        manifest = DatasetManifest(categories=categories, images=records, annotations=annotations)
        manifest.validate()
        save_manifest(manifest, coco_out)
        _write_run_manifest(Path(coco_out), "dataset convert", {"direction": "yolo->coco"}, None, [yolo_in], [coco_out], t0)
        click.echo(f"wrote manifest with {len(records)} images -> {coco_out}")
        return
    raise click.UsageError("use either --from-coco with --to-yolo, or --from-yolo with --to-coco")


@dataset.command("extend")
@click.option("--manifest", "manifest_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--images-root", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--grid", default="5x5", show_default=True)
@click.option("--overlap", default=0.5, show_default=True)
@click.option("--min-visible", default=0.5, show_default=True, help="Minimum visible box fraction for tile labels.")
def dataset_extend_cmd(manifest_path, images_root, out_dir, grid, overlap, min_visible) -> None:
    """Materialize the extended (full images + tiles) dataset."""
    t0 = time.monotonic()
    cols, rows = _parse_grid(grid)
    manifest = load_manifest(manifest_path)
    extended = materialize_extended(
        manifest, images_root, out_dir, TileGridSpec(cols, rows, overlap), min_visible
    )
    out = Path(out_dir)
    _write_run_manifest(
        out,
        "dataset extend",
        {"grid": grid, "overlap": overlap, "min_visible": min_visible},
        None,
        [manifest_path],
        [out],
        t0,
    )
    click.echo(f"extended dataset: {len(extended.images)} records -> {out_dir}")


# -------------------------------------------------------------------- filter


@cli.group(name="filter")
def filter_group() -> None:
    """Tile-filter dataset construction, training, and evaluation."""


@filter_group.command("build-dataset")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False, exists=True), required=True, help="Dataset directory with manifest.json and images/.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--grid", default="5x5", show_default=True)
@click.option("--overlap", default=0.5, show_default=True)
@click.option("--min-visible", default=0.5, show_default=True)
@click.option("--holdout", default=0.2, show_default=True, help="Fraction of images held out for evaluation.")
@click.option("--bins", default=32, show_default=True, help="Histogram bins per channel.")
@click.option("--seed", default=0, show_default=True)
def filter_build_dataset_cmd(dataset_dir, out_dir, grid, overlap, min_visible, holdout, bins, seed) -> None:
    """Build the balanced positive/negative tile feature sets."""
    t0 = time.monotonic()
    cols, rows = _parse_grid(grid)
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    train, heldout = build_filter_dataset(
        manifest,
        dataset_dir,
        TileGridSpec(cols, rows, overlap),
        min_visible_ratio=min_visible,
        seed=seed,
        holdout_fraction=holdout,
        hist_config=HistogramConfig(bins),
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train.save(out, "train")
    heldout.save(out, "holdout")
    meta = {
        "bins_per_channel": bins,
        "grid": grid,
        "overlap": overlap,
        "min_visible": min_visible,
        "holdout": holdout,
        "seed": seed,
        "train_samples": len(train),
        "train_positives": train.positives,
        "holdout_samples": len(heldout),
        "holdout_positives": heldout.positives,
    }
    (out / "filter_dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "filter build-dataset", meta, seed, [dataset_dir], [out], t0)
    click.echo(
        f"train {len(train)} samples ({train.positives} positive), "
        f"holdout {len(heldout)} samples ({heldout.positives} positive) -> {out_dir}"
    )


def _load_filter_part(data_dir: str, part: str) -> FilterDataset:
    data = Path(data_dir)
    meta_path = data / "filter_dataset.json"
    if not meta_path.exists():
        raise click.ClickException(f"missing {meta_path}")
    meta = json.loads(meta_path.read_text())
    return FilterDataset.load(data, part, HistogramConfig(int(meta["bins_per_channel"])))


@filter_group.command("train")
@click.option("--data", "data_dir", type=click.Path(file_okay=False, exists=True), required=True, help="Directory written by 'filter build-dataset'.")
@click.option("--out", "model_path", type=click.Path(dir_okay=False), required=True)
@click.option("--regularization", "--lambda", "regularization", default=1e-4, show_default=True)
@click.option("--epochs", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
def filter_train_cmd(data_dir, model_path, regularization, epochs, seed) -> None:
    """Train the linear SVM tile filter."""
    t0 = time.monotonic()
    train = _load_filter_part(data_dir, "train")
    model = svm_train(train, regularization=regularization, epochs=epochs, seed=seed)
    save_model(model, model_path)
    _write_run_manifest(
        Path(model_path),
        "filter train",
        {"regularization": regularization, "epochs": epochs},
        seed,
        [data_dir],
        [model_path],
        t0,
    )
    click.echo(f"training accuracy {model.training.train_accuracy:.4f} -> {model_path}")


@filter_group.command("eval")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--data", "data_dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--part", default="holdout", show_default=True, type=click.Choice(["train", "holdout"]))
@click.option("--filter-bias", default=0.0, show_default=True)
def filter_eval_cmd(model_path, data_dir, part, filter_bias) -> None:
    """Evaluate a trained filter on a dataset part."""
    model = load_model(model_path)
    metrics = filter_eval(model, _load_filter_part(data_dir, part), filter_bias)
    click.echo(
        f"accuracy {metrics.accuracy:.4f}  precision {metrics.precision:.4f}  "
        f"recall {metrics.recall:.4f}  (tp {metrics.tp} fp {metrics.fp} tn {metrics.tn} fn {metrics.fn})"
    )


# -------------------------------------------------------------------- detect


def _build_detector(detector_name, dataset_dir, replay_store, oracle_params, min_visible):
    if detector_name == "replay":
        if replay_store is None:
            raise click.UsageError("--detector replay needs --replay-store")
        return ReplayDetector(load_replay_store(replay_store))
    if dataset_dir is None:
        raise click.UsageError("--detector oracle needs --dataset for ground truth")
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    detector = OracleDetector.from_manifest(manifest, dataset_dir, oracle_params, min_visible)
    return detector


@cli.group()
def detect() -> None:
    """Run the detection pipeline."""


@detect.command("run")
@click.option("--image", "image_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Detections document (JSON).")
@click.option("--annotated", "annotated_path", type=click.Path(dir_okay=False), default=None, help="Annotated PNG output.")
@click.option("--detector", "detector_name", default="oracle", show_default=True, type=click.Choice(["oracle", "replay"]))
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False, exists=True), default=None, help="Dataset directory providing oracle ground truth.")
@click.option("--replay-store", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--min-visible", default=0.5, show_default=True)
@click.option("--tiling", default="on", show_default=True, type=click.Choice(["on", "off"]))
@click.option("--seed", default=0, show_default=True)
@_pipeline_options
@_oracle_options
def detect_run_cmd(
    image_path, out_path, annotated_path, detector_name, dataset_dir, replay_store,
    min_visible, tiling, seed, grid, overlap, nms_threshold, score_floor, filter_path,
    filter_bias, threads, input_size, area_ref, jitter, fp_rate, score_noise,
) -> None:
    """Detect objects in one image and write the detections document."""
    t0 = time.monotonic()
    raster = load_raster(image_path)
    categories = []
    oracle_params = OracleParams(input_size, area_ref, jitter, fp_rate, score_noise)
    if dataset_dir is not None:
        manifest = load_manifest(Path(dataset_dir) / "manifest.json")
        categories = list(manifest.categories)
        oracle_params = OracleParams(
            input_size, area_ref, jitter, fp_rate, score_noise, num_classes=len(categories)
        )
    detector = _build_detector(detector_name, dataset_dir, replay_store, oracle_params, min_visible)
    cfg = _build_pipeline_config(
        tiling == "on", grid, overlap, nms_threshold, score_floor, filter_path, filter_bias, input_size
    )
    detections = run_pipeline(raster, detector, cfg, seed, threads)
    doc = detections_document(
        raster_digest(raster), raster.shape[1], raster.shape[0], cfg, detections, categories
    )
    payload = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(payload)
        _write_run_manifest(Path(out_path), "detect run", cfg.to_dict(), seed, [image_path], [out_path], t0)
        click.echo(f"{len(detections)} detections -> {out_path}")
    else:
        click.echo(payload, nl=False)
    if annotated_path:
        from PIL import Image

        from .render import draw_detections

        rendered = draw_detections(raster, detections, categories)
        Image.fromarray(rendered, mode="RGB").save(annotated_path, format="PNG")


# ---------------------------------------------------------------------- eval


@cli.group(name="eval")
def eval_group() -> None:
    """Evaluation against ground truth."""


@eval_group.command("map")
@click.option("--detections", "detections_path", type=click.Path(exists=True), required=True, help="Detections document or directory of documents.")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None, help="Evaluation report (JSON).")
def eval_map_cmd(detections_path, dataset_dir, out_path) -> None:
    """Compute per-class AP, mAP@.5, and mAP@.5:.95 for stored detections."""
    from .geometry import BBox, Detection

    t0 = time.monotonic()
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    digest_to_id = {}
    for record in manifest.images:
        digest_to_id[raster_digest(load_raster(Path(dataset_dir) / record.path))] = record.image_id

    paths = (
        sorted(Path(detections_path).glob("*.json"))
        if Path(detections_path).is_dir()
        else [Path(detections_path)]
    )
    preds: dict[str, list[Detection]] = {}
    for path in paths:
        doc = json.loads(path.read_text())
        image_id = doc["image_id"]
        image_id = digest_to_id.get(image_id, image_id)
        preds[image_id] = [
            Detection(
                BBox(d["bbox"]["x"], d["bbox"]["y"], d["bbox"]["w"], d["bbox"]["h"]),
                int(d["class_id"]),
                float(d["score"]),
            )
            for d in doc["detections"]
        ]
    unknown = set(preds) - {r.image_id for r in manifest.images}
    if unknown:
        raise click.ClickException(f"detections reference unknown images: {sorted(unknown)}")

    report = evaluate(preds, manifest.annotations, manifest.categories)
    click.echo(render_table(report))
    if out_path:
        Path(out_path).write_text(report.to_json() + "\n")
        _write_run_manifest(Path(out_path), "eval map", {}, None, [detections_path, dataset_dir], [out_path], t0)


# --------------------------------------------------------------------- bench


@cli.group()
def bench() -> None:
    """Tiled-vs-untiled benchmark comparisons."""


@bench.command("compare")
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False, exists=True), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--min-visible", default=0.5, show_default=True)
@_pipeline_options
@_oracle_options
def bench_compare_cmd(
    dataset_dir, out_dir, seed, min_visible, grid, overlap, nms_threshold, score_floor,
    filter_path, filter_bias, threads, input_size, area_ref, jitter, fp_rate, score_noise,
) -> None:
    """Evaluate the tiled pipeline against the untiled baseline."""
    t0 = time.monotonic()
    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    params = OracleParams(
        input_size, area_ref, jitter, fp_rate, score_noise, num_classes=len(manifest.categories)
    )
    detector = OracleDetector(params, min_visible)
    cfg_tiled = _build_pipeline_config(
        True, grid, overlap, nms_threshold, score_floor, filter_path, filter_bias, input_size
    )
    report = compare_runs(
        manifest, dataset_dir, detector, cfg_tiled, untiled_variant(cfg_tiled), seed, threads=threads
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {
        "dataset": str(dataset_dir),
        "seed": seed,
        "config_tiled": cfg_tiled.to_dict(),
        "oracle": {
            "input_size": input_size,
            "area_ref": area_ref,
            "jitter": jitter,
            "fp_rate": fp_rate,
            "score_noise": score_noise,
        },
        **report.to_dict(),
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_run_manifest(out, "bench compare", doc["oracle"], seed, [dataset_dir], [out / "report.json"], t0)
    click.echo(report.render())


# --------------------------------------------------------------------- serve


@cli.command("serve")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--dataset", "dataset_dir", type=click.Path(file_okay=False, exists=True), required=True, help="Dataset directory providing oracle ground truth.")
@click.option("--seed", default=0, show_default=True)
@click.option("--workers", default=4, show_default=True, help="Job executor threads.")
@click.option("--min-visible", default=0.5, show_default=True)
@_pipeline_options
@_oracle_options
def serve_cmd(
    host, port, dataset_dir, seed, workers, min_visible, grid, overlap, nms_threshold,
    score_floor, filter_path, filter_bias, threads, input_size, area_ref, jitter,
    fp_rate, score_noise,
) -> None:
    """Run the upload/detect/result HTTP service."""
    import uvicorn

    from .service import create_app, file_sha256

    manifest = load_manifest(Path(dataset_dir) / "manifest.json")
    params = OracleParams(
        input_size, area_ref, jitter, fp_rate, score_noise, num_classes=len(manifest.categories)
    )
    detector = OracleDetector.from_manifest(manifest, dataset_dir, params, min_visible)
    cfg = _build_pipeline_config(
        True, grid, overlap, nms_threshold, score_floor, filter_path, filter_bias, input_size
    )
    app = create_app(
        detector,
        list(manifest.categories),
        cfg,
        seed=seed,
        max_workers=workers,
        filter_file_hash=file_sha256(filter_path) if filter_path else None,
    )
    uvicorn.run(app, host=host, port=port)


def main(argv: list[str] | None = None) -> int:
    """Entry point with the documented exit codes.

    0 on success, 1 on flag/input validation errors, 2 on runtime failures.
    """
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.NoArgsIsHelpError as exc:
        exc.show()
        return 0
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
