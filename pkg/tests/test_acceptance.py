"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with `pytest -s tests/test_acceptance.py` to see the per-criterion
lines. Criterion 1 generates the full 200-image benchmark and dominates
the runtime.
"""

import json
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from fastapi.testclient import TestClient

from tiledet.cli import cli
from tiledet.data_io import (
    SynthConfig,
    emit_yolo_labels,
    load_raster,
    manifest_from_coco,
    manifest_to_coco,
    parse_yolo_labels,
    synth_gen,
)
from tiledet.detector import OracleDetector, OracleParams, ViewMeta, raster_digest
from tiledet.geometry import BBox, Detection, GroundTruthBox, NmsConfig, iou, nms
from tiledet.metrics import ap_11point, macro_mean, match
from tiledet.pipeline import (
    PipelineConfig,
    detections_document,
    run_pipeline,
    untiled_variant,
)
from tiledet.service import create_app
from tiledet.tile_filter import filter_eval, svm_train
from tiledet.tiling import TileGridSpec, plan_tiles


def invoke(args):
    result = CliRunner().invoke(cli, args, catch_exceptions=False)
    assert result.exit_code == 0, result.output
    return result


# ----------------------------------------------------------------- criterion 1


@pytest.fixture(scope="module")
def benchmark_run(tmp_path_factory):
    """Full-scale synthetic benchmark: generation plus tiled-vs-untiled run."""
    root = tmp_path_factory.mktemp("bench")
    data = root / "data"
    out = root / "out"
    t0 = time.monotonic()
    invoke(
        ["synth", "gen", "--out", str(data), "--images", "200", "--size", "1920x1920",
         "--objects", "5-15", "--object-size", "10-40", "--classes", "3", "--seed", "42"]
    )
    invoke(
        ["bench", "compare", "--dataset", str(data), "--out", str(out), "--seed", "42",
         "--grid", "5x5", "--overlap", "0.5", "--nms-threshold", "0.45",
         "--input-size", "640", "--area-ref", "1024", "--jitter", "0.05",
         "--fp-rate", "0.5", "--score-noise", "0.05"]
    )
    elapsed = time.monotonic() - t0
    report = json.loads((out / "report.json").read_text())
    return data, report, elapsed


def test_c01_tiling_gain(benchmark_run):
    _, report, elapsed = benchmark_run
    delta = report["deltas"]["map50"]
    recall_gain = report["deltas"]["recall50"]
    assert delta >= 0.10, f"mAP@.5 gain {delta:.4f} below 10 points"
    assert recall_gain > 0.0, "tiled recall must be strictly greater"
    assert elapsed <= 120.0, f"benchmark took {elapsed:.1f}s (budget 120s)"
    print(
        f"ACCEPTANCE 01 PASS tiling gain: mAP@.5 {report['untiled']['map50']:.4f} -> "
        f"{report['tiled']['map50']:.4f} (delta {delta:+.4f}), recall@.5 "
        f"{report['untiled']['recall50']:.4f} -> {report['tiled']['recall50']:.4f}, "
        f"runtime {elapsed:.1f}s"
    )


# ----------------------------------------------------------------- criterion 2


def ap_11point_bruteforce(flags, total_gt):
    points = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += bool(f)
        points.append((tp / total_gt, tp / k))
    total = 0.0
    for i in range(11):
        r = i / 10
        best = 0.0
        for recall, precision in points:
            if recall >= r and precision > best:
                best = precision
        total += best
    return total / 11


def test_c02_metrics_oracle_equivalence():
    rng = np.random.default_rng(271828)
    worst = 0.0
    for _ in range(1000):
        n_gt = int(rng.integers(1, 11))
        n_pred = int(rng.integers(0, 21))
        gts = [
            GroundTruthBox(
                BBox(*rng.uniform(0, 80, 2), *rng.uniform(4, 40, 2)), 0, "img"
            )
            for _ in range(n_gt)
        ]
        preds = [
            (
                "img",
                Detection(
                    BBox(*rng.uniform(0, 80, 2), *rng.uniform(4, 40, 2)),
                    0,
                    float(rng.uniform(0, 1)),
                ),
            )
            for _ in range(n_pred)
        ]
        flags = match(preds, gts, 0.5).flags
        fast = ap_11point(flags, n_gt)
        brute = ap_11point_bruteforce(flags, n_gt)
        worst = max(worst, abs(fast - brute))
        assert abs(fast - brute) <= 1e-9
    hand = ap_11point([True, False, True], 2)
    assert abs(hand - 28 / 33) <= 1e-12
    print(f"ACCEPTANCE 02 PASS metrics oracle: 1000 instances, worst |diff| {worst:.2e}, hand case 28/33 ok")


# ----------------------------------------------------------------- criterion 3


def test_c03_table_mean_consistency():
    mean = macro_mean([64.2, 67.1, 85.6])
    assert abs(mean - 72.3) <= 0.05
    print(f"ACCEPTANCE 03 PASS all-class mean of 64.2/67.1/85.6 = {mean:.4f} (72.3 +/- 0.05)")


# ----------------------------------------------------------------- criterion 4


def test_c04_geometry_properties():
    rng = np.random.default_rng(4096)
    cfg = NmsConfig(0.45, True)
    for _ in range(1000):
        dets = [
            Detection(
                BBox(*rng.uniform(0, 60, 2), *rng.uniform(1, 40, 2)),
                int(rng.integers(0, 3)),
                float(rng.uniform(0, 1)),
            )
            for _ in range(rng.integers(0, 14))
        ]
        out = nms(dets, cfg)
        assert all(d in dets for d in out)
        assert nms(out, cfg) == out
        for i, a in enumerate(out):
            for b in out[i + 1 :]:
                if a.class_id == b.class_id:
                    assert iou(a.bbox, b.bbox) <= cfg.iou_threshold
    for _ in range(1000):
        a = BBox(*rng.uniform(-20, 60, 2), *rng.uniform(0.01, 40, 2))
        b = BBox(*rng.uniform(-20, 60, 2), *rng.uniform(0.01, 40, 2))
        v = iou(a, b)
        assert v == iou(b, a)
        assert 0.0 <= v <= 1.0
        assert iou(a, a) == 1.0
    print("ACCEPTANCE 04 PASS geometry: NMS idempotence/subset/no-overlap and IoU symmetry/bounds over 1000 sets")


# ----------------------------------------------------------------- criterion 5


def test_c05_tile_geometry():
    tiles = plan_tiles(600, 600, TileGridSpec(5, 5, 0.5))
    assert sorted({t.origin_x for t in tiles}) == [0, 100, 200, 300, 400]
    assert sorted({t.origin_y for t in tiles}) == [0, 100, 200, 300, 400]
    assert all(t.width == 200 and t.height == 200 for t in tiles)

    rng = np.random.default_rng(5150)
    canvas = np.empty((4000, 4000), dtype=bool)
    for _ in range(500):
        w = int(rng.integers(300, 4001))
        h = int(rng.integers(300, 4001))
        spec = TileGridSpec(
            int(rng.integers(1, 9)),
            int(rng.integers(1, 9)),
            float(rng.choice([0.0, 0.25, 0.5])),
        )
        tiles = plan_tiles(w, h, spec)
        assert len(tiles) == spec.n_cols * spec.n_rows
        view = canvas[:h, :w]
        view[:] = False
        for t in tiles:
            assert 0 <= t.origin_x and t.origin_x + t.width <= w
            assert 0 <= t.origin_y and t.origin_y + t.height <= h
            view[t.origin_y : t.origin_y + t.height, t.origin_x : t.origin_x + t.width] = True
        assert view.all(), f"coverage gap for {w}x{h} {spec}"
    print("ACCEPTANCE 05 PASS tile geometry: 500 random plans fully cover, reference 600/5x5/0.5 exact")


# ----------------------------------------------------------------- criterion 6


def _filter_tile(rng, with_object, size=160):
    """One synthetic tile: muted noise background, optionally a colored object."""
    from tiledet.data_io import BACKGROUND_HIGH, BACKGROUND_LOW, object_style

    raster = rng.integers(BACKGROUND_LOW, BACKGROUND_HIGH + 1, size=(size, size, 3)).astype(np.uint8)
    if with_object:
        color, _ = object_style(int(rng.integers(0, 3)))
        w = int(rng.integers(24, 81))
        h = int(rng.integers(24, 81))
        x = int(rng.integers(0, size - w + 1))
        y = int(rng.integers(0, size - h + 1))
        raster[y : y + h, x : x + w] = color
    return raster


def test_c06_filter_pipeline():
    """Colored-object tiles vs background-only tiles, balanced 1:1:
    2000 training and 500 held-out samples."""
    from tiledet.tile_filter import FilterDataset, HistogramConfig, histogram_feature

    rng = np.random.default_rng(2600)
    hist = HistogramConfig(32)

    def build(n_per_side):
        feats, labels = [], []
        for _ in range(n_per_side):
            feats.append(histogram_feature(_filter_tile(rng, True), hist))
            labels.append(True)
            feats.append(histogram_feature(_filter_tile(rng, False), hist))
            labels.append(False)
        return FilterDataset(np.stack(feats), np.array(labels), hist)

    train = build(1000)
    holdout = build(250)
    total = len(train) + len(holdout)
    assert total >= 2000, f"only {total} balanced samples"
    assert train.positives * 2 == len(train)
    assert holdout.positives * 2 == len(holdout)
    model = svm_train(train, regularization=1e-4, epochs=100, seed=42)
    metrics = filter_eval(model, holdout)
    assert metrics.accuracy >= 0.95, f"held-out accuracy {metrics.accuracy:.4f}"
    assert metrics.recall >= 0.95, f"held-out recall {metrics.recall:.4f}"
    print(
        f"ACCEPTANCE 06 PASS filter: {total} balanced samples, held-out accuracy "
        f"{metrics.accuracy:.4f}, recall {metrics.recall:.4f}"
    )


# ----------------------------------------------------------------- criterion 7


def test_c07_degenerate_path_equality():
    raster = np.full((300, 300, 3), 100, dtype=np.uint8)
    raster[40:90, 40:90] = (235, 20, 20)
    raster[200:250, 180:230] = (20, 20, 235)
    gts = [
        GroundTruthBox(BBox(40, 40, 50, 50), 0, "img"),
        GroundTruthBox(BBox(180, 200, 50, 50), 2, "img"),
    ]
    detector = OracleDetector(OracleParams(fp_rate=1.0))
    detector.register_truth(raster, gts)

    cfg_off = untiled_variant(PipelineConfig())
    out_off = run_pipeline(raster, detector, cfg_off, seed=12)
    meta = ViewMeta(raster_digest(raster), "full", None, None, 300, 300)
    baseline = nms(
        [d for d in detector.detect(raster, meta, 12) if d.score >= cfg_off.score_floor],
        cfg_off.nms,
    )
    assert out_off == baseline

    from tiledet.tile_filter import HistogramConfig, LinearSvmModel, TrainingInfo

    reject_all = LinearSvmModel(
        np.zeros(96), -1.0, HistogramConfig(32), TrainingInfo(0, 1e-4, 0, 0.0)
    )
    out_rejected = run_pipeline(
        raster, detector, PipelineConfig(filter_model=reject_all), seed=12
    )
    assert out_rejected == out_off
    print("ACCEPTANCE 07 PASS degenerate paths: tiling-off == baseline, reject-all filter == untiled")


# ----------------------------------------------------------------- criterion 8


def _tree_bytes(root: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        if p.name == "run_manifest.json" or p.name.endswith(".manifest.json"):
            continue  # run-manifest sidecars carry timing by design
        out[str(p.relative_to(root))] = p.read_bytes()
    return out


def test_c08_determinism(tmp_path):
    gen_args = ["synth", "gen", "--images", "4", "--size", "480x480", "--objects", "2-4",
                "--object-size", "40-80", "--seed", "9"]
    invoke(gen_args + ["--out", str(tmp_path / "ds_a")])
    invoke(gen_args + ["--out", str(tmp_path / "ds_b")])
    assert _tree_bytes(tmp_path / "ds_a") == _tree_bytes(tmp_path / "ds_b")

    build_args = ["filter", "build-dataset", "--dataset", str(tmp_path / "ds_a"),
                  "--grid", "3x3", "--min-visible", "0.000001", "--seed", "3"]
    invoke(build_args + ["--out", str(tmp_path / "fd_a")])
    invoke(build_args + ["--out", str(tmp_path / "fd_b")])
    assert _tree_bytes(tmp_path / "fd_a") == _tree_bytes(tmp_path / "fd_b")

    for name in ("m_a.json", "m_b.json"):
        invoke(["filter", "train", "--data", str(tmp_path / "fd_a"), "--epochs", "25",
                "--seed", "2", "--out", str(tmp_path / name)])
    assert (tmp_path / "m_a.json").read_bytes() == (tmp_path / "m_b.json").read_bytes()

    bench_args = ["bench", "compare", "--dataset", str(tmp_path / "ds_a"), "--seed", "7",
                  "--grid", "3x3", "--input-size", "240"]
    invoke(bench_args + ["--out", str(tmp_path / "r_a")])
    invoke(bench_args + ["--out", str(tmp_path / "r_b")])
    assert (tmp_path / "r_a" / "report.json").read_bytes() == (tmp_path / "r_b" / "report.json").read_bytes()

    image = sorted((tmp_path / "ds_a" / "images").glob("*.png"))[0]
    detect_args = ["detect", "run", "--image", str(image), "--dataset", str(tmp_path / "ds_a"),
                   "--seed", "5"]
    invoke(detect_args + ["--out", str(tmp_path / "d_a.json")])
    invoke(detect_args + ["--out", str(tmp_path / "d_b.json")])
    assert (tmp_path / "d_a.json").read_bytes() == (tmp_path / "d_b.json").read_bytes()
    print("ACCEPTANCE 08 PASS determinism: synth gen, filter build/train, bench compare, detect run byte-identical")


# ----------------------------------------------------------------- criterion 9


def test_c09_format_round_trips():
    rng = np.random.default_rng(999)
    w, h = 1280, 960
    boxes = [
        GroundTruthBox(
            BBox(
                float(rng.uniform(0, w * 0.7)),
                float(rng.uniform(0, h * 0.7)),
                float(rng.uniform(1, w * 0.3)),
                float(rng.uniform(1, h * 0.3)),
            ),
            int(rng.integers(0, 3)),
            "img",
        )
        for _ in range(1000)
    ]
    emitted = emit_yolo_labels(boxes, w, h)
    parsed = parse_yolo_labels(emitted, w, h, "img")
    assert emit_yolo_labels(parsed, w, h) == emitted  # fixpoint
    for a, b in zip(boxes, parsed):
        assert abs(a.bbox.x - b.bbox.x) / w <= 1e-6
        assert abs(a.bbox.y - b.bbox.y) / h <= 1e-6
        assert abs(a.bbox.w - b.bbox.w) / w <= 1e-6
        assert abs(a.bbox.h - b.bbox.h) / h <= 1e-6

    from tiledet.data_io import DatasetManifest, ImageRecord

    manifest = DatasetManifest(
        categories=["a", "b", "c"],
        images=[ImageRecord("img", "img.png", w, h)],
        annotations=boxes,
    )
    again, _ = manifest_from_coco(manifest_to_coco(manifest))
    assert again.annotations == manifest.annotations  # exact

    cross, _ = manifest_from_coco(
        manifest_to_coco(
            DatasetManifest(
                categories=["a", "b", "c"],
                images=[ImageRecord("img", "img.png", w, h)],
                annotations=parsed,
            )
        )
    )
    for a, b in zip(boxes, cross.annotations):
        for va, vb in (
            (a.bbox.x, b.bbox.x), (a.bbox.y, b.bbox.y), (a.bbox.w, b.bbox.w), (a.bbox.h, b.bbox.h),
        ):
            assert abs(va - vb) <= 1.0
    print("ACCEPTANCE 09 PASS format round trips: YOLO fixpoint 1e-6, COCO exact, cross-format within 1 px over 1000 boxes")


# ---------------------------------------------------------------- criterion 10


@pytest.fixture(scope="module")
def service_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("service_ds")
    cfg = SynthConfig(
        image_count=32,
        width=320,
        height=320,
        objects_min=2,
        objects_max=5,
        object_size_min=30,
        object_size_max=60,
        class_count=3,
        seed=77,
    )
    manifest = synth_gen(cfg, root)
    return root, manifest


def _poll_done(client, job_id, timeout=30.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        doc = client.get(f"/api/v1/results/{job_id}").json()
        if doc["state"] == "done":
            return doc
        if doc["state"] == "failed":
            raise AssertionError(f"job failed: {doc}")
        time.sleep(0.01)
    raise AssertionError("job did not finish in time")


def test_c10_service_equivalence(service_dataset, tmp_path):
    root, manifest = service_dataset
    detector = OracleDetector.from_manifest(manifest, root, OracleParams(num_classes=3))
    app = create_app(detector, list(manifest.categories), PipelineConfig(), seed=0, synchronous=False, max_workers=8)
    client = TestClient(app)

    # upload -> poll -> result matches the CLI for 10 images
    for record in manifest.images[:10]:
        out_path = tmp_path / f"{record.image_id}.json"
        invoke(
            ["detect", "run", "--image", str(root / record.path), "--dataset", str(root),
             "--seed", "0", "--out", str(out_path)]
        )
        cli_doc = json.loads(out_path.read_text())
        body = (root / record.path).read_bytes()
        job_id = client.post("/api/v1/images", content=body).json()["job_id"]
        service_doc = _poll_done(client, job_id)
        for field in ("image_id", "width", "height", "config", "detections"):
            assert service_doc[field] == cli_doc[field], f"{record.image_id}: {field} differs"

    # 32 concurrent uploads, each equal to its serial run
    serial = {}
    cfg = PipelineConfig()
    for record in manifest.images:
        raster = load_raster(root / record.path)
        dets = run_pipeline(raster, detector, cfg, seed=0)
        serial[record.image_id] = detections_document(
            raster_digest(raster), record.width, record.height, cfg, dets, list(manifest.categories)
        )

    def upload(record):
        body = (root / record.path).read_bytes()
        job_id = client.post("/api/v1/images", content=body).json()["job_id"]
        return record.image_id, _poll_done(client, job_id)

    with ThreadPoolExecutor(max_workers=32) as pool:
        results = list(pool.map(upload, manifest.images))
    assert len(results) == 32
    for image_id, doc in results:
        expected = serial[image_id]
        for field in ("image_id", "width", "height", "config", "detections"):
            assert doc[field] == expected[field], f"{image_id}: {field} differs under concurrency"

    # annotated pixel probe
    from tiledet.render import class_color

    class OneBox:
        kind = "stub"

        def detect(self, raster, meta, seed):
            return [Detection(BBox(10, 10, 50, 50), 1, 0.5)] if meta.kind == "full" else []

    probe_app = TestClient(create_app(OneBox(), ["a", "b"], untiled_variant(PipelineConfig()), synchronous=True))
    import io

    from PIL import Image

    raster = np.full((80, 80, 3), 180, dtype=np.uint8)
    buf = io.BytesIO()
    Image.fromarray(raster, "RGB").save(buf, format="PNG")
    job_id = probe_app.post("/api/v1/images", content=buf.getvalue()).json()["job_id"]
    png = probe_app.get(f"/api/v1/results/{job_id}/annotated").content
    image = np.asarray(Image.open(io.BytesIO(png)).convert("RGB"))
    color = class_color(1)
    for y, x in [(10, 10), (10, 59), (59, 10), (59, 59), (35, 10), (10, 35)]:
        assert tuple(image[y, x]) == color
    assert tuple(image[35, 35]) == (180, 180, 180)
    print("ACCEPTANCE 10 PASS service: 10-image CLI equivalence, 32 concurrent uploads match serial, pixel probe ok")
