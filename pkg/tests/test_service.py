import io
import json
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from tiledet.detector import OracleDetector, OracleParams
from tiledet.geometry import BBox, Detection
from tiledet.pipeline import PipelineConfig, untiled_variant
from tiledet.render import class_color
from tiledet.service import create_app, file_sha256


def png_bytes(raster):
    buf = io.BytesIO()
    Image.fromarray(raster, mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture(scope="module")
def oracle_app(mini_dataset):
    root, manifest = mini_dataset
    detector = OracleDetector.from_manifest(manifest, root, OracleParams(num_classes=3))
    app = create_app(detector, list(manifest.categories), PipelineConfig(), seed=0, synchronous=True)
    return TestClient(app), root, manifest


class StubDetector:
    kind = "stub"

    def __init__(self, detections):
        self.detections = detections

    def detect(self, raster, meta, seed):
        return list(self.detections) if meta.kind == "full" else []


def stub_app(detections, **kwargs):
    app = create_app(StubDetector(detections), ["alpha", "beta"], **kwargs)
    return TestClient(app)


class TestUpload:
    def test_valid_png_gets_job_id(self, oracle_app):
        client, root, manifest = oracle_app
        body = (root / manifest.images[0].path).read_bytes()
        response = client.post("/api/v1/images", content=body)
        assert response.status_code == 200
        assert response.json()["job_id"]

    def test_text_payload_unsupported(self, oracle_app):
        client, _, _ = oracle_app
        response = client.post("/api/v1/images", content=b"hello, not an image")
        assert response.status_code == 415

    def test_payload_too_large(self):
        client = stub_app([], synchronous=True, size_cap=100)
        response = client.post("/api/v1/images", content=b"x" * 200)
        assert response.status_code == 413

    def test_bad_query_value(self, oracle_app):
        client, root, manifest = oracle_app
        body = (root / manifest.images[0].path).read_bytes()
        response = client.post("/api/v1/images?tiling=maybe", content=body)
        assert response.status_code == 400
        assert "tiling" in response.json()["error"]

    def test_grid_override_recorded(self, oracle_app):
        client, root, manifest = oracle_app
        body = (root / manifest.images[0].path).read_bytes()
        job_id = client.post("/api/v1/images?tiling=on&grid=3x3", content=body).json()["job_id"]
        doc = client.get(f"/api/v1/results/{job_id}").json()
        assert doc["config"]["grid"] == {"n_cols": 3, "n_rows": 3, "overlap": 0.5}


class TestResults:
    def test_unknown_id(self, oracle_app):
        client, _, _ = oracle_app
        assert client.get("/api/v1/results/nope").status_code == 404
        assert client.get("/api/v1/results/nope/annotated").status_code == 404

    def test_done_document_fields(self, oracle_app):
        client, root, manifest = oracle_app
        record = manifest.images[0]
        body = (root / record.path).read_bytes()
        job_id = client.post("/api/v1/images", content=body).json()["job_id"]
        doc = client.get(f"/api/v1/results/{job_id}").json()
        assert doc["state"] == "done"
        assert doc["width"] == record.width and doc["height"] == record.height
        for det in doc["detections"]:
            assert set(det) == {"class_id", "class_name", "score", "bbox"}
            assert set(det["bbox"]) == {"x", "y", "w", "h"}

    def test_idempotent_reads(self, oracle_app):
        client, root, manifest = oracle_app
        body = (root / manifest.images[1].path).read_bytes()
        job_id = client.post("/api/v1/images", content=body).json()["job_id"]
        first = client.get(f"/api/v1/results/{job_id}").json()
        second = client.get(f"/api/v1/results/{job_id}").json()
        assert first == second

    def test_processing_state_and_not_ready(self):
        gate = threading.Event()

        class SlowDetector:
            kind = "slow"

            def detect(self, raster, meta, seed):
                gate.wait(timeout=10)
                return []

        app = create_app(SlowDetector(), ["a"], synchronous=False, max_workers=1)
        client = TestClient(app)
        raster = np.full((32, 32, 3), 120, dtype=np.uint8)
        job_id = client.post("/api/v1/images", content=png_bytes(raster)).json()["job_id"]
        try:
            doc = client.get(f"/api/v1/results/{job_id}").json()
            assert doc["state"] in ("queued", "processing")
            assert "detections" not in doc
            assert client.get(f"/api/v1/results/{job_id}/annotated").status_code == 409
        finally:
            gate.set()
        deadline = time.monotonic() + 10
        while time.monotonic() < deadline:
            if client.get(f"/api/v1/results/{job_id}").json()["state"] == "done":
                break
            time.sleep(0.02)
        assert client.get(f"/api/v1/results/{job_id}").json()["state"] == "done"


class TestFailedJobs:
    def test_failure_surfaces_in_result(self):
        class Exploding:
            kind = "exploding"

            def detect(self, raster, meta, seed):
                raise RuntimeError("model on fire")

        client = TestClient(create_app(Exploding(), ["a"], synchronous=True))
        raster = np.full((32, 32, 3), 99, dtype=np.uint8)
        job_id = client.post("/api/v1/images", content=png_bytes(raster)).json()["job_id"]
        doc = client.get(f"/api/v1/results/{job_id}").json()
        assert doc["state"] == "failed"
        assert "model on fire" in doc["error"]
        assert client.get(f"/api/v1/results/{job_id}/annotated").status_code == 500


class TestAnnotated:
    def test_zero_detections_returns_original_pixels(self):
        client = stub_app([], synchronous=True)
        raster = np.random.default_rng(0).integers(0, 256, (40, 50, 3), dtype=np.uint8)
        job_id = client.post("/api/v1/images", content=png_bytes(raster)).json()["job_id"]
        response = client.get(f"/api/v1/results/{job_id}/annotated")
        assert response.status_code == 200
        returned = np.asarray(Image.open(io.BytesIO(response.content)).convert("RGB"))
        assert np.array_equal(returned, raster)

    def test_border_pixel_probe(self):
        det = Detection(BBox(10, 10, 50, 50), 0, 0.875)
        client = stub_app([det], synchronous=True, base_config=untiled_variant(PipelineConfig()))
        raster = np.full((80, 80, 3), 200, dtype=np.uint8)
        job_id = client.post("/api/v1/images", content=png_bytes(raster)).json()["job_id"]
        response = client.get(f"/api/v1/results/{job_id}/annotated")
        image = np.asarray(Image.open(io.BytesIO(response.content)).convert("RGB"))
        color = class_color(0)
        # box covers pixels 10..59 on both axes; corners and edge midpoints
        for y, x in [(10, 10), (10, 35), (35, 10), (59, 59), (59, 35), (35, 59), (10, 59), (59, 10)]:
            assert tuple(image[y, x]) == color
        # interior beyond the 3 px border stays unpainted
        assert tuple(image[35, 35]) == (200, 200, 200)
        # the pixel just outside the box is untouched
        assert tuple(image[9, 9]) == (200, 200, 200)


class TestHealthz:
    def test_basic(self, oracle_app):
        client, _, _ = oracle_app
        doc = client.get("/healthz").json()
        assert doc["status"] == "ok"
        assert doc["detector"] == "oracle"
        assert doc["uptime_seconds"] >= 0

    def test_filter_fingerprint_matches_file_hash(self, tmp_path):
        from tiledet.tile_filter import (
            HistogramConfig,
            LinearSvmModel,
            TrainingInfo,
            save_model,
        )

        model = LinearSvmModel(
            np.linspace(-1, 1, 96), 0.25, HistogramConfig(32), TrainingInfo(5, 1e-4, 0, 1.0)
        )
        path = tmp_path / "filter.json"
        save_model(model, path)
        client = stub_app([], synchronous=True, filter_file_hash=file_sha256(path))
        doc = client.get("/healthz").json()
        import hashlib

        assert doc["filter_fingerprint"] == hashlib.sha256(path.read_bytes()).hexdigest()

    def test_repeated_calls_side_effect_free(self, oracle_app):
        client, _, _ = oracle_app
        a = client.get("/healthz").json()
        b = client.get("/healthz").json()
        assert a["status"] == b["status"] == "ok"
        assert a["detector"] == b["detector"]


class TestCliEquivalence:
    def test_single_image_matches_cli(self, oracle_app, tmp_path, mini_dataset):
        from tiledet.cli import main

        client, root, manifest = oracle_app
        record = manifest.images[2]
        out_path = tmp_path / "cli_detections.json"
        code = main(
            [
                "detect", "run",
                "--image", str(root / record.path),
                "--dataset", str(root),
                "--seed", "0",
                "--out", str(out_path),
            ]
        )
        assert code == 0
        cli_doc = json.loads(out_path.read_text())

        body = (root / record.path).read_bytes()
        job_id = client.post("/api/v1/images?seed=0", content=body).json()["job_id"]
        service_doc = client.get(f"/api/v1/results/{job_id}").json()
        for field in ("image_id", "width", "height", "config", "detections"):
            assert service_doc[field] == cli_doc[field]
