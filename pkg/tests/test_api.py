import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from app.core import scheduler
from app.main import app
from app.routers.scores import get_scorer
from app.services.lis_backend import render_layout
from app.services.scorers import MockScorer

client = TestClient(app)

LAYOUT = {
    "width": 256,
    "height": 192,
    "objects": [
        {"name": "cat", "bbox": [16, 20, 64, 48]},
        {"name": "dog", "bbox": [150, 100, 80, 60]},
    ],
}


@pytest.fixture(autouse=True)
def run_jobs_inline(monkeypatch):
    monkeypatch.setattr(scheduler, "schedule_run", scheduler.execute_run)
    app.dependency_overrides[get_scorer] = lambda: MockScorer()
    yield
    app.dependency_overrides.clear()


def png_bytes(image: np.ndarray) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PNG")
    return buffer.getvalue()


def test_root():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json() == {"message": "Few-shot Layout Augmentation API"}


def test_create_and_fetch_run(coco_path, tmp_path):
    config = {
        "annotations_path": str(coco_path),
        "out_dir": str(tmp_path / "api-run"),
        "mock": True,
        "spe_method": "gtos",
        "alpha": 1,
        "lis_batch": 2,
    }
    response = client.post("/api/runs", json={"kind": "run", "config": config})
    assert response.status_code == 201
    created = response.json()
    assert created["status"] == "queued"
    assert created["config"]["alpha"] == 1

    fetched = client.get(f"/api/runs/{created['id']}").json()
    assert fetched["status"] == "completed"
    assert fetched["result"]["n_generated_images"] == 10
    assert (tmp_path / "api-run" / "dataset.json").exists()

    listed = client.get("/api/runs").json()
    assert created["id"] in [run["id"] for run in listed]


def test_failing_run_records_the_error(tmp_path):
    config = {"annotations_path": str(tmp_path / "missing.json"), "out_dir": str(tmp_path / "failed"), "mock": True}
    created = client.post("/api/runs", json={"config": config}).json()
    fetched = client.get(f"/api/runs/{created['id']}").json()
    assert fetched["status"] == "failed"
    assert "does not exist" in fetched["error"]


def test_invalid_configuration_is_rejected():
    response = client.post("/api/runs", json={"config": {"lis_batch": 2, "top_n": 3}})
    assert response.status_code == 400
    assert response.json()["detail"].startswith("Invalid configuration")


def test_topn_study_needs_values():
    response = client.post("/api/runs", json={"kind": "topn-study", "config": {}})
    assert response.status_code == 400


def test_unknown_run():
    response = client.get("/api/runs/999999")
    assert response.status_code == 404
    assert response.json()["detail"] == "Run not found"


def test_score_upload(two_box_layout):
    image, _ = render_layout(two_box_layout)
    response = client.post(
        "/api/scores",
        files={"image": ("sample.png", png_bytes(image), "image/png")},
        data={"layout": json.dumps(LAYOUT)},
    )
    assert response.status_code == 200
    body = response.json()
    assert body["sample_ref"] == "sample.png"
    assert [c["name"] for c in body["per_category"]] == ["cat", "dog"]
    assert body["lacs"] > 0.5
    assert 0.0 <= body["cs_crop"] <= 1.0


def test_score_upload_size_mismatch():
    response = client.post(
        "/api/scores",
        files={"image": ("small.png", png_bytes(np.zeros((10, 10, 3), dtype=np.uint8)), "image/png")},
        data={"layout": json.dumps(LAYOUT)},
    )
    assert response.status_code == 400
    assert "10x10" in response.json()["detail"]


def test_score_upload_bad_inputs():
    image = png_bytes(np.zeros((192, 256, 3), dtype=np.uint8))
    response = client.post(
        "/api/scores", files={"image": ("a.png", image, "image/png")}, data={"layout": "{not json"}
    )
    assert response.status_code == 400
    response = client.post(
        "/api/scores", files={"image": ("a.png", b"not an image", "image/png")}, data={"layout": json.dumps(LAYOUT)}
    )
    assert response.status_code == 400


def test_crashing_run_is_marked_failed(tmp_path, coco_path):
    blocker = tmp_path / "not-a-directory"
    blocker.write_text("", encoding="utf-8")
    config = {"annotations_path": str(coco_path), "out_dir": str(blocker / "out"), "mock": True, "spe_method": "gtos"}
    created = client.post("/api/runs", json={"config": config}).json()
    fetched = client.get(f"/api/runs/{created['id']}").json()
    assert fetched["status"] == "failed"
    assert fetched["error"]


def test_second_run_in_an_active_out_dir_is_rejected(tmp_path, monkeypatch, coco_path):
    queued = []
    monkeypatch.setattr(scheduler, "schedule_run", queued.append)
    config = {
        "annotations_path": str(coco_path),
        "out_dir": str(tmp_path / "shared"),
        "mock": True,
        "spe_method": "gtos",
        "alpha": 1,
    }
    first = client.post("/api/runs", json={"config": config})
    assert first.status_code == 201
    second = client.post("/api/runs", json={"config": {**config, "out_dir": str(tmp_path / "shared" / ".")}})
    assert second.status_code == 409
    assert queued == [first.json()["id"]]
    other = client.post("/api/runs", json={"config": {**config, "out_dir": str(tmp_path / "elsewhere")}})
    assert other.status_code == 201

    # once the first run has finished its directory is free again
    scheduler.execute_run(first.json()["id"])
    assert client.post("/api/runs", json={"config": config}).status_code == 201


def test_conflicting_category_ids_are_rejected(two_box_layout):
    image, _ = render_layout(two_box_layout)
    layout = {
        "width": 256,
        "height": 192,
        "objects": [
            {"name": "cat", "bbox": [16, 20, 64, 48]},
            {"name": "dog", "bbox": [150, 100, 80, 60], "category_id": 1},
        ],
    }
    response = client.post(
        "/api/scores",
        files={"image": ("sample.png", png_bytes(image), "image/png")},
        data={"layout": json.dumps(layout)},
    )
    assert response.status_code == 200
    # the unlabelled cat takes the first free id, not the dog's
    assert [c["name"] for c in response.json()["per_category"]] == ["cat", "dog"]

    layout["objects"][0]["category_id"] = 1
    response = client.post(
        "/api/scores",
        files={"image": ("sample.png", png_bytes(image), "image/png")},
        data={"layout": json.dumps(layout)},
    )
    assert response.status_code == 400
    assert "category id 1" in response.json()["detail"]
