import json
import os
import tempfile

# The job database is bound at import time of app.database
os.environ.setdefault("AUGMENT_DATABASE_URL", f"sqlite:///{tempfile.mkdtemp(prefix='augment-jobs-')}/jobs.db")

import pytest

from app.core.config import PipelineConfig
from app.schemas.layout import BBox, CategoryLabel, CategoryRegistry, ImageFrame, Layout, LayoutSource
from app.services.annotations import load_coco

CATEGORIES = [
    {"id": 1, "name": "cat"},
    {"id": 2, "name": "dog"},
    {"id": 3, "name": "car"},
    {"id": 4, "name": "apple"},
]
WIDTH, HEIGHT = 256, 192


def fewshot_coco_dict(n_images: int = 10) -> dict:
    """Ten 256x192 images, five instances per category, boxes never overlap."""
    images, annotations = [], []
    ann_id = 100
    for i in range(n_images):
        image_id = i + 1
        images.append({"id": image_id, "file_name": f"img_{i:03d}.png", "width": WIDTH, "height": HEIGHT})
        if i % 2 == 0:
            boxes = [(1, [16 + 4 * i, 20, 64, 48]), (2, [150, 100 + 2 * i, 80, 60])]
        else:
            boxes = [(3, [30, 110, 96, 56]), (4, [170 - 4 * i, 16, 40, 40])]
        for category_id, bbox in boxes:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": category_id,
                    "bbox": bbox,
                    "area": bbox[2] * bbox[3],
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    return {"images": images, "annotations": annotations, "categories": CATEGORIES}


@pytest.fixture
def coco_dict():
    return fewshot_coco_dict()


@pytest.fixture
def coco_path(tmp_path, coco_dict):
    path = tmp_path / "fewshot.json"
    path.write_text(json.dumps(coco_dict), encoding="utf-8")
    return path


@pytest.fixture
def fewshot(coco_path):
    return load_coco(coco_path)


@pytest.fixture
def registry():
    return CategoryRegistry(categories=tuple(CategoryLabel(**c) for c in CATEGORIES))


@pytest.fixture
def two_box_layout(registry):
    return Layout.from_objects(
        ImageFrame(width=WIDTH, height=HEIGHT),
        [
            (registry.by_name("cat"), BBox(x=16, y=20, w=64, h=48)),
            (registry.by_name("dog"), BBox(x=150, y=100, w=80, h=60)),
        ],
        LayoutSource.GROUND_TRUTH,
    )


@pytest.fixture
def make_config(tmp_path, coco_path):
    def factory(name: str = "run", **overrides) -> PipelineConfig:
        values = {
            "annotations_path": str(coco_path),
            "out_dir": str(tmp_path / name),
            "mock": True,
            "spe_method": "gtos",
        }
        values.update(overrides)
        return PipelineConfig.model_validate(values)

    return factory
