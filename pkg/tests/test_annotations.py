import json
import random
from collections import Counter

import pytest

from app.core.errors import (
    AnnotationParseError,
    AnnotationValidationError,
    CategoryRegistryError,
    InvalidArgument,
    LayoutValidationError,
)
from app.schemas.layout import BBox, ImageFrame, Layout, LayoutObject, LayoutSource
from app.services.annotations import (
    build_coco,
    emit_coco,
    fewshot_base,
    flip_layout,
    load_coco,
    oversample_gtos,
)


def test_load_coco_builds_one_layout_per_image(fewshot):
    assert len(fewshot.layouts) == 10
    assert fewshot.shots == 5
    assert fewshot.instance_counts() == {"cat": 5, "dog": 5, "car": 5, "apple": 5}
    first = fewshot.layouts[0]
    assert first.image_frame == ImageFrame(width=256, height=192)
    assert first.caption == "a cat, a dog"
    assert first.image_ref == "img_000.png"
    assert all(layout.source is LayoutSource.GROUND_TRUTH for layout in fewshot.layouts)


def test_caption_uses_an_before_vowels(fewshot):
    assert fewshot.layouts[1].caption == "a car, an apple"


def test_shot_list_selects_annotations(tmp_path, coco_path):
    shot_list = tmp_path / "shots.txt"
    shot_list.write_text("# one cat and one dog\n100\n\n101\n", encoding="utf-8")
    subset = load_coco(coco_path, shot_list=shot_list)
    assert len(subset.layouts) == 1
    assert subset.layouts[0].names() == ["cat", "dog"]
    assert subset.shot_list_path == str(shot_list)


def test_category_filter_keeps_named_categories(coco_path):
    subset = load_coco(coco_path, category_filter=["Apple"])
    assert len(subset.layouts) == 5
    assert {n for layout in subset.layouts for n in layout.names()} == {"apple"}


def test_malformed_json_reports_byte_offset(tmp_path):
    path = tmp_path / "broken.json"
    path.write_bytes(b'{"images": [}')
    with pytest.raises(AnnotationParseError) as info:
        load_coco(path)
    assert info.value.offset == 12


def test_every_invalid_annotation_is_listed(tmp_path, coco_dict):
    coco_dict["annotations"][0]["bbox"] = [250, 20, 64, 48]  # leaves the frame
    coco_dict["annotations"][3]["bbox"] = [10, 10, 0, 5]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(coco_dict), encoding="utf-8")
    with pytest.raises(AnnotationValidationError) as info:
        load_coco(path)
    assert info.value.annotation_ids == [100, 103]


def test_unknown_category_is_a_registry_error(tmp_path, coco_dict):
    coco_dict["annotations"][0]["category_id"] = 99
    path = tmp_path / "unknown.json"
    path.write_text(json.dumps(coco_dict), encoding="utf-8")
    with pytest.raises(CategoryRegistryError):
        load_coco(path)


def test_flip_mirrors_boxes_and_is_an_involution(fewshot):
    layout = fewshot.layouts[0]
    flipped = flip_layout(layout)
    assert flipped.objects[0].bbox == BBox(x=256 - 16 - 64, y=20, w=64, h=48)
    assert flip_layout(flipped) == layout


def test_gtos_count_order_and_category_preservation(fewshot):
    copies = oversample_gtos(fewshot, 4, rng_seed=7)
    assert len(copies) == 40
    for position, copy in enumerate(copies):
        parent = fewshot.layouts[position % 10]
        assert copy.origin.parent_index == position % 10
        assert copy.source is LayoutSource.OVERSAMPLED
        assert Counter(copy.names()) == Counter(parent.names())
        expected = flip_layout(parent).objects if copy.origin.flipped else parent.objects
        assert copy.objects == expected


def test_gtos_smaller_ratio_is_a_prefix(fewshot):
    assert oversample_gtos(fewshot, 2, rng_seed=3) == oversample_gtos(fewshot, 4, rng_seed=3)[:20]


def test_gtos_flips_about_half_the_copies(fewshot):
    copies = oversample_gtos(fewshot, 50, rng_seed=11)
    flipped = sum(copy.origin.flipped for copy in copies)
    assert 175 < flipped < 325


def test_gtos_rejects_zero_ratio(fewshot):
    with pytest.raises(InvalidArgument):
        oversample_gtos(fewshot, 0, rng_seed=0)


def test_emit_coco_merges_with_real_data(tmp_path, fewshot):
    generated = oversample_gtos(fewshot, 1, rng_seed=0)[:3]
    path = emit_coco(
        generated,
        [f"images/gen_{i}.png" for i in range(3)],
        tmp_path / "out" / "dataset.json",
        base=fewshot_base(fewshot),
        categories=fewshot.categories,
    )
    data = json.loads(path.read_text(encoding="utf-8"))
    assert len(data["images"]) == 13
    assert data["images"][:10] == list(fewshot.coco_images)
    assert [img["id"] for img in data["images"][10:]] == [11, 12, 13]
    new_annotations = data["annotations"][20:]
    assert len(new_annotations) == 6
    assert new_annotations[0]["id"] == 120
    assert {a["image_id"] for a in new_annotations} == {11, 12, 13}
    assert [c["name"] for c in data["categories"]] == ["cat", "dog", "car", "apple"]

    reloaded = load_coco(path)
    assert len(reloaded.layouts) == 13


def test_build_coco_reports_the_invalid_layout_index(fewshot, registry):
    good = fewshot.layouts[0]
    bad = Layout.model_construct(
        image_frame=ImageFrame(width=10, height=10),
        objects=(LayoutObject(category=registry.by_name("cat"), bbox=BBox(x=5, y=5, w=20, h=2)),),
        caption="a cat",
        source=LayoutSource.GMM_GENERATED,
        image_ref=None,
        origin=None,
    )
    with pytest.raises(LayoutValidationError) as info:
        build_coco([good, bad], ["a.png", "b.png"])
    assert info.value.index == 1


def test_build_coco_needs_one_image_per_layout(fewshot):
    with pytest.raises(InvalidArgument):
        build_coco(list(fewshot.layouts[:2]), ["only-one.png"])


def write_coco(tmp_path, data, name="coco.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


@pytest.mark.parametrize("value", [float("nan"), float("inf"), "10", None, True])
def test_box_coordinates_must_be_finite_numbers(tmp_path, coco_dict, value):
    coco_dict["annotations"][2]["bbox"] = [value, 20, 64, 48]
    with pytest.raises(AnnotationValidationError) as info:
        load_coco(write_coco(tmp_path, coco_dict))
    assert info.value.annotation_ids == [102]


def test_missing_keys_are_validation_errors(tmp_path, coco_dict):
    del coco_dict["annotations"][0]["category_id"]
    del coco_dict["annotations"][1]["id"]
    del coco_dict["images"][1]["width"]
    with pytest.raises(AnnotationValidationError) as info:
        load_coco(write_coco(tmp_path, coco_dict))
    # image 2 carries annotations 102 and 103
    assert info.value.annotation_ids == [100, 102, 103]
    assert any("entry 1: missing id" in detail for detail in info.value.details)


def test_image_without_an_id_is_a_validation_error(tmp_path, coco_dict):
    del coco_dict["images"][9]["id"]
    with pytest.raises(AnnotationValidationError) as info:
        load_coco(write_coco(tmp_path, coco_dict))
    assert "image entry 9: missing id" in str(info.value)


CATEGORY_ENTRIES = [{"id": i, "name": name} for i, name in enumerate(["cat", "dog", "car", "apple"], start=1)]


def random_coco(rng: random.Random, n_images: int) -> dict:
    images, annotations = [], []
    for image_id in range(1, n_images + 1):
        width, height = rng.randint(8, 640), rng.randint(8, 480)
        images.append({"id": image_id, "file_name": f"{image_id}.png", "width": width, "height": height})
        for _ in range(rng.randint(1, 4)):
            w = rng.choice([rng.randint(1, width), rng.uniform(0.5, width)])
            h = rng.choice([rng.randint(1, height), rng.uniform(0.5, height)])
            bbox = [rng.uniform(0, width - w), rng.uniform(0, height - h), w, h]
            annotations.append(
                {"id": len(annotations) + 1, "image_id": image_id, "category_id": rng.randint(1, 4), "bbox": bbox}
            )
    return {"images": images, "annotations": annotations, "categories": CATEGORY_ENTRIES}


CORRUPTIONS = {
    "past the right edge": lambda b, img: [img["width"] - b[2] + 1, b[1], b[2], b[3]],
    "past the bottom edge": lambda b, img: [b[0], img["height"] - b[3] + 1, b[2], b[3]],
    "negative x": lambda b, img: [-1, b[1], b[2], b[3]],
    "negative y": lambda b, img: [b[0], -0.5, b[2], b[3]],
    "zero width": lambda b, img: [b[0], b[1], 0, b[3]],
    "negative height": lambda b, img: [b[0], b[1], b[2], -3],
    "nan": lambda b, img: [b[0], float("nan"), b[2], b[3]],
    "string": lambda b, img: [str(b[0]), b[1], b[2], b[3]],
    "three values": lambda b, img: b[:3],
}


def test_fuzzed_valid_files_load_in_bounds(tmp_path):
    rng = random.Random(4)
    for case in range(100):
        data = random_coco(rng, rng.randint(1, 5))
        loaded = load_coco(write_coco(tmp_path, data, f"valid_{case}.json"))
        assert sum(len(layout.objects) for layout in loaded.layouts) == len(data["annotations"])
        for layout in loaded.layouts:
            frame = layout.image_frame
            for obj in layout.objects:
                box = obj.bbox
                assert 0 <= box.x and box.x + box.w <= frame.width + 1e-6
                assert 0 <= box.y and box.y + box.h <= frame.height + 1e-6


def test_fuzzed_invalid_files_raise(tmp_path):
    rng = random.Random(8)
    names = sorted(CORRUPTIONS)
    for case in range(200):
        data = random_coco(rng, rng.randint(1, 5))
        ann = rng.choice(data["annotations"])
        image = data["images"][ann["image_id"] - 1]
        ann["bbox"] = CORRUPTIONS[names[case % len(names)]](ann["bbox"], image)
        with pytest.raises(AnnotationValidationError) as info:
            load_coco(write_coco(tmp_path, data, f"invalid_{case}.json"))
        assert info.value.annotation_ids == [ann["id"]]


def test_emit_coco_of_nothing(tmp_path, registry):
    path = emit_coco([], [], tmp_path / "empty.json", categories=registry)
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["images"] == []
    assert data["annotations"] == []
    assert [c["name"] for c in data["categories"]] == ["cat", "dog", "car", "apple"]


def test_emit_then_load_reproduces_boxes_and_frames(tmp_path, registry):
    rng = random.Random(15)
    for case in range(50):
        layouts = []
        for _ in range(rng.randint(1, 6)):
            frame = ImageFrame(width=rng.randint(16, 640), height=rng.randint(16, 480))
            objects = []
            for _ in range(rng.randint(1, 5)):
                w, h = rng.uniform(1, frame.width), rng.uniform(1, frame.height)
                box = BBox(x=rng.uniform(0, frame.width - w), y=rng.uniform(0, frame.height - h), w=w, h=h)
                objects.append((rng.choice(registry.categories), box))
            layouts.append(Layout.from_objects(frame, objects, LayoutSource.GMM_GENERATED))
        path = emit_coco(layouts, [f"{i}.png" for i in range(len(layouts))], tmp_path / f"rt_{case}.json")
        reloaded = load_coco(path).layouts
        assert len(reloaded) == len(layouts)
        for original, loaded in zip(layouts, reloaded):
            assert loaded.image_frame == original.image_frame
            assert Counter((o.category.name, o.bbox) for o in loaded.objects) == Counter(
                (o.category.name, o.bbox) for o in original.objects
            )
