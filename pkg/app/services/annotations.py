import json
import logging
import math
import random
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

from app.core.errors import (
    AnnotationParseError,
    AnnotationValidationError,
    CategoryRegistryError,
    InvalidArgument,
    LayoutValidationError,
)
from app.schemas.layout import (
    BBox,
    CategoryLabel,
    CategoryRegistry,
    FewShotSet,
    ImageFrame,
    Layout,
    LayoutOrigin,
    LayoutSource,
    layout_problems,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def read_shot_list(path: PathLike) -> Set[int]:
    """Newline-delimited annotation ids; blank lines and '#' comments are ignored."""
    ids = set()
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            ids.add(int(line))
        except ValueError:
            raise InvalidArgument(f"{path}:{line_no}: {line!r} is not an annotation id")
    return ids


def _read_coco(path: PathLike) -> dict:
    raw = Path(path).read_bytes()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as err:
        # JSONDecodeError reports a character offset; convert it to bytes
        offset = len(err.doc[: err.pos].encode("utf-8"))
        raise AnnotationParseError(f"malformed COCO JSON in {path}: {err.msg}", offset) from err
    except UnicodeDecodeError as err:
        raise AnnotationParseError(f"COCO file {path} is not UTF-8", err.start) from err
    if not isinstance(data, dict):
        raise AnnotationParseError(f"COCO root in {path} must be an object", 0)
    return data


def registry_from_coco(data: dict) -> CategoryRegistry:
    try:
        return CategoryRegistry(
            categories=tuple(CategoryLabel(id=c["id"], name=c["name"]) for c in data.get("categories", []))
        )
    except (KeyError, ValueError) as err:
        raise CategoryRegistryError(f"invalid categories block: {err}") from err


def _finite_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _positive_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool) and value > 0


def load_coco(
    path: PathLike,
    shot_list: Optional[PathLike] = None,
    shots: Optional[int] = None,
    category_filter: Optional[Sequence[str]] = None,
) -> FewShotSet:
    data = _read_coco(path)
    registry = registry_from_coco(data)

    # Validate every entry first so the error lists all offenders
    bad_ids, details = [], []

    def reject(ann_id, message: str) -> None:
        if ann_id is not None:
            bad_ids.append(ann_id)
        details.append(message)

    images = {}
    for index, img in enumerate(data.get("images", [])):
        if not isinstance(img, dict) or img.get("id") is None:
            reject(None, f"image entry {index}: missing id")
            continue
        images[img["id"]] = img

    annotations = list(data.get("annotations", []))
    if shot_list is not None:
        selected = read_shot_list(shot_list)
        annotations = [a for a in annotations if isinstance(a, dict) and a.get("id") in selected]
        missing = selected - {a["id"] for a in annotations}
        if missing:
            logger.warning("shot list %s names %d annotation ids absent from %s", shot_list, len(missing), path)

    keep_ids = None
    if category_filter:
        keep_ids = {registry.by_name(name).id for name in category_filter}

    per_image: Dict[int, List[tuple]] = defaultdict(list)
    for index, ann in enumerate(annotations):
        if not isinstance(ann, dict):
            reject(None, f"annotation entry {index}: not an object")
            continue
        ann_id = ann.get("id")
        if ann_id is None:
            reject(None, f"annotation entry {index}: missing id")
            continue
        if ann.get("category_id") is None:
            reject(ann_id, f"annotation {ann_id}: missing category_id")
            continue
        category = registry.by_id(ann["category_id"])
        if keep_ids is not None and category.id not in keep_ids:
            continue
        image = images.get(ann.get("image_id"))
        if image is None:
            reject(ann_id, f"annotation {ann_id}: unknown image id {ann.get('image_id')}")
            continue
        if not (_positive_int(image.get("width")) and _positive_int(image.get("height"))):
            reject(ann_id, f"annotation {ann_id}: image {image['id']} needs positive integer width and height")
            continue
        bbox = ann.get("bbox")
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            reject(ann_id, f"annotation {ann_id}: bbox must be [x, y, w, h]")
            continue
        if not all(_finite_number(v) for v in bbox):
            reject(ann_id, f"annotation {ann_id}: bbox {bbox!r} must hold four finite numbers")
            continue
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0 or h <= 0:
            reject(ann_id, f"annotation {ann_id}: non-positive size w={w}, h={h}")
            continue
        box = BBox(x=x, y=y, w=w, h=h)
        frame = ImageFrame(width=image["width"], height=image["height"])
        problems = box.problems(frame)
        if problems:
            reject(ann_id, f"annotation {ann_id}: {'; '.join(problems)}")
            continue
        per_image[image["id"]].append((category, box, ann))
    if details:
        raise AnnotationValidationError(bad_ids, details)

    layouts, kept_images, kept_annotations = [], [], []
    for image_id in sorted(per_image):
        image = images[image_id]
        entries = per_image[image_id]
        layouts.append(
            Layout.from_objects(
                ImageFrame(width=image["width"], height=image["height"]),
                [(c, b) for c, b, _ in entries],
                LayoutSource.GROUND_TRUTH,
                image_ref=image.get("file_name"),
            )
        )
        kept_images.append(image)
        kept_annotations.extend(ann for _, _, ann in entries)

    counts = Counter(name for layout in layouts for name in layout.names())
    if shots is None:
        shots = Counter(counts.values()).most_common(1)[0][0] if counts else 1
    off = {name: n for name, n in counts.items() if n != shots}
    if off:
        logger.warning("declared %d-shot but per-category instance counts differ: %s", shots, off)
    logger.info("loaded %d layouts (%d instances) from %s", len(layouts), sum(counts.values()), path)

    return FewShotSet(
        shots=shots,
        layouts=tuple(layouts),
        categories=registry,
        coco_images=tuple(kept_images),
        coco_annotations=tuple(kept_annotations),
        source_path=str(path),
        shot_list_path=str(shot_list) if shot_list is not None else None,
    )


def flip_layout(layout: Layout) -> Layout:
    return layout.flipped()


def oversample_gtos(fewshot: FewShotSet, ratio: int, rng_seed: int) -> List[Layout]:
    """Ground-truth oversampling: ratio copies of every layout, each flipped with p=0.5.

    Copies are ordered repeat-major so a smaller ratio is a prefix of a larger one.
    """
    if ratio < 1:
        raise InvalidArgument(f"augmentation ratio must be >= 1, got {ratio}")
    rng = random.Random(rng_seed)
    out = []
    for _ in range(ratio):
        for index, layout in enumerate(fewshot.layouts):
            flip = rng.random() < 0.5
            out.append(oversampled_copy(layout, index, flip))
    return out


def oversampled_copy(layout: Layout, parent_index: int, flip: bool, **origin) -> Layout:
    copy = layout.flipped() if flip else layout
    return copy.model_copy(
        update={
            "source": LayoutSource.OVERSAMPLED,
            "image_ref": None,
            "origin": LayoutOrigin(parent_index=parent_index, flipped=flip, **origin),
        }
    )


def _next_id(entries: Iterable[dict]) -> int:
    return max((int(e["id"]) for e in entries), default=0) + 1


def build_coco(
    layouts: Sequence[Layout],
    images: Sequence[str],
    base: Optional[dict] = None,
    categories: Optional[CategoryRegistry] = None,
) -> dict:
    if len(layouts) != len(images):
        raise InvalidArgument(f"{len(layouts)} layouts but {len(images)} images")
    for index, layout in enumerate(layouts):
        problems = layout_problems(layout)
        if problems:
            raise LayoutValidationError(index, problems)

    base = base or {}
    out_images = list(base.get("images", []))
    out_annotations = list(base.get("annotations", []))

    registry = registry_from_coco(base) if base.get("categories") else CategoryRegistry()
    if categories is not None:
        registry = registry.merged(categories.categories)
    registry = registry.merged(o.category for layout in layouts for o in layout.objects)

    image_id = _next_id(out_images)
    ann_id = _next_id(out_annotations)
    for layout, file_name in zip(layouts, images):
        out_images.append(
            {
                "id": image_id,
                "file_name": file_name,
                "width": layout.image_frame.width,
                "height": layout.image_frame.height,
            }
        )
        for obj in layout.objects:
            out_annotations.append(
                {
                    "id": ann_id,
                    "image_id": image_id,
                    "category_id": obj.category.id,
                    "bbox": obj.bbox.as_list(),
                    "area": obj.bbox.area(),
                    "iscrowd": 0,
                }
            )
            ann_id += 1
        image_id += 1

    return {
        "images": out_images,
        "annotations": out_annotations,
        "categories": [{"id": c.id, "name": c.name} for c in registry.categories],
    }


def emit_coco(
    layouts: Sequence[Layout],
    images: Sequence[str],
    path: PathLike,
    base: Optional[dict] = None,
    categories: Optional[CategoryRegistry] = None,
) -> Path:
    """Write layouts as COCO detection JSON; entries of `base` are kept verbatim and new ids follow them."""
    coco = build_coco(layouts, images, base=base, categories=categories)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(coco, indent=2), encoding="utf-8")
    logger.info("wrote %d images / %d annotations to %s", len(coco["images"]), len(coco["annotations"]), path)
    return path


def fewshot_base(fewshot: FewShotSet) -> dict:
    return {
        "images": [dict(img) for img in fewshot.coco_images],
        "annotations": [dict(ann) for ann in fewshot.coco_annotations],
        "categories": [{"id": c.id, "name": c.name} for c in fewshot.categories.categories],
    }
