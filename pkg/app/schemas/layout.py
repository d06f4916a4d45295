import enum
import math
from collections import Counter
from typing import Dict, Iterable, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.errors import CategoryRegistryError

# Float slack for x + w <= width after rescaling between frames
BOUNDS_EPS = 1e-6


class LayoutSource(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    LLM_GENERATED = "llm_generated"
    GMM_GENERATED = "gmm_generated"
    OVERSAMPLED = "oversampled"


class ImageFrame(BaseModel):
    model_config = ConfigDict(frozen=True)

    width: int = Field(gt=0)
    height: int = Field(gt=0)


class BBox(BaseModel):
    """COCO convention: top-left origin, pixels, (x, y, w, h)."""

    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    w: float = Field(gt=0)
    h: float = Field(gt=0)

    def as_list(self) -> List[float]:
        return [self.x, self.y, self.w, self.h]

    def area(self) -> float:
        return self.w * self.h

    def problems(self, frame: ImageFrame) -> List[str]:
        found = []
        if self.x < -BOUNDS_EPS or self.y < -BOUNDS_EPS:
            found.append(f"origin ({self.x}, {self.y}) is negative")
        if self.x + self.w > frame.width + BOUNDS_EPS:
            found.append(f"x + w = {self.x + self.w} exceeds width {frame.width}")
        if self.y + self.h > frame.height + BOUNDS_EPS:
            found.append(f"y + h = {self.y + self.h} exceeds height {frame.height}")
        return found

    def fits(self, frame: ImageFrame) -> bool:
        return not self.problems(frame)

    def flipped_x(self, width: int) -> "BBox":
        return BBox(x=max(0.0, width - self.x - self.w), y=self.y, w=self.w, h=self.h)

    def rescaled(self, sx: float, sy: float) -> "BBox":
        return BBox(x=self.x * sx, y=self.y * sy, w=self.w * sx, h=self.h * sy)

    def pixel_bounds(self, frame: ImageFrame) -> Tuple[int, int, int, int]:
        """Half-open pixel rectangle (x0, y0, x1, y1) covered by the box, clipped to the frame."""
        x0 = max(0, math.floor(self.x + 1e-9))
        y0 = max(0, math.floor(self.y + 1e-9))
        x1 = min(frame.width, math.ceil(self.x + self.w - 1e-9))
        y1 = min(frame.height, math.ceil(self.y + self.h - 1e-9))
        return x0, y0, max(x0, x1), max(y0, y1)


class CategoryLabel(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    name: str = Field(min_length=1)

    @field_validator("name")
    @classmethod
    def strip_name(cls, value: str) -> str:
        value = value.strip()
        if not value:
            raise ValueError("category name must not be blank")
        return value


class CategoryRegistry(BaseModel):
    model_config = ConfigDict(frozen=True)

    categories: Tuple[CategoryLabel, ...] = ()

    @model_validator(mode="after")
    def unique_ids(self):
        ids = [c.id for c in self.categories]
        if len(ids) != len(set(ids)):
            duplicated = sorted(i for i, n in Counter(ids).items() if n > 1)
            raise ValueError(f"duplicate category ids {duplicated}")
        return self

    def by_id(self, category_id: int) -> CategoryLabel:
        for category in self.categories:
            if category.id == category_id:
                return category
        raise CategoryRegistryError(f"unknown category id {category_id}")

    def by_name(self, name: str) -> CategoryLabel:
        wanted = name.strip().lower()
        for category in self.categories:
            if category.name.lower() == wanted:
                return category
        raise CategoryRegistryError(f"unknown category name {name!r}")

    def names(self) -> List[str]:
        return [c.name for c in self.categories]

    def merged(self, others: Iterable[CategoryLabel]) -> "CategoryRegistry":
        known = {c.id: c for c in self.categories}
        for category in others:
            known.setdefault(category.id, category)
        return CategoryRegistry(categories=tuple(sorted(known.values(), key=lambda c: c.id)))


# Captions: "a cat, an apple, a person"

def indefinite_article(name: str) -> str:
    return "an" if name[:1].lower() in "aeiou" else "a"


def object_phrase(name: str) -> str:
    return f"{indefinite_article(name)} {name}"


def make_caption(names: Iterable[str]) -> str:
    return ", ".join(object_phrase(n) for n in names)


def caption_phrases(caption: str) -> List[str]:
    return [p.strip() for p in caption.split(",") if p.strip()]


def phrase_name(phrase: str) -> str:
    phrase = phrase.strip()
    lowered = phrase.lower()
    for article in ("an ", "a "):
        if lowered.startswith(article):
            return phrase[len(article):].strip()
    return phrase


def caption_names(caption: str) -> List[str]:
    return [phrase_name(p) for p in caption_phrases(caption)]


class LayoutObject(BaseModel):
    model_config = ConfigDict(frozen=True)

    category: CategoryLabel
    bbox: BBox


class LayoutOrigin(BaseModel):
    """Where a generated layout came from; feeds the provenance records."""

    model_config = ConfigDict(frozen=True)

    parent_index: Optional[int] = None
    seed: Optional[int] = None
    retries: int = 0
    fallback: Optional[str] = None
    flipped: bool = False


class Layout(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_frame: ImageFrame
    objects: Tuple[LayoutObject, ...] = ()
    caption: str = ""
    source: LayoutSource = LayoutSource.GROUND_TRUTH
    image_ref: Optional[str] = None
    origin: Optional[LayoutOrigin] = None

    @model_validator(mode="after")
    def check_invariants(self):
        found = layout_problems(self)
        if found:
            raise ValueError("; ".join(found))
        return self

    @classmethod
    def from_objects(
        cls,
        frame: ImageFrame,
        objects: Iterable[Tuple[CategoryLabel, BBox]],
        source: LayoutSource,
        **extra,
    ) -> "Layout":
        items = tuple(LayoutObject(category=c, bbox=b) for c, b in objects)
        return cls(
            image_frame=frame,
            objects=items,
            caption=make_caption(o.category.name for o in items),
            source=source,
            **extra,
        )

    def names(self) -> List[str]:
        return [o.category.name for o in self.objects]

    def category_counts(self) -> Dict[str, int]:
        return dict(Counter(n.lower() for n in self.names()))

    def distinct_categories(self) -> List[CategoryLabel]:
        seen = {}
        for obj in self.objects:
            seen.setdefault(obj.category.id, obj.category)
        return list(seen.values())

    def boxes_of(self, category: CategoryLabel) -> List[BBox]:
        return [o.bbox for o in self.objects if o.category.id == category.id]

    def flipped(self) -> "Layout":
        width = self.image_frame.width
        return self.model_copy(
            update={
                "objects": tuple(
                    LayoutObject(category=o.category, bbox=o.bbox.flipped_x(width)) for o in self.objects
                )
            }
        )


def layout_problems(layout: Layout) -> List[str]:
    found = []
    for index, obj in enumerate(layout.objects):
        for problem in obj.bbox.problems(layout.image_frame):
            found.append(f"object {index} ({obj.category.name}): {problem}")
    expected = Counter(n.lower() for n in layout.names())
    mentioned = Counter(n.lower() for n in caption_names(layout.caption))
    if expected != mentioned:
        found.append(f"caption {layout.caption!r} does not match objects {dict(expected)}")
    return found


class FewShotSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    shots: int = Field(ge=1)
    layouts: Tuple[Layout, ...]
    categories: CategoryRegistry
    # Raw COCO entries of the selected subset, re-emitted verbatim when merging
    coco_images: Tuple[dict, ...] = ()
    coco_annotations: Tuple[dict, ...] = ()
    source_path: Optional[str] = None
    shot_list_path: Optional[str] = None

    def instance_counts(self) -> Dict[str, int]:
        counts: Counter = Counter()
        for layout in self.layouts:
            counts.update(layout.names())
        return dict(counts)

    def present_categories(self) -> List[CategoryLabel]:
        present = {o.category.id for layout in self.layouts for o in layout.objects}
        return [c for c in self.categories.categories if c.id in present]
