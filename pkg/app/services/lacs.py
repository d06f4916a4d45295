"""Layout-aware CLIP score.

For each distinct category of a layout, cs is the softmax score of the
category name against "background" on the image and cs_mask the score against
"white space" on the image with that category's boxes painted white. The
sample score is the mean of cs - cs_mask over categories.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import softmax

from app.core.errors import InvalidArgument, ScoringError
from app.schemas.layout import CategoryLabel, CategoryRegistry, Layout
from app.schemas.scoring import CategoryScore, SampleScore
from app.services.scorers import BACKGROUND_TEXT, WHITE_SPACE_TEXT, ImageTextScorer

logger = logging.getLogger(__name__)

MASK_COLOR = (255, 255, 255)


def mask_category(image: np.ndarray, layout: Layout, category: CategoryLabel) -> np.ndarray:
    boxes = layout.boxes_of(category)
    if not boxes:
        raise InvalidArgument(f"category {category.name!r} does not occur in the layout")
    masked = np.array(image, dtype=np.uint8, copy=True)
    for box in boxes:
        x0, y0, x1, y1 = box.pixel_bounds(layout.image_frame)
        masked[y0:y1, x0:x1] = MASK_COLOR
    return masked


def _first_softmax(scorer: ImageTextScorer, image: np.ndarray, texts: List[str], index: int = 0) -> float:
    logits = np.asarray(scorer.logits(image, texts), dtype=float)
    if logits.shape != (len(texts),):
        raise ScoringError(f"{scorer.scorer_id} returned {logits.shape[0]} logits for {len(texts)} texts")
    if not np.all(np.isfinite(logits)):
        raise ScoringError(f"{scorer.scorer_id} returned non-finite logits {logits.tolist()}")
    return float(softmax(logits)[index])


def category_cs(scorer: ImageTextScorer, image: np.ndarray, category: CategoryLabel) -> float:
    return _first_softmax(scorer, image, [category.name.lower(), BACKGROUND_TEXT])


def category_cs_mask(scorer: ImageTextScorer, masked_image: np.ndarray, category: CategoryLabel) -> float:
    return _first_softmax(scorer, masked_image, [category.name.lower(), WHITE_SPACE_TEXT])


def score_sample(scorer: ImageTextScorer, image: np.ndarray, layout: Layout, sample_ref: str = "") -> SampleScore:
    categories = layout.distinct_categories()
    if not categories:
        raise InvalidArgument("cannot score a sample against an empty layout")
    per_category = []
    for category in categories:
        cs = category_cs(scorer, image, category)
        cs_mask = category_cs_mask(scorer, mask_category(image, layout, category), category)
        per_category.append(CategoryScore.from_scores(category, cs, cs_mask))
    lacs = sum(c.delta for c in per_category) / len(per_category)
    return SampleScore(sample_ref=sample_ref, per_category=tuple(per_category), lacs=lacs)


def score_images(
    scorer: ImageTextScorer,
    images: Sequence[np.ndarray],
    layout: Layout,
    sample_refs: Sequence[str],
    workers: int = 1,
) -> List[SampleScore]:
    if len(images) != len(sample_refs):
        raise InvalidArgument(f"{len(images)} images but {len(sample_refs)} sample refs")
    if workers > 1 and scorer.thread_safe:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda pair: score_sample(scorer, pair[0], layout, pair[1]), zip(images, sample_refs)))
    return [score_sample(scorer, image, layout, ref) for image, ref in zip(images, sample_refs)]


def rank_indices(lacs_values: Sequence[float], top_n: int) -> List[int]:
    if not 1 <= top_n <= len(lacs_values):
        raise InvalidArgument(f"top_n must lie in [1, {len(lacs_values)}], got {top_n}")
    # Descending score, ties by ascending sample index
    order = sorted(range(len(lacs_values)), key=lambda i: (-lacs_values[i], i))
    return order[:top_n]


def rank_and_pick(scores: Sequence[SampleScore], top_n: int) -> List[str]:
    return [scores[i].sample_ref for i in rank_indices([s.lacs for s in scores], top_n)]


def mlacs(scores: Sequence[SampleScore]) -> float:
    if not scores:
        raise InvalidArgument("mLACS of an empty score list is undefined")
    return sum(s.lacs for s in scores) / len(scores)


def cs_crop(
    scorer: ImageTextScorer,
    image: np.ndarray,
    layout: Layout,
    categories: Optional[CategoryRegistry] = None,
) -> float:
    """Mean softmax score of each box's category on its crop, against every category name plus "background"."""
    if not layout.objects:
        raise InvalidArgument("cannot compute CS-Crop for an empty layout")
    names = [n.lower() for n in (categories.names() if categories is not None else [])]
    for name in layout.names():
        if name.lower() not in names:
            names.append(name.lower())
    texts = names + [BACKGROUND_TEXT]

    image = np.asarray(image)
    values = []
    for index, obj in enumerate(layout.objects):
        x0, y0, x1, y1 = obj.bbox.pixel_bounds(layout.image_frame)
        if x1 <= x0 or y1 <= y0:
            logger.warning("box %d (%s) has an empty crop, excluded from CS-Crop", index, obj.category.name)
            continue
        crop = image[y0:y1, x0:x1]
        values.append(_first_softmax(scorer, crop, texts, names.index(obj.category.name.lower())))
    if not values:
        raise ScoringError("every box of the layout has an empty crop")
    return sum(values) / len(values)
