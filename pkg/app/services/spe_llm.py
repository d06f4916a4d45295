"""Spatial prior extrapolation with an auto-completing language model.

A batch of ground-truth layouts is rendered as in-context examples, the model
completes the object list for a reshuffled caption of one of them, and the
completion is parsed back into a validated Layout.
"""
import logging
import random
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, model_validator

from app.core.errors import (
    BackendError,
    BoxInvalid,
    CategoryMismatch,
    CategoryRegistryError,
    InvalidArgument,
    ParseFailure,
    ProtocolError,
    RetryableLayoutError,
    SpeAborted,
)
from app.core.seeding import derive_seed
from app.schemas.layout import (
    BBox,
    CategoryLabel,
    CategoryRegistry,
    FewShotSet,
    ImageFrame,
    Layout,
    LayoutOrigin,
    LayoutSource,
    caption_names,
    caption_phrases,
    make_caption,
)
from app.services.annotations import oversampled_copy
from app.services.completion import CompletionBackend

logger = logging.getLogger(__name__)

DEFAULT_CANVAS = ImageFrame(width=512, height=512)
DEFAULT_TEMPLATE_PATH = Path(__file__).resolve().parent.parent / "assets" / "layout_prompt.txt"
CONTINUATION_MARK = "objects:"

Canvas = Union[ImageFrame, Tuple[int, int]]

_NUM = r"-?\d+(?:\.\d+)?"
_NAME = r"""(?:'[^'\n]+'|"[^"\n]+")"""
_ENTRY = rf"{_NAME}\s*,\s*\[\s*{_NUM}\s*,\s*{_NUM}\s*,\s*{_NUM}\s*,\s*{_NUM}\s*\]"
_LIST_RE = re.compile(rf"\[\s*{_ENTRY}(?:\s*,\s*{_ENTRY})*\s*,?\s*\]")
_ENTRY_RE = re.compile(
    rf"""(?:'([^'\n]+)'|"([^"\n]+)")\s*,\s*\[\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\]"""
)
_PLACEHOLDER_RE = re.compile(r"\{(CANVAS_W|CANVAS_H|EXAMPLES|QUERY_CAPTION)\}")


def as_canvas(canvas: Canvas) -> ImageFrame:
    if isinstance(canvas, ImageFrame):
        return canvas
    width, height = canvas
    if width <= 0 or height <= 0:
        raise InvalidArgument(f"canvas dimensions must be positive, got {width}x{height}")
    return ImageFrame(width=width, height=height)


class LayoutDescription(BaseModel):
    model_config = ConfigDict(frozen=True)

    caption: str
    object_entries: Tuple[Tuple[str, Tuple[int, int, int, int]], ...]
    canvas: ImageFrame = DEFAULT_CANVAS

    @model_validator(mode="after")
    def boxes_on_canvas(self):
        for index, (name, (x, y, w, h)) in enumerate(self.object_entries):
            if w <= 0 or h <= 0:
                raise ValueError(f"entry {index} ({name}) has non-positive size")
            if x < 0 or y < 0 or x + w > self.canvas.width or y + h > self.canvas.height:
                raise ValueError(f"entry {index} ({name}) leaves the {self.canvas.width}x{self.canvas.height} canvas")
        return self

    def serialize(self) -> str:
        entries = ", ".join(f"'{name}', [{x}, {y}, {w}, {h}]" for name, (x, y, w, h) in self.object_entries)
        return f"caption: '{self.caption}'\n{CONTINUATION_MARK} [{entries}]"


def _snap(start: float, size: float, limit: int) -> Tuple[int, int]:
    lo = min(max(int(round(start)), 0), limit - 1)
    extent = max(1, min(int(round(size)), limit - lo))
    return lo, extent


def describe_layout(layout: Layout, canvas: Canvas = DEFAULT_CANVAS) -> LayoutDescription:
    canvas = as_canvas(canvas)
    sx = canvas.width / layout.image_frame.width
    sy = canvas.height / layout.image_frame.height
    entries = []
    for obj in layout.objects:
        box = obj.bbox
        x, w = _snap(box.x * sx, box.w * sx, canvas.width)
        y, h = _snap(box.y * sy, box.h * sy, canvas.height)
        entries.append((obj.category.name, (x, y, w, h)))
    return LayoutDescription(
        caption=make_caption(name for name, _ in entries),
        object_entries=tuple(entries),
        canvas=canvas,
    )


@lru_cache(maxsize=8)
def load_template(path: Optional[str] = None) -> str:
    text = Path(path or DEFAULT_TEMPLATE_PATH).read_text(encoding="utf-8").rstrip()
    for placeholder in ("{EXAMPLES}", "{QUERY_CAPTION}"):
        if placeholder not in text:
            raise InvalidArgument(f"prompt template {path or DEFAULT_TEMPLATE_PATH} lacks {placeholder}")
    if not text.endswith(CONTINUATION_MARK):
        raise InvalidArgument(f"prompt template must end with {CONTINUATION_MARK!r}")
    return text


class PromptTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    template: str
    canvas: ImageFrame
    examples: Tuple[LayoutDescription, ...]
    query_caption: str

    @model_validator(mode="after")
    def non_empty(self):
        if not self.examples:
            raise ValueError("a prompt needs at least one example")
        if not self.query_caption.strip():
            raise ValueError("query caption must not be empty")
        return self

    def _fill(self, text: str) -> str:
        values = {
            "CANVAS_W": str(self.canvas.width),
            "CANVAS_H": str(self.canvas.height),
            "EXAMPLES": "\n\n".join(e.serialize() for e in self.examples),
            "QUERY_CAPTION": self.query_caption,
        }
        return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], text)

    @property
    def instruction_header(self) -> str:
        return self._fill(self.template.split("{EXAMPLES}", 1)[0]).rstrip()

    def render(self) -> str:
        return self._fill(self.template).rstrip()


def build_prompt(
    examples: Sequence[LayoutDescription],
    query_caption: str,
    rng_seed: int,
    template: Optional[str] = None,
    canvas: Optional[Canvas] = None,
) -> PromptTemplate:
    if not examples:
        raise InvalidArgument("build_prompt needs at least one example")
    shuffled = list(examples)
    random.Random(rng_seed).shuffle(shuffled)
    return PromptTemplate(
        template=template if template is not None else load_template(),
        canvas=as_canvas(canvas) if canvas is not None else examples[0].canvas,
        examples=tuple(shuffled),
        query_caption=query_caption,
    )


def make_query_caption(base_layout: Layout, rng_seed: int) -> str:
    phrases = caption_phrases(base_layout.caption)
    if not phrases:
        raise InvalidArgument("cannot build a query caption from an empty layout")
    random.Random(rng_seed).shuffle(phrases)
    return ", ".join(phrases)


def _category_for(name: str, categories: Optional[CategoryRegistry], fallback: dict) -> CategoryLabel:
    if categories is not None:
        return categories.by_name(name)
    return fallback[name.lower()]


def parse_layout_response(
    response: str,
    canvas: Canvas,
    expected_caption: str,
    categories: Optional[CategoryRegistry] = None,
    frame: Optional[ImageFrame] = None,
) -> Layout:
    """Parse the first object list of a completion into a Layout.

    Boxes are validated on the prompt canvas. The layout is returned in the
    canvas frame unless `frame` is given, in which case boxes are rescaled to it.
    """
    canvas = as_canvas(canvas)
    match = _LIST_RE.search(response or "")
    if match is None:
        raise ParseFailure("no object list found in completion")

    parsed = []
    for index, entry in enumerate(_ENTRY_RE.finditer(match.group(0))):
        name = (entry.group(1) or entry.group(2)).strip()
        x, y, w, h = (float(entry.group(i)) for i in range(3, 7))
        if w <= 0 or h <= 0:
            raise BoxInvalid(index, f"non-positive size w={w}, h={h}")
        if x < 0 or y < 0 or x + w > canvas.width or y + h > canvas.height:
            raise BoxInvalid(index, f"[{x}, {y}, {w}, {h}] leaves the {canvas.width}x{canvas.height} canvas")
        parsed.append((name, x, y, w, h))

    expected = Counter(n.lower() for n in caption_names(expected_caption))
    found = Counter(name.lower() for name, *_ in parsed)
    if expected != found:
        raise CategoryMismatch(dict(expected), dict(found))

    # Without a registry, ids follow the sorted category names of the caption
    fallback = {name: CategoryLabel(id=i + 1, name=name) for i, name in enumerate(sorted(expected))}
    target = frame or canvas
    sx, sy = target.width / canvas.width, target.height / canvas.height
    objects = []
    for name, x, y, w, h in parsed:
        try:
            category = _category_for(name, categories, fallback)
        except CategoryRegistryError as err:
            raise CategoryMismatch(dict(expected), dict(found)) from err
        objects.append((category, BBox(x=x * sx, y=y * sy, w=w * sx, h=h * sy)))
    return Layout.from_objects(target, objects, LayoutSource.LLM_GENERATED)


def partition_batches(count: int, batch_size: int) -> List[List[int]]:
    if batch_size < 1:
        raise InvalidArgument(f"example batch size must be >= 1, got {batch_size}")
    return [list(range(start, min(start + batch_size, count))) for start in range(0, count, batch_size)]


def generate_layouts(
    fewshot: FewShotSet,
    backend: CompletionBackend,
    alpha: int,
    batch_size: int = 5,
    max_retries: int = 3,
    rng_seed: int = 0,
    canvas: Canvas = DEFAULT_CANVAS,
    temperature: float = 0.7,
    max_tokens: int = 256,
    template: Optional[str] = None,
    workers: int = 1,
) -> List[Layout]:
    """Generate alpha layouts per ground-truth layout.

    Output order is (repeat, batch, element), so the stream for a smaller alpha
    is a prefix of the stream for a larger one.
    """
    if alpha < 1:
        raise InvalidArgument(f"augmentation ratio must be >= 1, got {alpha}")
    if max_retries < 0:
        raise InvalidArgument("max_retries must be >= 0")
    canvas = as_canvas(canvas)
    template = template if template is not None else load_template()
    layouts = fewshot.layouts
    descriptions = [describe_layout(layout, canvas) for layout in layouts]
    batches = partition_batches(len(layouts), batch_size)
    slots = [(r, batch, index) for r in range(alpha) for batch in batches for index in batch]

    def run_slot(slot) -> Layout:
        repeat, batch, index = slot
        base = layouts[index]
        examples = [descriptions[j] for j in batch]
        last_error = None
        for attempt in range(max_retries + 1):
            seed = derive_seed(rng_seed, "llm", repeat, index, attempt)
            query = make_query_caption(base, seed)
            prompt = build_prompt(examples, query, seed, template=template, canvas=canvas).render()
            completion = backend.complete(prompt, max_tokens, temperature, seed)
            try:
                layout = parse_layout_response(
                    completion, canvas, query, categories=fewshot.categories, frame=base.image_frame
                )
            except RetryableLayoutError as err:
                last_error = err
                logger.debug("slot (%d, %d) attempt %d rejected: %s", repeat, index, attempt, err)
                continue
            return layout.model_copy(
                update={"origin": LayoutOrigin(parent_index=index, seed=seed, retries=attempt)}
            )

        flip = random.Random(derive_seed(rng_seed, "fallback", repeat, index)).random() < 0.5
        logger.warning(
            "slot (%d, %d): %d completions rejected, falling back to oversampling (%s)",
            repeat, index, max_retries + 1, last_error,
        )
        return oversampled_copy(
            base,
            index,
            flip,
            seed=derive_seed(rng_seed, "llm", repeat, index, max_retries),
            retries=max_retries,
            fallback=f"gtos: {type(last_error).__name__}",
        )

    results: List[Layout] = []
    try:
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(run_slot, slot) for slot in slots]
                try:
                    for future in futures:
                        results.append(future.result())
                except (BackendError, ProtocolError):
                    for future in futures:
                        future.cancel()
                    raise
        else:
            for slot in slots:
                results.append(run_slot(slot))
    except (BackendError, ProtocolError) as err:
        raise SpeAborted(f"completion backend failed: {err}", completed=results, total=len(slots)) from err

    fallbacks = sum(1 for layout in results if layout.source is LayoutSource.OVERSAMPLED)
    logger.info("generated %d layouts with %s (%d fallbacks)", len(results), backend.backend_id, fallbacks)
    return results
