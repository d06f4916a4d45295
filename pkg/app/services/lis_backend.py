"""Layout-to-image synthesis adapters.

Real diffusion models run out of process, behind an HTTP endpoint or a
subprocess speaking JSON. The mock renderer paints category-coded patches and
is the oracle the LACS tests are built on.
"""
import base64
import colorsys
import hashlib
import io
import json
import logging
import os
import random
import shlex
import subprocess
import threading
import time
from functools import lru_cache
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple, Union, runtime_checkable

import httpx
import numpy as np
from PIL import Image, ImageDraw, ImageFont

from app.core.errors import BackendError, InvalidArgument, ProtocolError
from app.core.seeding import derive_seed
from app.schemas.layout import CategoryLabel, ImageFrame, Layout
from app.schemas.synthesis import ImageBatch, SynthesisRequest

logger = logging.getLogger(__name__)

BACKGROUND = (127, 127, 127)
GLYPH_COLOR = (0, 0, 0)
MIN_GLYPH_SIZE = 12

Rect = Tuple[int, int, int, int]


@runtime_checkable
class SynthesisBackend(Protocol):
    backend_id: str
    deterministic: bool

    def synthesize(self, request: SynthesisRequest) -> ImageBatch:
        ...


def category_color(name: str) -> Tuple[int, int, int]:
    """Saturated RGB color derived from the category name; never gray or white."""
    digest = hashlib.sha256(name.strip().lower().encode("utf-8")).hexdigest()
    hue = int(digest[:8], 16) / 2**32
    r, g, b = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    return int(round(r * 255)), int(round(g * 255)), int(round(b * 255))


def build_lis_prompt(layout: Layout, style_suffix: str = "", prefix: str = "a photo of ") -> str:
    prompt = f"{prefix}{layout.caption}"
    if style_suffix:
        prompt = f"{prompt}, {style_suffix}"
    return prompt


def check_batch(batch: ImageBatch) -> ImageBatch:
    request = batch.request
    if len(batch.images) != request.batch_size:
        raise ProtocolError(
            f"{batch.backend_id} returned {len(batch.images)} images for a batch of {request.batch_size}"
        )
    frame = request.layout.image_frame
    expected = (frame.height, frame.width, 3)
    for index, image in enumerate(batch.images):
        if image.shape != expected or image.dtype != np.uint8:
            raise ProtocolError(
                f"{batch.backend_id} image {index} is {image.shape} {image.dtype}, expected {expected} uint8"
            )
    return batch


def encode_png(image: np.ndarray) -> str:
    buffer = io.BytesIO()
    Image.fromarray(image).save(buffer, format="PNG")
    return base64.b64encode(buffer.getvalue()).decode("ascii")


def decode_png(data: Union[str, bytes]) -> np.ndarray:
    raw = base64.b64decode(data) if isinstance(data, str) else data
    with Image.open(io.BytesIO(raw)) as image:
        return np.array(image.convert("RGB"), dtype=np.uint8)


def save_png(image: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image).save(path, format="PNG")
    return path


def load_image(path: Union[str, Path]) -> np.ndarray:
    return decode_png(Path(path).read_bytes())


# Mock renderer

@lru_cache(maxsize=1)
def _font():
    return ImageFont.load_default()


def _draw_glyph(canvas: Image.Image, rect: Rect, label: str) -> None:
    x0, y0, x1, y1 = rect
    # Drawn on a tile of the box so the glyph cannot leak outside it
    tile = canvas.crop(rect)
    draw = ImageDraw.Draw(tile)
    draw.fontmode = "1"
    draw.text((2, 1), label[:1].upper(), fill=GLYPH_COLOR, font=_font())
    canvas.paste(tile, (x0, y0))


def _disjoint(a: Rect, b: Rect) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _free_rect(frame: ImageFrame, occupied: Sequence[Rect], rng: random.Random, tries: int = 200) -> Optional[Rect]:
    side = max(4, min(frame.width, frame.height) // 8)
    for attempt in range(tries):
        if attempt and attempt % 50 == 0:
            side = max(2, side // 2)
        w = rng.randint(max(2, side // 2), side)
        h = rng.randint(max(2, side // 2), side)
        if w > frame.width or h > frame.height:
            continue
        x0 = rng.randint(0, frame.width - w)
        y0 = rng.randint(0, frame.height - h)
        rect = (x0, y0, x0 + w, y0 + h)
        if all(_disjoint(rect, other) for other in occupied):
            return rect
    return None


def render_layout(layout: Layout) -> Tuple[np.ndarray, List[Rect]]:
    """Neutral background with one solid patch (plus glyph) per box, in layout order."""
    frame = layout.image_frame
    canvas = Image.new("RGB", (frame.width, frame.height), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    rects = []
    for obj in layout.objects:
        rect = obj.bbox.pixel_bounds(frame)
        rects.append(rect)
        x0, y0, x1, y1 = rect
        if x1 <= x0 or y1 <= y0:
            continue
        draw.rectangle([x0, y0, x1 - 1, y1 - 1], fill=category_color(obj.category.name))
        if x1 - x0 >= MIN_GLYPH_SIZE and y1 - y0 >= MIN_GLYPH_SIZE:
            _draw_glyph(canvas, rect, obj.category.name)
    return np.array(canvas, dtype=np.uint8), rects


def inject_hallucination(
    image: np.ndarray, category: CategoryLabel, occupied: Sequence[Rect], rng: random.Random
) -> Optional[dict]:
    """Paint a patch of `category` outside every rectangle in `occupied`, in place."""
    height, width = image.shape[:2]
    rect = _free_rect(ImageFrame(width=width, height=height), occupied, rng)
    if rect is None:
        return None
    x0, y0, x1, y1 = rect
    image[y0:y1, x0:x1] = category_color(category.name)
    return {"category_id": category.id, "category": category.name, "bbox": [x0, y0, x1 - x0, y1 - y0]}


def mock_render(request: SynthesisRequest, hallucination_rate: float = 0.0) -> ImageBatch:
    if not 0.0 <= hallucination_rate <= 1.0:
        raise InvalidArgument(f"hallucination rate must lie in [0, 1], got {hallucination_rate}")
    base, rects = render_layout(request.layout)
    categories = request.layout.distinct_categories()

    images, metadata = [], []
    for index in range(request.batch_size):
        rng = random.Random(derive_seed(request.seed, "mock-lis", index))
        image = base.copy()
        hallucinations = []
        if categories and rng.random() < hallucination_rate:
            category = categories[rng.randrange(len(categories))]
            injected = inject_hallucination(image, category, rects, rng)
            if injected is None:
                logger.debug("no free area for a hallucination in sample %d", index)
            else:
                hallucinations.append(injected)
        images.append(image)
        metadata.append({"hallucinations": hallucinations})
    return ImageBatch(
        images=tuple(images),
        request=request,
        backend_id=f"mock-lis:{hallucination_rate}",
        metadata=tuple(metadata),
    )


class MockSynthesisBackend:
    deterministic = True

    def __init__(self, hallucination_rate: float = 0.3):
        self.hallucination_rate = hallucination_rate
        self.backend_id = f"mock-lis:{hallucination_rate}"
        self.calls = 0
        self._lock = threading.Lock()

    def synthesize(self, request: SynthesisRequest) -> ImageBatch:
        with self._lock:
            self.calls += 1
        return check_batch(mock_render(request, self.hallucination_rate))


def _batch_from_payload(data, request: SynthesisRequest, backend_id: str) -> ImageBatch:
    try:
        encoded = data["images"]
        images = tuple(decode_png(item) for item in encoded)
    except (KeyError, TypeError, ValueError, OSError) as err:
        raise ProtocolError(f"{backend_id} returned an unreadable image payload: {err}") from err
    metadata = data.get("metadata") or [{} for _ in images]
    return check_batch(
        ImageBatch(images=images, request=request, backend_id=backend_id, metadata=tuple(metadata))
    )


class HttpSynthesisBackend:
    """Client for a diffusion server exposing POST /synthesize (base64 PNG list response)."""

    deterministic = False

    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "AUGMENT_LIS_API_KEY",
        timeout: float = 600.0,
        max_attempts: int = 3,
        backoff: float = 2.0,
        client: Optional[httpx.Client] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.backend_id = f"http-lis:{self.endpoint}"
        self.max_attempts = max_attempts
        self.backoff = backoff
        self._headers = {}
        api_key = os.getenv(api_key_env)
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        self._client = client or httpx.Client(timeout=timeout)

    def synthesize(self, request: SynthesisRequest) -> ImageBatch:
        last_error: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                response = self._client.post(
                    f"{self.endpoint}/synthesize", json=request.payload(), headers=self._headers
                )
                if response.status_code == 429 or response.status_code >= 500:
                    raise BackendError(f"synthesis endpoint returned {response.status_code}")
                response.raise_for_status()
            except (httpx.TransportError, BackendError) as err:
                last_error = err
                logger.warning("synthesis attempt %d/%d failed: %s", attempt, self.max_attempts, err)
                if attempt < self.max_attempts:
                    time.sleep(self.backoff * attempt)
                continue
            except httpx.HTTPStatusError as err:
                raise BackendError(f"synthesis endpoint rejected the request: {err}") from err
            try:
                data = response.json()
            except ValueError as err:
                raise ProtocolError(f"synthesis endpoint did not return JSON: {response.text[:200]}") from err
            return _batch_from_payload(data, request, self.backend_id)
        raise BackendError(f"synthesis endpoint unavailable after {self.max_attempts} attempts: {last_error}")


class SubprocessSynthesisBackend:
    """Runs a local command per request: JSON request on stdin, JSON image list on stdout."""

    deterministic = False

    def __init__(self, command: Union[str, Sequence[str]], timeout: float = 600.0):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.command:
            raise InvalidArgument("subprocess backend needs a command")
        self.backend_id = f"subprocess-lis:{Path(self.command[0]).name}"
        self.timeout = timeout

    def synthesize(self, request: SynthesisRequest) -> ImageBatch:
        try:
            completed = subprocess.run(
                self.command,
                input=json.dumps(request.payload()),
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
        except (OSError, subprocess.TimeoutExpired) as err:
            raise BackendError(f"{self.backend_id} failed to run: {err}") from err
        if completed.returncode != 0:
            raise BackendError(
                f"{self.backend_id} exited with {completed.returncode}: {completed.stderr.strip()[:200]}"
            )
        try:
            data = json.loads(completed.stdout)
        except json.JSONDecodeError as err:
            raise ProtocolError(f"{self.backend_id} wrote invalid JSON: {err}") from err
        return _batch_from_payload(data, request, self.backend_id)
