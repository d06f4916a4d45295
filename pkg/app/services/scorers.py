"""Image-text scorers returning CLIP-style similarity logits."""
import logging
import threading
from typing import List, Protocol, Sequence, runtime_checkable

import numpy as np

from app.core.errors import ConfigError, ScoringError
from app.services.lis_backend import category_color

logger = logging.getLogger(__name__)

BACKGROUND_TEXT = "background"
WHITE_SPACE_TEXT = "white space"


@runtime_checkable
class ImageTextScorer(Protocol):
    scorer_id: str
    # False means callers must not score concurrently
    thread_safe: bool

    def logits(self, image: np.ndarray, texts: Sequence[str]) -> List[float]:
        ...


class MockScorer:
    """Rule-based scorer for images painted by the mock renderer.

    A category text scores beta when any pixel has that category's color and 0
    otherwise. "background" scores beta / 4 and "white space" scores
    beta * (0.3 + 0.4 * f), f being the fraction of pure white pixels.

    The white-space logit stays closer to beta / 2 than the background logit,
    so a category patch appearing outside its boxes always raises cs_mask by
    more than it can raise cs.
    """

    scorer_id = "mock"
    thread_safe = True

    def __init__(self, beta: float = 10.0):
        self.beta = beta

    def _present(self, pixels: np.ndarray, color) -> bool:
        if pixels.size == 0:
            return False
        return bool(np.all(pixels == np.asarray(color, dtype=np.uint8), axis=1).any())

    def _white_fraction(self, pixels: np.ndarray) -> float:
        if pixels.size == 0:
            return 0.0
        return float(np.all(pixels == 255, axis=1).mean())

    def logits(self, image: np.ndarray, texts: Sequence[str]) -> List[float]:
        pixels = np.asarray(image).reshape(-1, 3)
        out = []
        for text in texts:
            text = text.strip().lower()
            if text == BACKGROUND_TEXT:
                out.append(0.25 * self.beta)
            elif text == WHITE_SPACE_TEXT:
                out.append(self.beta * (0.3 + 0.4 * self._white_fraction(pixels)))
            else:
                out.append(self.beta if self._present(pixels, category_color(text)) else 0.0)
        return out


class ClipScorer:
    """CLIP-family model from transformers; `logits_per_image` are scaled cosine similarities."""

    thread_safe = False

    def __init__(self, model_id: str, device: str = "cpu"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as err:
            raise ConfigError(
                "the CLIP scorer needs torch and transformers (pip install -r requirements-clip.txt)"
            ) from err
        self._torch = torch
        self.scorer_id = f"clip:{model_id}"
        self.device = device
        self.model = CLIPModel.from_pretrained(model_id).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(model_id)
        self._lock = threading.Lock()
        logger.info("loaded CLIP scorer %s on %s", model_id, device)

    def logits(self, image: np.ndarray, texts: Sequence[str]) -> List[float]:
        inputs = self.processor(text=list(texts), images=np.asarray(image), return_tensors="pt", padding=True)
        inputs = {k: v.to(self.device) for k, v in inputs.items()}
        with self._lock, self._torch.no_grad():
            try:
                output = self.model(**inputs)
            except RuntimeError as err:
                raise ScoringError(f"CLIP forward pass failed: {err}") from err
        return output.logits_per_image[0].tolist()


def make_scorer(model_id: str = "mock", device: str = "cpu") -> ImageTextScorer:
    if model_id == "mock":
        return MockScorer()
    return ClipScorer(model_id, device=device)
