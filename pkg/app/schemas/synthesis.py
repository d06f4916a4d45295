from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.layout import Layout


class SynthesisRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    layout: Layout
    prompt: str
    batch_size: int = Field(default=5, ge=1)
    steps: int = Field(default=50, ge=1)
    guidance_scale: float = 7.5
    grounding_alpha: float = Field(default=0.8, ge=0.0, le=1.0)
    mis_fraction: float = Field(default=0.36, ge=0.0, le=1.0)
    seed: int = 0
    # Optional base64 PNG mask per layout box
    masks: Optional[Tuple[str, ...]] = None

    @model_validator(mode="after")
    def one_mask_per_box(self):
        if self.masks is not None and len(self.masks) != len(self.layout.objects):
            raise ValueError(f"{len(self.masks)} masks for {len(self.layout.objects)} boxes")
        return self

    def payload(self) -> dict:
        frame = self.layout.image_frame
        body = {
            "prompt": self.prompt,
            "boxes": [{"name": o.category.name, "bbox": o.bbox.as_list()} for o in self.layout.objects],
            "width": frame.width,
            "height": frame.height,
            "batch": self.batch_size,
            "steps": self.steps,
            "guidance": self.guidance_scale,
            "grounding_alpha": self.grounding_alpha,
            "mis": self.mis_fraction,
            "seed": self.seed,
        }
        if self.masks is not None:
            body["masks"] = list(self.masks)
        return body


class ImageBatch(BaseModel):
    """Images are read-only uint8 arrays of shape (height, width, 3)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    images: Tuple[np.ndarray, ...]
    request: SynthesisRequest
    backend_id: str
    # Per-image extras reported by the backend (the mock lists injected hallucinations)
    metadata: Tuple[dict, ...] = ()

    @field_validator("images")
    @classmethod
    def read_only(cls, images):
        for image in images:
            image.flags.writeable = False
        return images
