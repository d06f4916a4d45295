from fastapi import APIRouter, Depends, File, Form, HTTPException, UploadFile, status
from functools import lru_cache
from typing import List
import json
import os
from pydantic import BaseModel, Field, ValidationError
from app.core.errors import AugmentError
from app.schemas.layout import BBox, CategoryLabel, ImageFrame, Layout, LayoutSource
from app.services.lacs import cs_crop, score_sample
from app.services.lis_backend import decode_png
from app.services.scorers import ImageTextScorer, make_scorer

router = APIRouter(prefix="/api/scores", tags=["scores"])


class LayoutBox(BaseModel):
    name: str
    bbox: List[float] = Field(min_length=4, max_length=4)
    category_id: int | None = None


class LayoutPayload(BaseModel):
    width: int
    height: int
    objects: List[LayoutBox]


class CategoryScoreResponse(BaseModel):
    name: str
    cs: float
    cs_mask: float
    delta: float


class ScoreResponse(BaseModel):
    sample_ref: str
    lacs: float
    cs_crop: float
    per_category: List[CategoryScoreResponse]


@lru_cache(maxsize=1)
def get_scorer() -> ImageTextScorer:
    return make_scorer(os.getenv("AUGMENT_SCORER", "mock"), os.getenv("AUGMENT_SCORER_DEVICE", "cpu"))


def to_layout(payload: LayoutPayload) -> Layout:
    ids = {}
    names_by_id = {}
    for box in payload.objects:
        if box.category_id is None:
            continue
        name = box.name.lower()
        if ids.setdefault(name, box.category_id) != box.category_id:
            raise ValueError(f"category {box.name!r} is given ids {ids[name]} and {box.category_id}")
        if names_by_id.setdefault(box.category_id, name) != name:
            other = names_by_id[box.category_id]
            raise ValueError(f"category id {box.category_id} is given to {other!r} and {box.name!r}")

    # Remaining categories take the lowest free ids, by sorted name
    next_id = 1
    for name in sorted({box.name.lower() for box in payload.objects} - set(ids)):
        while next_id in names_by_id:
            next_id += 1
        ids[name] = next_id
        names_by_id[next_id] = name

    objects = []
    for box in payload.objects:
        x, y, w, h = box.bbox
        objects.append((CategoryLabel(id=ids[box.name.lower()], name=box.name), BBox(x=x, y=y, w=w, h=h)))
    return Layout.from_objects(
        ImageFrame(width=payload.width, height=payload.height), objects, LayoutSource.GROUND_TRUTH
    )


@router.post("", response_model=ScoreResponse)
async def score_image(
    image: UploadFile = File(...),
    layout: str = Form(...),
    scorer: ImageTextScorer = Depends(get_scorer)
):
    # Parse the layout
    try:
        parsed = to_layout(LayoutPayload.model_validate(json.loads(layout)))
    except (json.JSONDecodeError, ValidationError, ValueError) as err:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Invalid layout: {err}"
        )

    # Decode the upload
    try:
        pixels = decode_png(await image.read())
    except OSError:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail="Uploaded file is not a readable image"
        )
    frame = parsed.image_frame
    if pixels.shape[:2] != (frame.height, frame.width):
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=f"Image is {pixels.shape[1]}x{pixels.shape[0]} but the layout is {frame.width}x{frame.height}"
        )

    try:
        score = score_sample(scorer, pixels, parsed, sample_ref=image.filename or "upload")
        crop = cs_crop(scorer, pixels, parsed)
    except AugmentError as err:
        raise HTTPException(
            status_code=status.HTTP_400_BAD_REQUEST,
            detail=str(err)
        )

    return ScoreResponse(
        sample_ref=score.sample_ref,
        lacs=score.lacs,
        cs_crop=crop,
        per_category=[CategoryScoreResponse(**c.report()) for c in score.per_category],
    )
