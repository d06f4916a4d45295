from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.schemas.layout import CategoryLabel


class CategoryScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    category: CategoryLabel
    cs: float = Field(ge=0.0, le=1.0)
    cs_mask: float = Field(ge=0.0, le=1.0)
    delta: float = Field(ge=-1.0, le=1.0)

    @model_validator(mode="after")
    def delta_is_difference(self):
        if self.delta != self.cs - self.cs_mask:
            raise ValueError(f"delta {self.delta} != cs - cs_mask ({self.cs} - {self.cs_mask})")
        return self

    @classmethod
    def from_scores(cls, category: CategoryLabel, cs: float, cs_mask: float) -> "CategoryScore":
        return cls(category=category, cs=cs, cs_mask=cs_mask, delta=cs - cs_mask)

    def report(self) -> dict:
        return {"name": self.category.name, "cs": self.cs, "cs_mask": self.cs_mask, "delta": self.delta}


class SampleScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    sample_ref: str
    per_category: Tuple[CategoryScore, ...] = Field(min_length=1)
    lacs: float = Field(ge=-1.0, le=1.0)

    @model_validator(mode="after")
    def lacs_is_mean(self):
        mean = sum(c.delta for c in self.per_category) / len(self.per_category)
        if abs(self.lacs - mean) > 1e-12:
            raise ValueError(f"lacs {self.lacs} is not the mean of the category deltas ({mean})")
        return self


class GeneratedSample(BaseModel):
    """One scored image of a synthesis batch, as committed by the pipeline."""

    model_config = ConfigDict(frozen=True)

    layout_id: str
    sample_index: int
    file_name: str
    score: SampleScore
    cs_crop: Optional[float] = None
    picked: bool = False

    @property
    def sample_ref(self) -> str:
        return self.score.sample_ref

    def report(self) -> dict:
        return {
            "sample_ref": self.sample_ref,
            "layout_id": self.layout_id,
            "per_category": [c.report() for c in self.score.per_category],
            "lacs": self.score.lacs,
            "cs_crop": self.cs_crop,
            "picked": self.picked,
        }
