import json
import logging
import math
import re
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from matplotlib import colormaps
from PIL import Image

from app.core.errors import InvalidArgument
from app.schemas.layout import BBox, CategoryLabel, ImageFrame, Layout

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = (64, 64)
COLORMAP = "hot"
PNG_SCALE = 4


def box_cells(box: BBox, frame: ImageFrame, resolution: Tuple[int, int]) -> Tuple[int, int, int, int]:
    """Half-open cell range (x0, x1, y0, y1) a box covers once rescaled to the grid; at least one cell."""
    grid_w, grid_h = resolution
    x0 = min(max(math.floor(box.x * grid_w / frame.width), 0), grid_w - 1)
    y0 = min(max(math.floor(box.y * grid_h / frame.height), 0), grid_h - 1)
    x1 = min(max(x0 + 1, math.ceil((box.x + box.w) * grid_w / frame.width)), grid_w)
    y1 = min(max(y0 + 1, math.ceil((box.y + box.h) * grid_h / frame.height)), grid_h)
    return x0, x1, y0, y1


def heatmap(
    layouts: Sequence[Layout], category: CategoryLabel, resolution: Tuple[int, int] = DEFAULT_RESOLUTION
) -> np.ndarray:
    """Count grid of shape (grid_h, grid_w): boxes of `category` covering each cell."""
    grid_w, grid_h = resolution
    if grid_w <= 0 or grid_h <= 0:
        raise InvalidArgument(f"heatmap resolution must be positive, got {resolution}")
    grid = np.zeros((grid_h, grid_w), dtype=np.int64)
    for layout in layouts:
        for box in layout.boxes_of(category):
            x0, x1, y0, y1 = box_cells(box, layout.image_frame, resolution)
            grid[y0:y1, x0:x1] += 1
    return grid


def render_heatmap(grid: np.ndarray, scale: int = PNG_SCALE) -> Image.Image:
    peak = grid.max() if grid.size else 0
    normalized = grid / peak if peak > 0 else np.zeros_like(grid, dtype=float)
    rgba = colormaps[COLORMAP](normalized, bytes=True)
    image = Image.fromarray(np.ascontiguousarray(rgba[..., :3]))
    return image.resize((grid.shape[1] * scale, grid.shape[0] * scale), Image.Resampling.NEAREST)


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def write_heatmap(
    grid: np.ndarray, category: CategoryLabel, out_dir: Union[str, Path], label: str
) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{label}_{category.id}_{_slug(category.name)}"
    png_path = out_dir / f"{stem}.png"
    json_path = out_dir / f"{stem}.json"
    render_heatmap(grid).save(png_path, format="PNG")
    json_path.write_text(
        json.dumps(
            {
                "category": {"id": category.id, "name": category.name},
                "source": label,
                "resolution": [grid.shape[1], grid.shape[0]],
                "grid": grid.tolist(),
            }
        ),
        encoding="utf-8",
    )
    return png_path, json_path


def write_heatmaps(
    layouts: Sequence[Layout],
    categories: Sequence[CategoryLabel],
    out_dir: Union[str, Path],
    label: str,
    resolution: Tuple[int, int] = DEFAULT_RESOLUTION,
) -> Dict[str, Tuple[Path, Path]]:
    written = {}
    for category in categories:
        written[category.name] = write_heatmap(heatmap(layouts, category, resolution), category, out_dir, label)
    logger.info("wrote %d %s heatmaps to %s", len(written), label, out_dir)
    return written
