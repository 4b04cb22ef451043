"""Generator of small synthetic corpora in the synthetic index format.

Each image is a grayscale chest-like stand-in of random native size; each requested
pathology gets one elliptical mask inside a pathology-specific region of the canonical
frame. A plausibility atlas covering every region is written alongside.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union

import numpy as np
import yaml
from PIL import Image, ImageDraw

from canvas import DEFAULT_CANVAS_SIDE, CropGeometry
from corpus import Pathology
from stats import rng_for

logger = logging.getLogger(__name__)

INDEX_NAME = "index.yaml"
INDEX_SCHEMA = "synthetic-index/v1"
NATIVE_SIDE_RANGE = (300, 420)
# canonical-frame blob radii, in pixels of a 256px canvas
RADIUS_RANGE = (12, 30)

# (left, top, right, bottom) fractions of the canonical frame
REGIONS: Dict[Pathology, Tuple[float, float, float, float]] = {
    Pathology.ATELECTASIS: (0.15, 0.55, 0.85, 0.85),
    Pathology.CARDIOMEGALY: (0.35, 0.45, 0.75, 0.80),
    Pathology.CONSOLIDATION: (0.15, 0.30, 0.85, 0.80),
    Pathology.EDEMA: (0.20, 0.25, 0.80, 0.75),
    Pathology.ENLARGED_CARDIOMEDIASTINUM: (0.38, 0.20, 0.62, 0.70),
    Pathology.LUNG_LESION: (0.15, 0.15, 0.85, 0.75),
    Pathology.LUNG_OPACITY: (0.15, 0.20, 0.85, 0.80),
    Pathology.PLEURAL_EFFUSION: (0.10, 0.65, 0.90, 0.90),
    Pathology.PNEUMOTHORAX: (0.10, 0.08, 0.90, 0.45),
}


@dataclass(frozen=True)
class SyntheticCorpus:
    """Paths of a generated corpus."""

    index_path: Path
    atlas_dir: Path
    n_images: int
    n_masks: int


def _scale(canvas_side: int) -> float:
    return canvas_side / DEFAULT_CANVAS_SIDE


def _blob(
    pathology: Pathology, geometry: CropGeometry, rng: np.random.Generator
) -> Tuple[float, float, float, float]:
    """Native-frame bounding box of one elliptical lesion."""
    left, top, right, bottom = REGIONS[pathology]
    side = geometry.canvas_side
    cx = rng.uniform(left, right) * side
    cy = rng.uniform(top, bottom) * side
    rx, ry = rng.uniform(*RADIUS_RANGE, size=2) * _scale(side)
    native = geometry.crop_side / side
    return (
        geometry.left + (cx - rx) * native,
        geometry.top + (cy - ry) * native,
        geometry.left + (cx + rx) * native,
        geometry.top + (cy + ry) * native,
    )


def _radiograph(width: int, height: int, rng: np.random.Generator) -> Image.Image:
    """Dark field with two bright lung-like ellipses and mild noise."""
    image = Image.new("L", (width, height), 20)
    draw = ImageDraw.Draw(image)
    crop = min(width, height)
    left, top = (width - crop) // 2, (height - crop) // 2
    for x0, x1 in ((0.12, 0.46), (0.54, 0.88)):
        draw.ellipse(
            (left + x0 * crop, top + 0.12 * crop, left + x1 * crop, top + 0.88 * crop), fill=90
        )
    draw.ellipse((left + 0.4 * crop, top + 0.45 * crop, left + 0.7 * crop, top + 0.8 * crop), 150)
    pixels = np.asarray(image, dtype=np.int16) + rng.integers(-8, 9, size=(height, width))
    return Image.fromarray(np.clip(pixels, 0, 255).astype(np.uint8))


def write_atlas(atlas_dir: Union[str, Path], canvas_side: int = DEFAULT_CANVAS_SIDE) -> Path:
    """One canonical-frame PNG per pathology: its region grown by the largest blob radius."""
    atlas_dir = Path(atlas_dir)
    atlas_dir.mkdir(parents=True, exist_ok=True)
    margin = RADIUS_RANGE[1] * _scale(canvas_side)
    for pathology, (left, top, right, bottom) in REGIONS.items():
        region = Image.new("L", (canvas_side, canvas_side), 0)
        ImageDraw.Draw(region).rectangle(
            (
                max(0.0, left * canvas_side - margin),
                max(0.0, top * canvas_side - margin),
                min(canvas_side - 1.0, right * canvas_side + margin),
                min(canvas_side - 1.0, bottom * canvas_side + margin),
            ),
            fill=255,
        )
        region.save(atlas_dir / f"{pathology.value}.png", format="PNG", compress_level=6)
    return atlas_dir


def generate_corpus(
    root: Union[str, Path],
    n_images: int,
    seed: int = 0,
    pathologies: Optional[Iterable[Pathology]] = None,
    lateral_share: float = 0.0,
    validation_share: float = 0.0,
    canvas_side: int = DEFAULT_CANVAS_SIDE,
) -> SyntheticCorpus:
    """Write images, masks, index and atlas under ``root``.

    Every image carries a mask for each requested pathology. Output depends only on the
    arguments, so regenerating yields identical files.
    """
    if n_images < 1:
        raise ValueError(f"n_images must be positive, got {n_images}")
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    chosen = sorted(pathologies if pathologies is not None else Pathology, key=lambda p: p.value)

    entries = []
    n_masks = 0
    for index in range(n_images):
        rng = rng_for(seed, "synthetic", index)
        width, height = (int(v) for v in rng.integers(*NATIVE_SIDE_RANGE, size=2, endpoint=True))
        geometry = CropGeometry(width, height, canvas_side)
        image_id = f"synth{index:05d}"
        lateral = rng.random() < lateral_share
        view = "Lateral" if lateral else ("AP" if rng.random() < 0.5 else "PA")
        split = "validation" if rng.random() < validation_share else "test"

        _radiograph(width, height, rng).save(
            root / "images" / f"{image_id}.png", format="PNG", compress_level=6
        )
        masks = {}
        for pathology in chosen:
            mask = Image.new("L", (width, height), 0)
            ImageDraw.Draw(mask).ellipse(_blob(pathology, geometry, rng), fill=255)
            rel = f"masks/{image_id}_{pathology.value}.png"
            mask.save(root / rel, format="PNG", compress_level=6)
            masks[pathology.value] = rel
            n_masks += 1
        entries.append(
            {
                "image_id": image_id,
                "patient_id": f"patient{index // 2:05d}",
                "split": split,
                "view": view,
                "path": f"images/{image_id}.png",
                "masks": masks,
            }
        )

    index_path = root / INDEX_NAME
    with open(index_path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"schema": INDEX_SCHEMA, "images": entries}, f, sort_keys=True)
    atlas_dir = write_atlas(root / "atlas", canvas_side)
    logger.info(f"Generated {n_images} synthetic images with {n_masks} masks under '{root}'")
    return SyntheticCorpus(index_path, atlas_dir, n_images, n_masks)
