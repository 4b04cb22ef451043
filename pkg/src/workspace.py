"""Canonical-frame artifacts of a corpus: images, masks, overlaps and rendered grids.

A :class:`PreparedCorpus` computes each artifact once and shares it between threads; it
is what query backends and the scorer use to look at a task.
"""

import logging
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

from canvas import (
    DEFAULT_CANVAS_SIDE,
    CanonicalImage,
    GridSpec,
    GridStyle,
    preprocess,
    render_grid,
    transform_mask,
)
from corpus import AnnotationSet, LocalizationTask, Pathology
from hashing import digest_bytes, digest_file
from masks import BinaryMask
from scorer import DEFAULT_THRESHOLD, OverlapGrid, overlap_fractions

logger = logging.getLogger(__name__)

PREPARED_DIR = "prepared"


class WorkspaceError(Exception):
    """Raised if a prepared artifact is missing or inconsistent."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


def safe_name(text: str) -> str:
    """File-name form of an identifier."""
    return re.sub(r"[^A-Za-z0-9._\-]", "_", text)


@dataclass(frozen=True)
class PrepareSummary:
    """Counts from a prepare pass."""

    written: int
    unchanged: int

    @property
    def total(self) -> int:
        """Images handled."""
        return self.written + self.unchanged


class PreparedCorpus:
    """Lazily computed, cached canonical views of an AnnotationSet."""

    def __init__(
        self,
        annotations: AnnotationSet,
        output_dir: Union[str, Path],
        canvas_side: int = DEFAULT_CANVAS_SIDE,
        style: GridStyle = GridStyle(),
        threshold: float = DEFAULT_THRESHOLD,
    ):
        self.annotations = annotations
        self.output_dir = Path(output_dir)
        self.canvas_side = canvas_side
        self.style = style
        self.threshold = threshold
        self._lock = threading.RLock()
        self._images: Dict[str, CanonicalImage] = {}
        self._masks: Dict[Tuple[str, Pathology], BinaryMask] = {}
        self._overlaps: Dict[Tuple[str, Pathology, str], OverlapGrid] = {}
        self._rendered: Dict[Tuple[str, str], bytes] = {}

    def canonical_image(self, image_id: str) -> CanonicalImage:
        """Canonical image, loaded once."""
        with self._lock:
            if image_id not in self._images:
                record = self.annotations.record(image_id)
                self._images[image_id] = preprocess(record.image_path, self.canvas_side)
            return self._images[image_id]

    def canonical_mask(self, image_id: str, pathology: Pathology) -> BinaryMask:
        """Canonical mask, loaded once."""
        with self._lock:
            key = (image_id, pathology)
            if key not in self._masks:
                record = self.annotations.record(image_id)
                self._masks[key] = transform_mask(
                    self.annotations.mask(image_id, pathology),
                    self.canvas_side,
                    record.native_size,
                )
            return self._masks[key]

    def overlap_grid(self, task: LocalizationTask) -> OverlapGrid:
        """Overlap grid, computed once."""
        self._check_grid(task.grid)
        with self._lock:
            key = (task.image_id, task.pathology, task.grid.name)
            if key not in self._overlaps:
                mask = self.canonical_mask(task.image_id, task.pathology)
                self._overlaps[key] = overlap_fractions(mask, task.grid, self.threshold)
            return self._overlaps[key]

    def rendered_path(self, spec: GridSpec, image_id: str) -> Path:
        """Where the rendered overlay is written."""
        return self.output_dir / PREPARED_DIR / spec.name / f"{safe_name(image_id)}.png"

    def render(self, spec: GridSpec, image_id: str) -> bytes:
        """Gridded PNG of an image; one per (image, grid) whatever the pathology."""
        self._check_grid(spec)
        with self._lock:
            key = (spec.name, image_id)
            if key not in self._rendered:
                self._rendered[key] = render_grid(self.canonical_image(image_id), spec, self.style)
            return self._rendered[key]

    def rendered_image(self, task: LocalizationTask) -> bytes:
        """Bytes of the prepared file when present, else a fresh rendering."""
        path = self.rendered_path(task.grid, task.image_id)
        if path.exists():
            return path.read_bytes()
        return self.render(task.grid, task.image_id)

    def usable_tasks(self, tasks: Sequence[LocalizationTask]) -> List[LocalizationTask]:
        """Drop tasks whose mask vanishes in the canonical frame."""
        usable = []
        for task in tasks:
            if self.canonical_mask(task.image_id, task.pathology).is_empty():
                logger.warning(
                    f"Skipping {task.image_id}/{task.pathology.value}: "
                    "mask is empty after cropping to the canonical frame"
                )
                continue
            usable.append(task)
        return usable

    def prepare(self, grids: Iterable[GridSpec], image_ids: Iterable[str]) -> PrepareSummary:
        """Write one rendered file per (image, grid), leaving identical files untouched."""
        written = unchanged = 0
        ids = sorted(set(image_ids))
        for spec in grids:
            for image_id in ids:
                data = self.render(spec, image_id)
                path = self.rendered_path(spec, image_id)
                if path.exists() and digest_file(path) == digest_bytes(data):
                    unchanged += 1
                    continue
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_bytes(data)
                written += 1
        logger.info(f"Prepared {written + unchanged} gridded images, {written} written")
        return PrepareSummary(written, unchanged)

    def _check_grid(self, spec: GridSpec) -> None:
        if spec.canvas_side != self.canvas_side:
            raise WorkspaceError(
                f"Grid {spec.name} is for a {spec.canvas_side}px canvas, "
                f"the corpus was prepared at {self.canvas_side}px"
            )
