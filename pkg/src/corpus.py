"""Ingestion of annotated radiograph corpora.

Two input formats are accepted:

* a JSON manifest following the published localization-corpus convention, where each
  image id maps pathology names to run-length encoded masks (integer column-major counts
  or COCO compressed strings), optionally wrapped with an ``images`` metadata block;
* a synthetic index (YAML or JSON) listing image paths, view, split and one PNG mask per
  pathology, used for desk-scale tests.

Both produce an immutable :class:`AnnotationSet`.
"""

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError
from pycocotools import mask as coco_mask

from canvas import GridSpec
from hashing import digest_file
from masks import BinaryMask, RleChecksumError, RleMask, decode_rle, encode_rle

logger = logging.getLogger(__name__)

__all__ = [
    "AnnotationSet",
    "BinaryMask",
    "LocalizationTask",
    "Pathology",
    "RadiographRecord",
    "RleMask",
    "Split",
    "ViewKind",
    "ViewPosition",
    "decode_rle",
    "describe_corpus",
    "encode_rle",
    "load_corpus",
    "load_manifest",
    "load_synthetic_index",
    "select_tasks",
]

EXCLUDED_FINDINGS = {"supportdevices"}

_CHEXPERT_ID_RE = re.compile(
    r"^(?P<patient>patient\d+)_(?P<study>study\d+)_(?P<view>view\d+)_(?P<kind>frontal|lateral)$"
)


class CorpusError(Exception):
    """Base class for corpus errors."""

    def __init__(self, message: str):
        self.message = message
        super().__init__(self.message)


class ManifestError(CorpusError):
    """Raised if a manifest or index document is malformed."""


class MaskChecksumError(CorpusError):
    """Raised if a mask's run lengths do not cover its image."""

    def __init__(self, image_id: str, pathology: str, cause: RleChecksumError):
        self.image_id = image_id
        self.pathology = pathology
        super().__init__(f"Mask ({image_id}, {pathology}): {cause.message}")


class MissingImageError(CorpusError):
    """Raised if a referenced image file does not exist."""


class MaskDimensionError(CorpusError):
    """Raised if a mask and its image disagree on dimensions."""


class DuplicateEntryError(ManifestError):
    """Raised if an (image, pathology) pair or image id appears twice."""


class Pathology(str, Enum):
    """The nine localized findings."""

    ATELECTASIS = "Atelectasis"
    CARDIOMEGALY = "Cardiomegaly"
    CONSOLIDATION = "Consolidation"
    EDEMA = "Edema"
    ENLARGED_CARDIOMEDIASTINUM = "EnlargedCardiomediastinum"
    LUNG_LESION = "LungLesion"
    LUNG_OPACITY = "LungOpacity"
    PLEURAL_EFFUSION = "PleuralEffusion"
    PNEUMOTHORAX = "Pneumothorax"

    @property
    def display_name(self) -> str:
        """Human-readable name, e.g. 'Pleural Effusion'."""
        return re.sub(r"(?<=[a-z])(?=[A-Z])", " ", self.value)

    @classmethod
    def from_name(cls, name: Union[str, "Pathology"]) -> Optional["Pathology"]:
        """Resolve 'Pleural Effusion', 'pleural_effusion', 'PleuralEffusion'; None if unknown."""
        if isinstance(name, Pathology):
            return name
        key = re.sub(r"[\s_\-]", "", str(name)).lower()
        for member in cls:
            if member.value.lower() == key:
                return member
        return None


class Split(str, Enum):
    """Dataset split a radiograph belongs to."""

    VALIDATION = "validation"
    TEST = "test"

    @classmethod
    def parse(cls, value: Union[str, "Split"]) -> "Split":
        """Accept a member or a case-insensitive name; 'val' and 'valid' mean validation."""
        if isinstance(value, Split):
            return value
        text = str(value).strip().lower()
        if text in ("val", "valid"):
            text = "validation"
        try:
            return cls(text)
        except ValueError:
            raise ManifestError(f"Unknown split '{value}', expected validation or test")


class ViewKind(str, Enum):
    """Coarse view class used for filtering and frontal-only analyses."""

    FRONTAL = "Frontal"
    LATERAL = "Lateral"


@dataclass(frozen=True)
class ViewPosition:
    """Frontal (AP, PA or unknown subtype) or lateral."""

    kind: ViewKind
    subtype: Optional[str] = None

    @classmethod
    def parse(cls, value: Union[str, "ViewPosition"]) -> "ViewPosition":
        """Map AP, PA, FRONTAL and LATERAL spellings to a view position."""
        if isinstance(value, ViewPosition):
            return value
        text = str(value).strip().upper()
        if text in ("AP", "PA"):
            return cls(ViewKind.FRONTAL, text)
        if text == "FRONTAL":
            return cls(ViewKind.FRONTAL, "unknown")
        if text in ("LATERAL", "LL", "LAT"):
            return cls(ViewKind.LATERAL)
        raise ManifestError(f"Unknown view position '{value}'")

    @property
    def is_frontal(self) -> bool:
        """Whether the view is frontal."""
        return self.kind is ViewKind.FRONTAL

    @property
    def word(self) -> str:
        """The view word used in prompts: 'frontal' or 'lateral'."""
        return self.kind.value.lower()

    def __str__(self) -> str:
        """Short view label."""
        if self.is_frontal and self.subtype in ("AP", "PA"):
            return self.subtype
        return self.kind.value


@dataclass(frozen=True)
class RadiographRecord:
    """One radiograph of the corpus with its native pixel size."""

    image_id: str
    patient_id: str
    split: Split
    view: ViewPosition
    image_path: Path
    native_width: int
    native_height: int

    @property
    def native_size(self) -> Tuple[int, int]:
        """Width and height of the source image."""
        return self.native_width, self.native_height


@dataclass(frozen=True)
class LocalizationTask:
    """One (image, pathology) query on one grid."""

    image_id: str
    pathology: Pathology
    view: ViewPosition
    grid: GridSpec = GridSpec()

    @property
    def key(self) -> Tuple[str, str, str]:
        """Identity of the task."""
        return self.image_id, self.pathology.value, self.grid.name


class AnnotationSet:
    """Records plus their (image_id, Pathology) masks; immutable after construction."""

    def __init__(
        self,
        records: Iterable[RadiographRecord],
        masks: Mapping[Tuple[str, Pathology], BinaryMask],
        source_digest: Optional[str] = None,
    ):
        ordered = sorted(records, key=lambda r: r.image_id)
        by_id: Dict[str, RadiographRecord] = {}
        for record in ordered:
            if record.image_id in by_id:
                raise DuplicateEntryError(f"Image id '{record.image_id}' appears twice")
            if record.native_width < 1 or record.native_height < 1:
                raise ManifestError(f"Image '{record.image_id}' has non-positive dimensions")
            by_id[record.image_id] = record
        for (image_id, pathology), mask in masks.items():
            if image_id not in by_id:
                raise ManifestError(f"Mask ({image_id}, {pathology.value}) has no image record")
            if mask.size != by_id[image_id].native_size:
                raise MaskDimensionError(
                    f"Mask ({image_id}, {pathology.value}) is {mask.width}x{mask.height}, "
                    f"image is {by_id[image_id].native_width}x{by_id[image_id].native_height}"
                )
        self._records = tuple(ordered)
        self._by_id = MappingProxyType(by_id)
        self._masks = MappingProxyType(
            {key: masks[key] for key in sorted(masks, key=lambda k: (k[0], k[1].value))}
        )
        self.source_digest = source_digest

    @property
    def records(self) -> Tuple[RadiographRecord, ...]:
        """Records in index order."""
        return self._records

    @property
    def masks(self) -> Mapping[Tuple[str, Pathology], BinaryMask]:
        """Masks keyed by image id and pathology."""
        return self._masks

    def record(self, image_id: str) -> RadiographRecord:
        """Record for ``image_id``."""
        try:
            return self._by_id[image_id]
        except KeyError:
            raise CorpusError(f"No image '{image_id}' in corpus")

    def mask(self, image_id: str, pathology: Pathology) -> BinaryMask:
        """Mask for one image and pathology."""
        try:
            return self._masks[(image_id, pathology)]
        except KeyError:
            raise CorpusError(f"No {pathology.value} mask for image '{image_id}'")

    def __len__(self) -> int:
        """Number of records."""
        return len(self._records)

    def __eq__(self, other) -> bool:
        """Compare records and masks."""
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return self._records == other._records and dict(self._masks) == dict(other._masks)


def _reject_duplicate_keys(pairs: List[Tuple[str, Any]]) -> Dict[str, Any]:
    seen: Dict[str, Any] = {}
    for key, value in pairs:
        if key in seen:
            raise DuplicateEntryError(f"Key '{key}' appears twice in the same object")
        seen[key] = value
    return seen


def _read_json(path: Path) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f, object_pairs_hook=_reject_duplicate_keys)
    except json.JSONDecodeError as e:
        raise ManifestError(f"Malformed manifest '{path}': {e}")
    except OSError as e:
        raise ManifestError(f"Failed to read manifest '{path}': {e}")


def _image_size(path: Path) -> Tuple[int, int]:
    if not path.is_file():
        raise MissingImageError(f"Image file '{path}' does not exist")
    try:
        with Image.open(path) as image:
            return image.size
    except (OSError, UnidentifiedImageError) as e:
        raise ManifestError(f"Failed to read image '{path}': {e}")


def _decode_entry(image_id: str, name: str, entry: Any) -> BinaryMask:
    """Decode one manifest mask entry {size: [h, w], counts: ...}."""
    if not isinstance(entry, dict) or "counts" not in entry:
        raise ManifestError(f"Mask ({image_id}, {name}) has no 'counts'")
    size = entry.get("size", entry.get("img_size"))
    if not isinstance(size, (list, tuple)) or len(size) != 2:
        raise ManifestError(f"Mask ({image_id}, {name}) has no [height, width] 'size'")
    height, width = int(size[0]), int(size[1])
    counts = entry["counts"]
    if isinstance(counts, str):
        rle = {"size": [height, width], "counts": counts.encode("ascii")}
        return BinaryMask(coco_mask.decode(rle).astype(bool))
    if not isinstance(counts, list) or not all(isinstance(c, int) for c in counts):
        raise ManifestError(f"Mask ({image_id}, {name}) counts must be integers or a string")
    try:
        return decode_rle(RleMask(counts=tuple(counts), width=width, height=height))
    except RleChecksumError as e:
        raise MaskChecksumError(image_id, name, e)


def _describe_image(image_id: str, meta: Dict[str, Any], default_split: Optional[str]):
    """Patient, split, view and relative path from metadata or a CheXpert-style id."""
    match = _CHEXPERT_ID_RE.match(image_id)
    patient_id = meta.get("patient_id") or (match.group("patient") if match else image_id)
    view_text = meta.get("view") or (match.group("kind") if match else None)
    if view_text is None:
        raise ManifestError(f"Image '{image_id}' has no view position")
    split_text = meta.get("split") or default_split
    if split_text is None:
        raise ManifestError(f"Image '{image_id}' has no split and no default split was given")
    path = meta.get("path")
    if path is None:
        if not match:
            raise ManifestError(f"Image '{image_id}' has no path")
        path = "{}/{}/{}_{}.jpg".format(*match.group("patient", "study", "view", "kind"))
    return str(patient_id), Split.parse(split_text), ViewPosition.parse(view_text), path


def load_manifest(
    manifest_path: Union[str, Path],
    images_root: Union[str, Path],
    default_split: Optional[str] = None,
) -> AnnotationSet:
    """Load a JSON+RLE manifest.

    Args:
        manifest_path: ``{"images": {id: meta}, "masks": {id: {pathology: rle}}}`` or the
            bare ``{id: {pathology: rle}}`` form of the published annotation files.
        images_root: directory the image paths are relative to.
        default_split: split for images whose metadata does not name one.

    Returns:
        The validated annotation set.
    """
    manifest_path = Path(manifest_path)
    images_root = Path(images_root)
    document = _read_json(manifest_path)
    if not isinstance(document, dict):
        raise ManifestError(f"Manifest '{manifest_path}' must be a JSON object")
    if "masks" in document:
        images_meta = document.get("images", {})
        mask_block = document["masks"]
    else:
        images_meta = {}
        mask_block = {k: v for k, v in document.items() if k != "schema"}
    if not isinstance(mask_block, dict) or not isinstance(images_meta, dict):
        raise ManifestError(f"Manifest '{manifest_path}' has a malformed masks/images block")

    records: List[RadiographRecord] = []
    masks: Dict[Tuple[str, Pathology], BinaryMask] = {}
    for image_id in sorted(set(mask_block) | set(images_meta)):
        meta = images_meta.get(image_id, {})
        patient_id, split, view, rel_path = _describe_image(image_id, meta, default_split)
        image_path = images_root / rel_path
        width, height = _image_size(image_path)
        for name, entry in sorted(mask_block.get(image_id, {}).items()):
            key = re.sub(r"[\s_\-]", "", name).lower()
            if key in EXCLUDED_FINDINGS:
                logger.warning(f"Skipping '{name}' mask of '{image_id}': not a pathology")
                continue
            pathology = Pathology.from_name(name)
            if pathology is None:
                logger.warning(f"Skipping unknown pathology '{name}' on '{image_id}'")
                continue
            if (image_id, pathology) in masks:
                raise DuplicateEntryError(f"Mask ({image_id}, {pathology.value}) appears twice")
            mask = _decode_entry(image_id, name, entry)
            if mask.size != (width, height):
                raise MaskDimensionError(
                    f"Mask ({image_id}, {pathology.value}) is {mask.width}x{mask.height}, "
                    f"image '{image_path}' is {width}x{height}"
                )
            if mask.is_empty():
                logger.debug(f"Mask ({image_id}, {pathology.value}) is empty, skipping")
                continue
            masks[(image_id, pathology)] = mask
        records.append(
            RadiographRecord(
                image_id=image_id,
                patient_id=patient_id,
                split=split,
                view=view,
                image_path=image_path,
                native_width=width,
                native_height=height,
            )
        )
    annotations = AnnotationSet(records, masks, source_digest=digest_file(manifest_path))
    logger.info(
        f"Loaded {len(annotations)} images and {len(masks)} masks from '{manifest_path}'"
    )
    return annotations


def _read_mask_png(path: Path) -> BinaryMask:
    if not path.is_file():
        raise MissingImageError(f"Mask file '{path}' does not exist")
    try:
        with Image.open(path) as image:
            return BinaryMask(np.asarray(image.convert("L")) > 0)
    except (OSError, UnidentifiedImageError) as e:
        raise ManifestError(f"Failed to read mask '{path}': {e}")


def _read_index(index_path: Path) -> Dict[str, Any]:
    try:
        with open(index_path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ManifestError(f"Malformed index '{index_path}': {e}")
    except OSError as e:
        raise ManifestError(f"Failed to read index '{index_path}': {e}")
    if not isinstance(document, dict) or not isinstance(document.get("images"), list):
        raise ManifestError(f"Index '{index_path}' must contain an 'images' list")
    return document


def load_synthetic_index(index_path: Union[str, Path]) -> AnnotationSet:
    """Load the synthetic directory format; paths are relative to the index file."""
    index_path = Path(index_path)
    root = index_path.parent
    document = _read_index(index_path)
    records: List[RadiographRecord] = []
    masks: Dict[Tuple[str, Pathology], BinaryMask] = {}
    for entry in document["images"]:
        try:
            image_id = str(entry["image_id"])
            image_path = root / entry["path"]
            view = ViewPosition.parse(entry["view"])
            split = Split.parse(entry["split"])
        except (KeyError, TypeError) as e:
            raise ManifestError(f"Index entry {entry!r:.200} is missing a field: {e}")
        width, height = _image_size(image_path)
        for name, rel in sorted((entry.get("masks") or {}).items()):
            if re.sub(r"[\s_\-]", "", name).lower() in EXCLUDED_FINDINGS:
                logger.warning(f"Skipping '{name}' mask of '{image_id}': not a pathology")
                continue
            pathology = Pathology.from_name(name)
            if pathology is None:
                logger.warning(f"Skipping unknown pathology '{name}' on '{image_id}'")
                continue
            if (image_id, pathology) in masks:
                raise DuplicateEntryError(f"Mask ({image_id}, {pathology.value}) appears twice")
            mask = _read_mask_png(root / rel)
            if mask.size != (width, height):
                raise MaskDimensionError(
                    f"Mask ({image_id}, {pathology.value}) is {mask.width}x{mask.height}, "
                    f"image is {width}x{height}"
                )
            masks[(image_id, pathology)] = mask
        records.append(
            RadiographRecord(
                image_id=image_id,
                patient_id=str(entry.get("patient_id", image_id)),
                split=split,
                view=view,
                image_path=image_path,
                native_width=width,
                native_height=height,
            )
        )
    annotations = AnnotationSet(records, masks, source_digest=digest_file(index_path))
    logger.info(f"Loaded {len(annotations)} images and {len(masks)} masks from '{index_path}'")
    return annotations


def load_corpus(
    path: Union[str, Path],
    images_root: Optional[Union[str, Path]] = None,
    default_split: Optional[str] = None,
) -> AnnotationSet:
    """Dispatch on format: YAML or ``schema: synthetic-index/*`` JSON is the synthetic format."""
    path = Path(path)
    if path.suffix.lower() in (".yaml", ".yml"):
        return load_synthetic_index(path)
    document = _read_json(path)
    if isinstance(document, dict) and str(document.get("schema", "")).startswith(
        "synthetic-index"
    ):
        return load_synthetic_index(path)
    root = images_root if images_root is not None else path.parent
    return load_manifest(path, root, default_split)


def select_tasks(
    annotations: AnnotationSet,
    split: Optional[Union[Split, str]] = None,
    view_filter: Optional[ViewKind] = None,
    pathology_filter: Optional[Iterable[Pathology]] = None,
    grid: GridSpec = GridSpec(),
) -> List[LocalizationTask]:
    """One task per (image, pathology) mask passing the filters, ordered by image id."""
    wanted_split = split if split is None or isinstance(split, Split) else Split.parse(split)
    wanted_pathologies = set(pathology_filter) if pathology_filter is not None else None
    tasks = []
    for image_id, pathology in annotations.masks:
        record = annotations.record(image_id)
        if wanted_split is not None and record.split is not wanted_split:
            continue
        if view_filter is not None and record.view.kind is not view_filter:
            continue
        if wanted_pathologies is not None and pathology not in wanted_pathologies:
            continue
        tasks.append(LocalizationTask(image_id, pathology, record.view, grid))
    return tasks


def describe_corpus(annotations: AnnotationSet) -> Dict[Tuple[str, str, str], int]:
    """Image counts per (split, pathology, view kind)."""
    counter: Counter = Counter()
    for image_id, pathology in annotations.masks:
        record = annotations.record(image_id)
        counter[(record.split.value, pathology.value, record.view.kind.value)] += 1
    return dict(sorted(counter.items()))
