"""
Skeleton Datasets
JSONL ingestion, temporal resampling, normalization, pixel noise and the synthetic action generator
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.neighbors import NearestCentroid

from ..config import config
from .errors import (
    ConfigError,
    DatasetFormatError,
    DegeneratePoseError,
    EmptyDatasetError,
    LabelError,
    SequenceValidationError,
)
from .sequence_cache import SequenceCache
from .skeleton import (
    COCO17_PARTS,
    MAX_PERSONS,
    SkeletonLayout,
    SkeletonSequence,
    build_coco17_layout,
    validate_sequence,
)

logger = logging.getLogger(__name__)

TRAIN = "train"
TEST = "test"
DEFAULT_FRAMES = 64
DEFAULT_NOISE_SIGMA = 0.01
TORSO_REGION = "torso"


@dataclass(frozen=True)
class SequenceRecord:
    """Location and summary of one dataset line"""

    offset: int
    line: int
    label: int
    person_count: int
    frame_count: int


@dataclass
class DatasetManifest:
    records: List[SequenceRecord]
    class_count: int
    split: str = TRAIN
    path: Optional[str] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    def class_support(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


# Sequence transforms

def pad_persons(seq: SkeletonSequence, persons: int = MAX_PERSONS) -> SkeletonSequence:
    """Append all-zero skeletons up to `persons` slots."""
    missing = persons - seq.person_count
    if missing <= 0:
        return seq
    zeros = np.zeros((missing,) + seq.persons.shape[1:], dtype=seq.persons.dtype)
    return seq.replace(persons=np.concatenate([seq.persons, zeros], axis=0))


def resample_time(seq: SkeletonSequence, frames: int = DEFAULT_FRAMES) -> SkeletonSequence:
    """
    Linearly interpolate every joint coordinate onto `frames` uniformly spaced frames.

    Args:
        seq: sequence with at least one frame
        frames: target frame count

    Returns:
        New sequence; an exact copy when the frame count already matches
    """
    if frames < 1:
        raise ConfigError(f"Target frame count must be >= 1, got {frames}")
    t_raw = seq.frame_count
    if t_raw < 1:
        raise SequenceValidationError("Sequence has no frames")
    if t_raw == frames:
        confidence = None if seq.confidence is None else seq.confidence.copy()
        return seq.replace(persons=seq.persons.copy(), confidence=confidence)

    positions = np.linspace(0.0, t_raw - 1, frames)
    lower = np.floor(positions).astype(np.int64)
    upper = np.minimum(lower + 1, t_raw - 1)
    weight = positions - lower

    persons = seq.persons
    w = weight[None, :, None, None]
    resampled = persons[:, lower] * (1.0 - w) + persons[:, upper] * w

    confidence = None
    if seq.confidence is not None:
        c = seq.confidence
        confidence = c[lower] * (1.0 - weight[:, None]) + c[upper] * weight[:, None]
    return seq.replace(persons=resampled, confidence=confidence)


def _torso_joints(layout: SkeletonLayout) -> Tuple[int, ...]:
    for region, name in layout.region_names.items():
        if name == TORSO_REGION:
            return tuple(sorted(layout.part_partition[region]))
    return tuple(sorted(layout.part_partition[min(layout.part_partition)]))


def normalize_coords(seq: SkeletonSequence, layout: Optional[SkeletonLayout] = None) -> SkeletonSequence:
    """
    Per person: move the frame-0 torso centroid to the origin and scale the frame-0
    bounding-box diagonal to 1. Zero-padded persons stay zero.
    """
    layout = layout or build_coco17_layout()
    torso = list(_torso_joints(layout))
    out = np.array(seq.persons, dtype=np.float64, copy=True)

    for p in range(out.shape[0]):
        person = out[p]
        if not np.any(person):
            continue
        first = person[0]
        centroid = first[torso].mean(axis=0)
        extent = first.max(axis=0) - first.min(axis=0)
        diagonal = float(np.hypot(extent[0], extent[1]))
        if diagonal <= 1e-12:
            raise DegeneratePoseError(
                f"Degenerate pose for person {p}: every joint of frame 0 is at the same position"
            )
        out[p] = (person - centroid) / diagonal
    return seq.replace(persons=out)


def add_pixel_noise(persons: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise on (..., T, N, 2) person blocks; all-zero blocks are left untouched."""
    if sigma < 0:
        raise ConfigError(f"Noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return persons.copy()
    present = np.any(persons != 0, axis=(-3, -2, -1), keepdims=True)
    noise = rng.normal(0.0, sigma, size=persons.shape)
    return np.where(present, persons + noise, persons)


def pixel_noise(seq: SkeletonSequence, sigma: float, rng: np.random.Generator) -> SkeletonSequence:
    return seq.replace(persons=add_pixel_noise(seq.persons, sigma, rng))


def prepare_sequence(seq: SkeletonSequence, layout: SkeletonLayout, frames: Optional[int] = DEFAULT_FRAMES,
                     normalize: bool = True) -> SkeletonSequence:
    """Validate, pad to two persons, normalize and resample a raw sequence."""
    if not seq.validated:
        validate_sequence(seq, layout)
    prepared = pad_persons(seq)
    if normalize:
        prepared = normalize_coords(prepared, layout)
    if frames is not None:
        prepared = resample_time(prepared, frames)
    return prepared


# JSONL I/O

def sequence_to_json(seq: SkeletonSequence) -> str:
    record = {"label": int(seq.label), "persons": np.asarray(seq.persons, dtype=np.float64).tolist()}
    if seq.confidence is not None:
        record["confidence"] = np.asarray(seq.confidence, dtype=np.float64).tolist()
    return json.dumps(record, separators=(",", ":"))


def write_jsonl(path, sequences: Iterable[SkeletonSequence]) -> int:
    """Write one JSON object per sequence; returns the record count."""
    path = Path(path)
    count = 0
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as handle:
            for seq in sequences:
                handle.write(sequence_to_json(seq) + "\n")
                count += 1
    except OSError as e:
        raise DatasetFormatError(path, None, f"cannot write dataset ({e})") from None
    logger.info(f"Wrote {count} sequences to {path}")
    return count


def parse_sequence(raw: bytes, path, line: int) -> SkeletonSequence:
    """Decode one JSONL line; malformed content raises DatasetFormatError with the line number."""
    try:
        record = json.loads(raw)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(path, line, f"invalid JSON ({e})") from None
    if not isinstance(record, dict):
        raise DatasetFormatError(path, line, "expected a JSON object")
    unknown = sorted(set(record) - {"label", "persons", "confidence"})
    if unknown:
        raise DatasetFormatError(path, line, f"unknown keys {unknown}")

    label = record.get("label")
    if not isinstance(label, int) or isinstance(label, bool):
        raise DatasetFormatError(path, line, f"label must be an integer, got {label!r}")
    if "persons" not in record:
        raise DatasetFormatError(path, line, "missing 'persons'")
    try:
        persons = np.asarray(record["persons"], dtype=np.float64)
        confidence = record.get("confidence")
        if confidence is not None:
            confidence = np.asarray(confidence, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DatasetFormatError(path, line, f"ragged or non-numeric arrays ({e})") from None
    return SkeletonSequence(persons=persons, label=label, confidence=confidence)


def _checked(seq: SkeletonSequence, layout: SkeletonLayout, path, line: int) -> SkeletonSequence:
    try:
        validate_sequence(seq, layout)
    except SequenceValidationError:
        logger.error(f"Invalid sequence at {path}:{line}")
        raise
    return seq


class SkeletonDataset:
    """
    Indexed access to the sequences of one split.

    File-backed datasets seek to each record's byte offset on demand; prepared sequences are
    held in a SequenceCache.
    """

    def __init__(self, manifest: DatasetManifest, layout: Optional[SkeletonLayout] = None,
                 frames: Optional[int] = DEFAULT_FRAMES, normalize: bool = True,
                 cache: Optional[SequenceCache] = None,
                 sequences: Optional[Sequence[SkeletonSequence]] = None):
        self.manifest = manifest
        self.layout = layout or build_coco17_layout()
        self.frames = frames
        self.normalize = normalize
        self.cache = cache if cache is not None else SequenceCache(config.CACHE_SIZE)
        self._sequences = list(sequences) if sequences is not None else None

    @classmethod
    def from_sequences(cls, sequences: Sequence[SkeletonSequence], class_count: Optional[int] = None,
                       split: str = TRAIN, layout: Optional[SkeletonLayout] = None,
                       frames: Optional[int] = DEFAULT_FRAMES, normalize: bool = True,
                       cache: Optional[SequenceCache] = None) -> "SkeletonDataset":
        """In-memory dataset over already constructed sequences."""
        layout = layout or build_coco17_layout()
        if not sequences:
            raise EmptyDatasetError(f"{split} split has no records")
        records = []
        for index, seq in enumerate(sequences):
            validate_sequence(seq, layout)
            records.append(SequenceRecord(offset=index, line=index + 1, label=int(seq.label),
                                          person_count=seq.person_count, frame_count=seq.frame_count))
        manifest = DatasetManifest(records=records, class_count=_class_count(records, class_count, split),
                                   split=split, path=None)
        return cls(manifest, layout=layout, frames=frames, normalize=normalize, cache=cache, sequences=sequences)

    def __len__(self) -> int:
        return len(self.manifest)

    @property
    def class_count(self) -> int:
        return self.manifest.class_count

    @property
    def labels(self) -> np.ndarray:
        return self.manifest.labels

    def raw(self, index: int) -> SkeletonSequence:
        """The validated sequence as stored, padded to two persons."""
        record = self.manifest.records[index]
        if self._sequences is not None:
            seq = self._sequences[index]
        else:
            path = self.manifest.path
            try:
                with open(path, "rb") as handle:
                    handle.seek(record.offset)
                    raw = handle.readline()
            except OSError as e:
                raise DatasetFormatError(path, record.line, f"cannot read record ({e})") from None
            seq = parse_sequence(raw, path, record.line)
        if not seq.validated:
            _checked(seq, self.layout, self.manifest.path, record.line)
        return pad_persons(seq)

    def __getitem__(self, index: int) -> SkeletonSequence:
        if not 0 <= index < len(self):
            raise IndexError(f"Record {index} outside 0..{len(self) - 1}")
        cached = self.cache.get(index)
        if cached is not None:
            return cached
        prepared = prepare_sequence(self.raw(index), self.layout, frames=self.frames, normalize=self.normalize)
        self.cache.set(index, prepared)
        return prepared

    def __iter__(self):
        for index in range(len(self)):
            yield self[index]

    def coords(self, indices: Sequence[int]) -> np.ndarray:
        """Stacked (B, P, T, N, 2) coordinates of the prepared sequences."""
        return np.stack([self[int(i)].persons for i in indices], axis=0)

    def flattened(self) -> np.ndarray:
        return self.coords(range(len(self))).reshape(len(self), -1)


def _class_count(records: Sequence[SequenceRecord], class_count: Optional[int], split: str) -> int:
    if class_count is None:
        return max(r.label for r in records) + 1
    for r in records:
        if not 0 <= r.label < class_count:
            raise LabelError(f"Label {r.label} at record {r.line} of the {split} split outside 0..{class_count - 1}")
    return class_count


def load_jsonl(path, layout: Optional[SkeletonLayout] = None, split: str = TRAIN,
               class_count: Optional[int] = None, frames: Optional[int] = DEFAULT_FRAMES,
               normalize: bool = True) -> Tuple[DatasetManifest, SkeletonDataset]:
    """
    Stream a JSONL dataset once to build its manifest.

    Args:
        path: dataset file
        layout: skeleton layout (COCO-17 by default)
        split: split name recorded in the manifest
        class_count: fixed class count; inferred from the labels when omitted
        frames: frame count sequences are resampled to on access (None keeps raw length)
        normalize: normalize coordinates on access

    Returns:
        (manifest, dataset accessor)
    """
    layout = layout or build_coco17_layout()
    path = Path(path)
    if not path.is_file():
        raise DatasetFormatError(path, None, "dataset file not found")

    records: List[SequenceRecord] = []
    try:
        with path.open("rb") as handle:
            line = 0
            while True:
                offset = handle.tell()
                raw = handle.readline()
                if not raw:
                    break
                line += 1
                if not raw.strip():
                    continue
                seq = _checked(parse_sequence(raw, path, line), layout, path, line)
                if class_count is not None and not 0 <= seq.label < class_count:
                    raise LabelError(f"{path}:{line}: label {seq.label} outside 0..{class_count - 1}")
                records.append(SequenceRecord(offset=offset, line=line, label=int(seq.label),
                                              person_count=seq.person_count, frame_count=seq.frame_count))
    except OSError as e:
        raise DatasetFormatError(path, None, f"cannot read dataset ({e})") from None

    if not records:
        raise EmptyDatasetError(f"{path}: no records")

    manifest = DatasetManifest(records=records, class_count=_class_count(records, class_count, split),
                               split=split, path=str(path))
    logger.info(f"Loaded {split} manifest from {path}: {len(records)} records, {manifest.class_count} classes")
    return manifest, SkeletonDataset(manifest, layout=layout, frames=frames, normalize=normalize)


def pretraining_frames(dataset: SkeletonDataset) -> np.ndarray:
    """Every (sequence, present person, frame) pose of the dataset as an (F, N, 2) float32 array."""
    frames = []
    for seq in dataset:
        for person in seq.persons:
            if np.any(person):
                frames.append(person)
    if not frames:
        raise EmptyDatasetError("Dataset has no present persons to pre-train on")
    return np.concatenate(frames, axis=0).astype(np.float32)


# Synthetic action generator

# Standing pose in pixels, hips midpoint at the origin, image y axis pointing down.
REST_POSE = np.array([
    [0.0, -150.0], [-8.0, -158.0], [8.0, -158.0], [-16.0, -152.0], [16.0, -152.0],
    [-40.0, -120.0], [40.0, -120.0], [-50.0, -70.0], [50.0, -70.0],
    [-55.0, -25.0], [55.0, -25.0], [-25.0, 0.0], [25.0, 0.0],
    [-28.0, 70.0], [28.0, 70.0], [-30.0, 140.0], [30.0, 140.0],
])

DEFAULT_REGION_ORDER = (2, 3, 4, 5, 0, 1)

# Joints whose mean is the pivot of each region's motion
REGION_ANCHORS = {
    0: (5, 6),
    1: (11, 12),
    2: (5,),
    3: (6,),
    4: (11,),
    5: (12,),
}


@dataclass(frozen=True)
class SynthSpec:
    """Synthetic dataset where each class oscillates exactly one body region"""

    class_count: int = 4
    sequences_per_class: int = 50
    frame_count: int = 48
    noise_sigma: float = 1.0
    active_regions: Optional[Tuple[int, ...]] = None
    amplitude: float = 0.8
    distinct_regions: bool = True
    train_fraction: float = 0.8
    seed: int = 0

    def regions(self) -> Tuple[int, ...]:
        """Active region per class, validated."""
        if self.class_count < 1 or self.sequences_per_class < 2 or self.frame_count < 2:
            raise ConfigError("Synthetic spec needs class_count >= 1, sequences_per_class >= 2, frame_count >= 2")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.distinct_regions and self.class_count > len(COCO17_PARTS):
            raise ConfigError(
                f"{self.class_count} classes cannot each animate a distinct region; only {len(COCO17_PARTS)} exist"
            )
        if self.active_regions is None:
            return tuple(DEFAULT_REGION_ORDER[c % len(DEFAULT_REGION_ORDER)] for c in range(self.class_count))
        regions = tuple(int(r) for r in self.active_regions)
        if len(regions) != self.class_count:
            raise ConfigError(f"active_regions lists {len(regions)} regions for {self.class_count} classes")
        if any(r not in COCO17_PARTS for r in regions):
            raise ConfigError(f"active_regions {regions} contains an unknown region id")
        if self.distinct_regions and len(set(regions)) != len(regions):
            raise ConfigError(f"active_regions {regions} must be distinct across classes")
        return regions


def class_motion(label: int) -> Tuple[float, float]:
    """(cycles per clip, phase) of a class's oscillation."""
    return 1.0 + (label % 3), (label * math.pi) / 4.0


def _rotate(points: np.ndarray, pivot: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate (T, K, 2) points around a fixed pivot by a per-frame angle."""
    cos = np.cos(angle)[:, None]
    sin = np.sin(angle)[:, None]
    rel = points - pivot
    x = rel[..., 0] * cos - rel[..., 1] * sin
    y = rel[..., 0] * sin + rel[..., 1] * cos
    return np.stack([x, y], axis=-1) + pivot


def synthesize_sequence(label: int, region: int, spec: SynthSpec, rng: np.random.Generator) -> SkeletonSequence:
    """One single-person clip in which only the joints of `region` move."""
    t = spec.frame_count
    scale = rng.uniform(0.8, 1.2)
    offset = np.array([320.0, 240.0]) + rng.uniform(-50.0, 50.0, size=2)
    rest = REST_POSE * scale + offset + rng.normal(0.0, spec.noise_sigma, size=REST_POSE.shape)

    cycles, phase = class_motion(label)
    phase += rng.uniform(-0.3, 0.3)
    amplitude = spec.amplitude * rng.uniform(0.8, 1.2)
    time = np.arange(t) / t
    angle = amplitude * np.sin(2.0 * math.pi * cycles * time + phase)

    pose = np.repeat(rest[None], t, axis=0)
    joints = sorted(COCO17_PARTS[region])
    pivot = rest[list(REGION_ANCHORS[region])].mean(axis=0)
    moved = _rotate(pose[:, joints], pivot, angle)
    moved += rng.normal(0.0, spec.noise_sigma, size=moved.shape)
    pose[:, joints] = moved

    persons = np.round(pose, 3)[None]
    return SkeletonSequence(persons=persons, label=label)


def split_indices(labels: np.ndarray, train_fraction: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified split; both sides get at least one sample of every class."""
    train, test = [], []
    for label in np.unique(labels):
        members = np.flatnonzero(labels == label)
        members = members[rng.permutation(len(members))]
        n_train = min(len(members) - 1, max(1, int(round(train_fraction * len(members)))))
        train.extend(members[:n_train].tolist())
        test.extend(members[n_train:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def synthesize(spec: SynthSpec) -> Tuple[List[SkeletonSequence], List[SkeletonSequence]]:
    """(train, test) sequences of the synthetic dataset."""
    regions = spec.regions()
    rng = np.random.default_rng(spec.seed)
    sequences = [
        synthesize_sequence(label, regions[label], spec, rng)
        for label in range(spec.class_count)
        for _ in range(spec.sequences_per_class)
    ]
    labels = np.array([s.label for s in sequences], dtype=np.int64)
    train_idx, test_idx = split_indices(labels, spec.train_fraction, rng)
    return [sequences[i] for i in train_idx], [sequences[i] for i in test_idx]


def generate_synthetic(spec: SynthSpec, out_dir) -> Tuple[Path, Path]:
    """
    Write train.jsonl and test.jsonl for a synthetic dataset.

    Returns:
        (train path, test path)
    """
    train, test = synthesize(spec)
    out_dir = Path(out_dir)
    train_path = out_dir / f"{TRAIN}.jsonl"
    test_path = out_dir / f"{TEST}.jsonl"
    write_jsonl(train_path, train)
    write_jsonl(test_path, test)
    logger.info(
        f"Synthetic dataset: {spec.class_count} classes, regions {spec.regions()}, "
        f"{len(train)} train / {len(test)} test sequences"
    )
    return train_path, test_path


def nearest_centroid_baseline(train: SkeletonDataset, test: SkeletonDataset) -> float:
    """Test accuracy of a nearest-centroid classifier on flattened prepared coordinates."""
    if len(train) == 0 or len(test) == 0:
        raise EmptyDatasetError("Baseline needs non-empty train and test splits")
    classifier = NearestCentroid()
    classifier.fit(train.flattened(), train.labels)
    return float(classifier.score(test.flattened(), test.labels))
