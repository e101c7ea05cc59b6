"""
Skeleton Topology
Joints, edges, adjacency matrices and the body-part partition of the COCO-17 skeleton
"""

import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, FrozenSet, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import AdjacencyError, LayoutError, SequenceValidationError

logger = logging.getLogger(__name__)

COCO17_JOINTS = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)

COCO17_EDGES = (
    (0, 1), (0, 2), (1, 3), (2, 4), (0, 5), (0, 6), (5, 7), (7, 9), (6, 8),
    (8, 10), (5, 11), (6, 12), (11, 12), (11, 13), (13, 15), (12, 14), (14, 16), (5, 6),
)

COCO17_PARTS = {
    0: (0, 1, 2, 3, 4),
    1: (5, 6, 11, 12),
    2: (7, 9),
    3: (8, 10),
    4: (13, 15),
    5: (14, 16),
}

REGION_NAMES = {
    0: "head",
    1: "torso",
    2: "left_arm",
    3: "right_arm",
    4: "left_leg",
    5: "right_leg",
}

# Regions that touch in the human body; every edge must stay within or between these.
ADJACENT_REGIONS = frozenset({
    frozenset({0, 1}), frozenset({1, 2}), frozenset({1, 3}), frozenset({1, 4}), frozenset({1, 5}),
})

MAX_PERSONS = 2


@dataclass(frozen=True)
class Adjacency:
    """N×N joint adjacency, raw binary or symmetrically normalized"""

    matrix: torch.Tensor
    normalized: bool = False

    def __post_init__(self):
        if self.matrix.dim() != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise AdjacencyError(f"Adjacency must be square, got shape {list(self.matrix.shape)}")

    @property
    def size(self) -> int:
        return int(self.matrix.shape[0])

    def like(self, tensor: torch.Tensor) -> torch.Tensor:
        """Matrix in the dtype of `tensor`."""
        return self.matrix.to(dtype=tensor.dtype)


@dataclass(frozen=True)
class SkeletonLayout:
    """Fixed joint topology plus its body-part partition"""

    joint_count: int
    edges: Tuple[Tuple[int, int], ...]
    part_partition: Mapping[int, FrozenSet[int]]
    region_names: Mapping[int, str]
    joint_names: Tuple[str, ...] = ()

    def __post_init__(self):
        n = self.joint_count
        if n < 1:
            raise LayoutError(f"Joint count must be positive, got {n}")
        for i, j in self.edges:
            if not (0 <= i < n and 0 <= j < n):
                raise LayoutError(f"Edge ({i}, {j}) references a joint outside 0..{n - 1}")
            if i == j:
                raise LayoutError(f"Edge ({i}, {j}) is a self-loop")

        seen: Dict[int, int] = {}
        for region, joints in self.part_partition.items():
            if not joints:
                raise LayoutError(f"Region {region} is empty")
            for joint in joints:
                if joint in seen:
                    raise LayoutError(f"Joint {joint} belongs to regions {seen[joint]} and {region}")
                seen[joint] = region
        missing = sorted(set(range(n)) - set(seen))
        if missing or len(seen) != n:
            raise LayoutError(f"Regions do not cover the joints exactly; missing {missing}")
        if set(self.region_names) != set(self.part_partition):
            raise LayoutError("Every region needs a name")

    @property
    def region_count(self) -> int:
        return len(self.part_partition)

    def region_of(self, joint: int) -> int:
        for region, joints in self.part_partition.items():
            if joint in joints:
                return region
        raise LayoutError(f"Joint {joint} is outside the layout")

    def joints_in(self, regions: Iterable[int]) -> Tuple[int, ...]:
        """Sorted union of the joints of the given regions."""
        joints = set()
        for region in regions:
            if region not in self.part_partition:
                raise LayoutError(f"Unknown region {region}; valid ids are {sorted(self.part_partition)}")
            joints.update(self.part_partition[region])
        return tuple(sorted(joints))

    def adjacency(self) -> Adjacency:
        """Raw symmetric binary adjacency of the edge list."""
        matrix = torch.zeros(self.joint_count, self.joint_count, dtype=torch.float64)
        for i, j in self.edges:
            matrix[i, j] = 1.0
            matrix[j, i] = 1.0
        return Adjacency(matrix=matrix, normalized=False)


def build_layout(joint_count: int, edges: Sequence[Tuple[int, int]],
                 parts: Mapping[int, Sequence[int]], region_names: Optional[Mapping[int, str]] = None,
                 joint_names: Sequence[str] = ()) -> SkeletonLayout:
    """Build and validate an arbitrary layout (used for small verification graphs)."""
    names = dict(region_names) if region_names else {r: f"region_{r}" for r in parts}
    return SkeletonLayout(
        joint_count=joint_count,
        edges=tuple((int(i), int(j)) for i, j in edges),
        part_partition={int(r): frozenset(int(j) for j in js) for r, js in parts.items()},
        region_names=names,
        joint_names=tuple(joint_names),
    )


@lru_cache(maxsize=1)
def build_coco17_layout() -> SkeletonLayout:
    """The fixed 17-joint layout with its 6-region partition."""
    layout = build_layout(
        joint_count=len(COCO17_JOINTS),
        edges=COCO17_EDGES,
        parts=COCO17_PARTS,
        region_names=REGION_NAMES,
        joint_names=COCO17_JOINTS,
    )
    sizes = tuple(len(layout.part_partition[r]) for r in range(layout.region_count))
    if layout.joint_count != 17 or sizes != (5, 4, 2, 2, 2, 2):
        raise LayoutError(f"COCO-17 layout invariant broken: N={layout.joint_count}, sizes={sizes}")
    return layout


def normalize_adjacency(a: Adjacency) -> Adjacency:
    """
    Symmetric normalization with self-loops: D^(-1/2) (A + I) D^(-1/2).

    Args:
        a: raw binary symmetric adjacency

    Returns:
        Normalized adjacency (flag set)
    """
    if a.normalized:
        raise AdjacencyError("Adjacency is already normalized; pass the raw matrix")
    matrix = a.matrix.to(torch.float64)
    if not torch.equal(matrix, matrix.T):
        raise AdjacencyError("Raw adjacency must be symmetric")
    if not bool(((matrix == 0) | (matrix == 1)).all()):
        raise AdjacencyError("Raw adjacency entries must be 0 or 1")

    with_loops = matrix + torch.eye(a.size, dtype=torch.float64)
    inv_sqrt = with_loops.sum(dim=1).pow(-0.5)
    normalized = inv_sqrt[:, None] * with_loops * inv_sqrt[None, :]
    # exact symmetry regardless of rounding order
    normalized = 0.5 * (normalized + normalized.T)
    return Adjacency(matrix=normalized, normalized=True)


def raw_from_normalized(a: Adjacency) -> Adjacency:
    """Recover the binary edge pattern of a normalized adjacency."""
    if not a.normalized:
        return a
    pattern = (a.matrix != 0).to(torch.float64)
    pattern.fill_diagonal_(0.0)
    return Adjacency(matrix=pattern, normalized=False)


@dataclass(eq=False)
class SkeletonSequence:
    """
    Per-person joint coordinates of one clip.

    persons has shape (P, T, N, 2); confidence, when present, has shape (T, N).
    """

    persons: np.ndarray
    label: int
    confidence: Optional[np.ndarray] = None
    validated: bool = False

    @property
    def person_count(self) -> int:
        return int(self.persons.shape[0])

    @property
    def frame_count(self) -> int:
        return int(self.persons.shape[1])

    def replace(self, persons: np.ndarray, confidence: Optional[np.ndarray] = None) -> "SkeletonSequence":
        """New sequence with the same label; validation state carries over."""
        return SkeletonSequence(
            persons=persons,
            label=self.label,
            confidence=self.confidence if confidence is None else confidence,
            validated=self.validated,
        )


def validate_sequence(seq: SkeletonSequence, layout: SkeletonLayout) -> None:
    """Check every SkeletonSequence invariant against the layout, marking the sequence as validated."""
    persons = np.asarray(seq.persons)
    if persons.ndim != 4 or persons.shape[-1] != 2:
        raise SequenceValidationError(
            f"Expected persons array of shape (P, T, N, 2), got {list(persons.shape)}"
        )
    person_count, frame_count, joint_count, _ = persons.shape
    if not 1 <= person_count <= MAX_PERSONS:
        raise SequenceValidationError(f"Person count {person_count} outside 1..{MAX_PERSONS}")
    if frame_count < 1:
        raise SequenceValidationError("Sequence has no frames")
    if joint_count != layout.joint_count:
        raise SequenceValidationError(
            f"Joint count mismatch: frame has {joint_count} joints, layout expects N={layout.joint_count}",
            frame=0,
        )

    finite = np.isfinite(persons).all(axis=-1)
    if not finite.all():
        p, t, j = (int(v) for v in np.argwhere(~finite)[0])
        raise SequenceValidationError("Non-finite coordinate", person=p, frame=t, joint=j)

    if seq.confidence is not None:
        confidence = np.asarray(seq.confidence)
        if confidence.shape != (frame_count, joint_count):
            raise SequenceValidationError(
                f"Confidence shape {list(confidence.shape)} does not match (T, N) = ({frame_count}, {joint_count})"
            )
        outside = ~(np.isfinite(confidence) & (confidence >= 0.0) & (confidence <= 1.0))
        if outside.any():
            t, j = (int(v) for v in np.argwhere(outside)[0])
            raise SequenceValidationError("Confidence outside [0, 1]", frame=t, joint=j)

    if int(seq.label) < 0:
        raise SequenceValidationError(f"Negative label {seq.label}")

    seq.validated = True


def edge_regions_adjacent(layout: SkeletonLayout) -> bool:
    """True when every edge joins joints of the same or anatomically adjacent regions."""
    for i, j in layout.edges:
        a, b = layout.region_of(i), layout.region_of(j)
        if a != b and frozenset({a, b}) not in ADJACENT_REGIONS:
            logger.debug(f"Edge ({i}, {j}) spans non-adjacent regions {a} and {b}")
            return False
    return True
