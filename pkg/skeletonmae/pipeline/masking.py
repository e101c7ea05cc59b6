"""
Joint Masking
Resolves body-part or random joint masks and substitutes the learnable mask token
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from .errors import MaskError, ShapeMismatchError
from .skeleton import SkeletonLayout

logger = logging.getLogger(__name__)

BODY_PARTS = "body_parts"
RANDOM = "random"
TOKEN_INIT_STD = 0.02


@dataclass(frozen=True)
class MaskSpec:
    """
    How masked joints are chosen for a sample.

    body_parts with a non-empty region set masks exactly those regions; with an empty set it
    samples `sample_regions` regions per call. random masks round(ratio * N) joints.

    rng_seed seeds the mask stream of reconstruction exports only. Pre-training ignores it and
    draws masks from its own (seed, epoch) stream.
    """

    strategy: str = BODY_PARTS
    regions: Tuple[int, ...] = ()
    ratio: Optional[float] = None
    sample_regions: int = 1
    rng_seed: int = 0

    def validate(self, layout: SkeletonLayout) -> None:
        if self.strategy == BODY_PARTS:
            if self.regions:
                unique = set(self.regions)
                unknown = sorted(unique - set(layout.part_partition))
                if unknown:
                    raise MaskError(f"Unknown region ids {unknown}")
                if len(unique) >= layout.region_count:
                    raise MaskError("Masking every region is not allowed; leave at least one region visible")
            elif not 1 <= self.sample_regions < layout.region_count:
                raise MaskError(
                    f"sample_regions must be in 1..{layout.region_count - 1}, got {self.sample_regions}"
                )
        elif self.strategy == RANDOM:
            if self.ratio is None or not 0.0 < self.ratio < 1.0:
                raise MaskError(f"Random mask ratio must be in (0, 1), got {self.ratio}")
        else:
            raise MaskError(f"Unknown mask strategy '{self.strategy}'")

    @property
    def is_fixed(self) -> bool:
        return self.strategy == BODY_PARTS and bool(self.regions)

    @property
    def label(self) -> str:
        if self.strategy == RANDOM:
            return f"random({self.ratio:g})"
        if self.regions:
            return "body_parts(" + ",".join(str(r) for r in sorted(set(self.regions))) + ")"
        return f"body_parts(sample={self.sample_regions})"

    @classmethod
    def parse(cls, text: str, rng_seed: int = 0) -> "MaskSpec":
        """Parse 'body_parts', 'body_parts:3,5' or 'random:0.5'."""
        name, _, argument = text.strip().partition(":")
        name = name.strip()
        try:
            if name == RANDOM:
                return cls(strategy=RANDOM, ratio=float(argument), rng_seed=rng_seed)
            if name == BODY_PARTS:
                regions = tuple(int(r) for r in argument.split(",") if r.strip()) if argument else ()
                return cls(strategy=BODY_PARTS, regions=regions, rng_seed=rng_seed)
        except ValueError:
            raise MaskError(f"Malformed mask spec '{text}'") from None
        raise MaskError(f"Unknown mask strategy in '{text}'")


def masked_joint_count(ratio: float, joint_count: int) -> int:
    """round(ratio * N), halves rounding up, clamped to [1, N - 1]."""
    count = int(math.floor(ratio * joint_count + 0.5))
    return min(max(count, 1), joint_count - 1)


def resolve_mask(spec: MaskSpec, layout: SkeletonLayout, rng: np.random.Generator) -> Tuple[int, ...]:
    """
    Resolve the masked joint set for one sample.

    Args:
        spec: masking strategy
        layout: skeleton layout providing joints and regions
        rng: random stream (unused for fixed body-part masks)

    Returns:
        Sorted tuple of masked joint indices
    """
    spec.validate(layout)
    n = layout.joint_count

    if spec.strategy == RANDOM:
        k = masked_joint_count(spec.ratio, n)
        chosen = rng.choice(n, size=k, replace=False)
        return tuple(sorted(int(j) for j in chosen))

    if spec.regions:
        return layout.joints_in(spec.regions)

    region_ids = sorted(layout.part_partition)
    picked = rng.choice(len(region_ids), size=spec.sample_regions, replace=False)
    return layout.joints_in(region_ids[int(i)] for i in picked)


def mask_matrix(masks: Sequence[Sequence[int]], joint_count: int) -> torch.Tensor:
    """Boolean (B, N) row mask from per-sample joint sets."""
    rows = torch.zeros(len(masks), joint_count, dtype=torch.bool)
    for b, joints in enumerate(masks):
        if not joints:
            raise MaskError(f"Sample {b} has an empty mask")
        for j in joints:
            if not 0 <= j < joint_count:
                raise MaskError(f"Masked joint {j} outside 0..{joint_count - 1}")
            rows[b, j] = True
    return rows


class MaskToken(nn.Module):
    """Learnable D-vector substituted for masked joint features, drawn from N(0, TOKEN_INIT_STD²)"""

    def __init__(self, dim: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        # a zero token plus zero biases decodes fully masked neighbourhoods to zero rows
        self.vector = nn.Parameter(torch.randn(dim, generator=generator) * TOKEN_INIT_STD)

    @property
    def dim(self) -> int:
        return int(self.vector.shape[0])


def apply_row_mask(x: torch.Tensor, rows: torch.Tensor, token: Union[MaskToken, torch.Tensor]) -> torch.Tensor:
    """
    Replace masked rows of x (..., N, D) with the token; rows is a bool mask broadcastable to (..., N).
    Unmasked rows pass through bit-identical.
    """
    vector = token.vector if isinstance(token, MaskToken) else token
    if vector.dim() != 1 or vector.shape[0] != x.shape[-1]:
        raise ShapeMismatchError("apply_mask", x.shape, vector.shape)
    if rows.shape[-1] != x.shape[-2]:
        raise ShapeMismatchError("apply_mask", x.shape, rows.shape)
    return torch.where(rows.unsqueeze(-1), vector.to(x.dtype), x)


def apply_mask(x: torch.Tensor, mask: Sequence[int], token: Union[MaskToken, torch.Tensor]) -> torch.Tensor:
    """Mask the rows of an N×D feature matrix listed in `mask`."""
    joint_count = x.shape[-2]
    if not mask:
        raise MaskError("Mask must contain at least one joint")
    rows = torch.zeros(joint_count, dtype=torch.bool)
    for j in mask:
        if not 0 <= j < joint_count:
            raise MaskError(f"Masked joint {j} outside 0..{joint_count - 1}")
        rows[j] = True
    return apply_row_mask(x, rows, token)
