"""
SkeletonMAE Pre-training
Asymmetric graph encoder-decoder reconstructing masked joint features under a re-weighted cosine error
"""

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import numerics
from .backbones import GAT, NO_ACTIVATION, PRELU, EncoderStack, GraphTopology, Linear, build_encoder
from .checkpoint import (
    KIND_MAE,
    adam_state_tensors,
    load_checkpoint,
    load_module_tensors,
    module_tensors,
    restore_adam_state,
    save_checkpoint,
)
from .data import add_pixel_noise
from .errors import (
    ConfigError,
    DegenerateCosineError,
    EmptyDatasetError,
    MaskError,
    NonFiniteLossError,
    SequenceValidationError,
    ShapeMismatchError,
)
from .masking import MaskSpec, MaskToken, apply_row_mask, mask_matrix, resolve_mask
from .run_config import ModelConfig, PretrainConfig
from .skeleton import SkeletonLayout, SkeletonSequence

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-12
DESK_BATCH_SIZE = 256
CHECKPOINT_NAME = "checkpoint.skmae"


class SkeletonEmbedding(nn.Module):
    """Shared linear map from a joint's 2-D coordinate to a D-vector"""

    def __init__(self, dim: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.linear = Linear(2, dim, generator=generator)

    @property
    def dim(self) -> int:
        return self.linear.out_dim

    def forward(self, coords: torch.Tensor) -> torch.Tensor:
        if coords.shape[-1] != 2:
            raise ShapeMismatchError("embed", coords.shape, (2,))
        return self.linear(coords)


class MaeModel(nn.Module):
    """
    Embedding, mask token, a multi-layer graph encoder and a single-layer graph decoder.

    The decoder maps the hidden width back to the embedding width with no output activation.
    """

    def __init__(self, embed_dim: int, hidden_dim: int, encoder_depth: int, backbone: str = "gin",
                 gat_heads: int = 1, generator: Optional[torch.Generator] = None):
        super().__init__()
        if encoder_depth < 1:
            raise ConfigError(f"Encoder depth must be >= 1, got {encoder_depth}")
        self.backbone = backbone
        self.embedding = SkeletonEmbedding(embed_dim, generator=generator)
        self.mask_token = MaskToken(embed_dim, generator=generator)
        self.encoder: EncoderStack = build_encoder(backbone, embed_dim, hidden_dim, encoder_depth,
                                                   gat_heads=gat_heads, activation=PRELU, generator=generator)
        self.decoder: EncoderStack = build_encoder(backbone, hidden_dim, embed_dim, 1,
                                                   gat_heads=1, activation=NO_ACTIVATION, generator=generator)

    @classmethod
    def from_config(cls, model: ModelConfig, generator: Optional[torch.Generator] = None) -> "MaeModel":
        heads = model.gat_heads if model.backbone == GAT else 1
        return cls(model.embed_dim, model.hidden_dim, model.encoder_depth, backbone=model.backbone,
                   gat_heads=heads, generator=generator)

    @property
    def embed_dim(self) -> int:
        return self.embedding.dim

    @property
    def hidden_dim(self) -> int:
        return self.encoder.out_dim

    def encode(self, coords: torch.Tensor, topology: GraphTopology) -> torch.Tensor:
        """Unmasked hidden features H of (..., N, 2) coordinates."""
        return self.encoder(self.embedding(coords), topology)

    def forward(self, coords: torch.Tensor, rows: torch.Tensor,
                topology: GraphTopology) -> Tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            coords: (B, N, 2) joint coordinates, one frame per sample
            rows: (B, N) boolean masked-joint indicator
            topology: joint graph

        Returns:
            (targets X with gradient blocked, reconstructions Y), both (B, N, D)
        """
        x = self.embedding(coords)
        x_bar = apply_row_mask(x, rows, self.mask_token)
        h = self.encoder(x_bar, topology)
        y = self.decoder(h, topology)
        return x.detach(), y


def embed_sequence(model: MaeModel, seq: SkeletonSequence, person: int = 0) -> torch.Tensor:
    """N×T×D embedding of one person of a validated sequence."""
    if not seq.validated:
        raise SequenceValidationError("Sequence must be validated before embedding")
    if not 0 <= person < seq.person_count:
        raise SequenceValidationError(f"Person {person} outside 0..{seq.person_count - 1}")
    dtype = model.embedding.linear.weight.dtype
    coords = torch.as_tensor(np.asarray(seq.persons[person]), dtype=dtype)   # (T, N, 2)
    return model.embedding(coords.transpose(0, 1))


# Re-weighted cosine error

def _check_beta(beta: float) -> None:
    if beta < 1:
        raise ConfigError(f"RCE exponent beta must be >= 1, got {beta}")


def cosine_similarity(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    norms = (numerics.l2norm(x) + COSINE_EPS) * (numerics.l2norm(y) + COSINE_EPS)
    return (x * y).sum(dim=-1) / norms


def rce_loss(x: torch.Tensor, y: torch.Tensor, mask: Sequence[int], beta: float = 2.0) -> torch.Tensor:
    """
    Sum over masked rows of ((1 - cos(x_i, y_i)) / |mask|) ** beta.

    Targets x are detached, so gradients reach y only.
    """
    _check_beta(beta)
    mask = sorted(set(int(i) for i in mask))
    if not mask:
        raise MaskError("RCE needs at least one masked joint")
    if x.shape != y.shape:
        raise ShapeMismatchError("rce_loss", x.shape, y.shape)

    xs = numerics.gather_rows(x.detach(), mask)
    ys = numerics.gather_rows(y, mask)
    for name, rows in (("target", xs), ("reconstruction", ys)):
        zero = (rows == 0).all(dim=-1)
        if bool(zero.any()):
            joint = mask[int(torch.nonzero(zero)[0][-1])]
            raise DegenerateCosineError(f"Zero-norm {name} row at masked joint {joint}")

    error = torch.clamp(1.0 - cosine_similarity(xs, ys), min=0.0) / len(mask)
    return numerics.reduce_sum(error ** beta, axes=(-1,))


def batch_rce_loss(x: torch.Tensor, y: torch.Tensor, rows: torch.Tensor, beta: float = 2.0) -> torch.Tensor:
    """Batch mean of the per-sample RCE; rows is the (B, N) masked-joint indicator."""
    _check_beta(beta)
    if x.shape != y.shape or rows.shape != x.shape[:-1]:
        raise ShapeMismatchError("batch_rce_loss", x.shape, y.shape)
    counts = rows.sum(dim=-1)
    if bool((counts == 0).any()):
        raise MaskError(f"Sample {int(torch.nonzero(counts == 0)[0])} has an empty mask")

    x = x.detach()
    for name, values in (("target", x), ("reconstruction", y)):
        zero = (values == 0).all(dim=-1) & rows
        if bool(zero.any()):
            b, j = (int(v) for v in torch.nonzero(zero)[0])
            raise DegenerateCosineError(f"Zero-norm {name} row at masked joint {j} of sample {b}")

    # unmasked rows are swapped for a constant so they contribute neither value nor gradient
    keep = rows.unsqueeze(-1)
    ones = torch.ones((), dtype=y.dtype)
    cos = cosine_similarity(torch.where(keep, x, ones), torch.where(keep, y, ones))
    error = torch.clamp(1.0 - cos, min=0.0) / counts.unsqueeze(-1).to(y.dtype)
    per_sample = torch.where(rows, error ** beta, torch.zeros((), dtype=y.dtype)).sum(dim=-1)
    return per_sample.mean()


# Training loop

@dataclass
class PretrainReport:
    epoch_losses: List[float] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: Optional[str] = None
    frames: int = 0
    batch_size: int = 0
    steps: int = 0
    resumed_from_epoch: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class SkeletonMAETrainer:
    """
    Adam pre-training of a MaeModel over single-frame graph samples.

    Each epoch derives its random stream from (seed, epoch) so a run resumed at an epoch
    boundary follows the uninterrupted trajectory.
    """

    def __init__(self, model: MaeModel, layout: SkeletonLayout, cfg: PretrainConfig, mask: MaskSpec,
                 seed: int = 0, run_snapshot: Optional[Dict[str, Any]] = None):
        mask.validate(layout)
        self.model = model
        self.layout = layout
        self.topology = GraphTopology.from_layout(layout)
        self.cfg = cfg
        self.mask = mask
        self.seed = seed
        self.run_snapshot = run_snapshot
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=cfg.lr, betas=tuple(cfg.adam_betas), eps=cfg.adam_eps
        )
        self.step = 0
        self.epoch = 0
        self.epoch_losses: List[float] = []
        self.step_losses: List[float] = []

    @property
    def dtype(self) -> torch.dtype:
        return self.model.embedding.linear.weight.dtype

    def sample_masks(self, batch: int, rng: np.random.Generator) -> torch.Tensor:
        masks = [resolve_mask(self.mask, self.layout, rng) for _ in range(batch)]
        return mask_matrix(masks, self.layout.joint_count)

    def pretrain_step(self, coords: torch.Tensor, rng: np.random.Generator) -> float:
        """
        One Adam update on a batch of (B, N, 2) frames.

        Returns:
            The loss before the update
        """
        if coords.dim() != 3 or coords.shape[0] == 0:
            raise EmptyDatasetError(f"Pre-training batch must be a non-empty (B, N, 2) tensor, got {list(coords.shape)}")
        rows = self.sample_masks(coords.shape[0], rng)

        self.optimizer.zero_grad(set_to_none=True)
        targets, recon = self.model(coords.to(self.dtype), rows, self.topology)
        loss = batch_rce_loss(targets, recon, rows, self.cfg.beta)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(self.step, value)
        numerics.backward(loss)
        self.optimizer.step()

        self.step += 1
        self.step_losses.append(value)
        return value

    def effective_batch_size(self, frames: int) -> int:
        if self.cfg.batch_size <= frames:
            return self.cfg.batch_size
        fallback = min(DESK_BATCH_SIZE, frames)
        logger.warning(
            f"Batch size {self.cfg.batch_size} exceeds {frames} frames; using desk-scale batch {fallback}"
        )
        return fallback

    def run_epoch(self, frames: np.ndarray, batch_size: int) -> float:
        rng = np.random.default_rng([self.seed, self.epoch])
        order = rng.permutation(len(frames))
        losses = []
        for start in range(0, len(frames), batch_size):
            batch = frames[order[start:start + batch_size]]
            if self.cfg.noise_sigma > 0:
                batch = add_pixel_noise(batch[:, None], self.cfg.noise_sigma, rng)[:, 0]
            losses.append(self.pretrain_step(torch.as_tensor(batch, dtype=self.dtype), rng))
        mean = float(np.mean(losses))
        self.epoch_losses.append(mean)
        self.epoch += 1
        return mean

    def pretrain(self, frames: np.ndarray, out_dir=None) -> PretrainReport:
        """
        Run the remaining epochs over an (F, N, 2) frame array.

        Args:
            frames: pre-training poses
            out_dir: directory receiving checkpoint.skmae (and per-epoch checkpoints); None skips saving

        Returns:
            PretrainReport covering every epoch so far, including resumed ones
        """
        if len(frames) == 0:
            raise EmptyDatasetError("Pre-training dataset has no frames")
        if frames.ndim != 3 or frames.shape[1:] != (self.layout.joint_count, 2):
            raise ShapeMismatchError("pretrain", frames.shape, (self.layout.joint_count, 2))

        batch_size = self.effective_batch_size(len(frames))
        resumed_from = self.epoch
        started = time.perf_counter()

        while self.epoch < self.cfg.epochs:
            loss = self.run_epoch(frames, batch_size)
            logger.info(f"Pretrain epoch {self.epoch}/{self.cfg.epochs}: loss={loss:.6f} steps={self.step}")
            if out_dir is not None and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(Path(out_dir) / f"epoch_{self.epoch:04d}.skmae")

        path = self.save(Path(out_dir) / CHECKPOINT_NAME) if out_dir is not None else None
        return PretrainReport(
            epoch_losses=list(self.epoch_losses),
            step_losses=list(self.step_losses),
            wall_time=time.perf_counter() - started,
            checkpoint_path=str(path) if path else None,
            frames=int(len(frames)),
            batch_size=batch_size,
            steps=self.step,
            resumed_from_epoch=resumed_from,
        )

    def save(self, path) -> Path:
        tensors = module_tensors(self.model)
        tensors.update(adam_state_tensors(self.optimizer, self.model))
        extra = {
            "epoch": self.epoch,
            "step": self.step,
            "epoch_losses": self.epoch_losses,
            "step_losses": self.step_losses,
            "mask": self.mask.label,
            "seed": self.seed,
        }
        return save_checkpoint(path, tensors, KIND_MAE, config=self.run_snapshot, extra=extra)

    def resume(self, path) -> None:
        """Restore weights, Adam moments and counters from a checkpoint written by save()."""
        checkpoint = load_checkpoint(path, kind=KIND_MAE)
        weights = {k: v for k, v in checkpoint.tensors.items() if not k.startswith("optim.")}
        load_module_tensors(self.model, weights)
        self.step = int(checkpoint.extra.get("step", 0))
        self.epoch = int(checkpoint.extra.get("epoch", 0))
        self.epoch_losses = [float(v) for v in checkpoint.extra.get("epoch_losses", [])]
        self.step_losses = [float(v) for v in checkpoint.extra.get("step_losses", [])]
        if self.step > 0:
            restore_adam_state(self.optimizer, self.model, checkpoint, self.step)
        logger.info(f"Resumed pre-training from {path} at epoch {self.epoch}, step {self.step}")


def load_mae_model(path, model_config: Optional[ModelConfig] = None) -> Tuple[MaeModel, ModelConfig]:
    """Rebuild a MaeModel from a checkpoint; dims come from its config snapshot unless given."""
    checkpoint = load_checkpoint(path, kind=KIND_MAE)
    if model_config is None:
        snapshot = (checkpoint.config or {}).get("model")
        if snapshot is None:
            raise ConfigError(f"{path}: checkpoint carries no model configuration")
        model_config = ModelConfig.model_validate(snapshot)
    model = MaeModel.from_config(model_config)
    weights = {k: v for k, v in checkpoint.tensors.items() if not k.startswith("optim.")}
    load_module_tensors(model, weights)
    model.eval()
    return model, model_config
