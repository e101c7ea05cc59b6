"""
Skeleton Sequence Learning
STRL layers built from pre-trained graph encoders, multi-scale temporal pooling,
the classification head and its fine-tuning loop
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
import torch.nn.functional as F

from . import numerics
from .backbones import GAT, PRELU, GraphTopology, Linear, build_encoder
from .checkpoint import (
    KIND_MAE,
    KIND_SSL,
    Checkpoint,
    load_checkpoint,
    load_module_tensors,
    module_tensors,
    save_checkpoint,
)
from .data import SkeletonDataset, add_pixel_noise
from .errors import ConfigError, EmptyDatasetError, LabelError, LayerConfigError, NonFiniteLossError, ShapeMismatchError
from .run_config import FinetuneConfig, ModelConfig
from .skeleton import MAX_PERSONS, SkeletonLayout, build_coco17_layout
from .skeleton_mae import SkeletonEmbedding

logger = logging.getLogger(__name__)

POSITION_INIT_STD = 0.02
CHECKPOINT_NAME = "model.skmae"


class SmBlock(nn.Module):
    """
    Spatial modeling block: encode the joints, sum-pool them, repeat the pooled vector
    to every joint, project it back to the layer width and add the input.
    """

    def __init__(self, encoder: nn.Module, width: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        if encoder.in_dim != width:
            raise LayerConfigError(f"SM encoder expects width {encoder.in_dim}, layer width is {width}")
        self.width = width
        self.encoder = encoder
        self.residual_proj = Linear(encoder.out_dim, width, bias=False, generator=generator)

    def forward(self, h: torch.Tensor, topology: GraphTopology) -> torch.Tensor:
        if h.shape[-1] != self.width:
            raise ShapeMismatchError("sm_forward", h.shape, (topology.joint_count, self.width))
        g = self.encoder(h, topology)
        pooled = g.sum(dim=-2, keepdim=True)
        repeated = pooled.expand(*g.shape[:-1], pooled.shape[-1])
        return self.residual_proj(repeated) + h


def sm_forward(block: SmBlock, h: torch.Tensor, adjacency) -> torch.Tensor:
    topology = adjacency if isinstance(adjacency, GraphTopology) else GraphTopology.from_adjacency(adjacency)
    return block(h, topology)


class StrlLayer(nn.Module):
    """
    One SM block per person, person features summed, then ReLU(merged W).

    layer_norm inserts a LayerNorm over the feature axis before the ReLU; off by default.
    """

    def __init__(self, blocks: Sequence[SmBlock], width: int, generator: Optional[torch.Generator] = None,
                 layer_norm: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.weight = Linear(width, width, bias=False, generator=generator)
        self.norm = nn.LayerNorm(width) if layer_norm else None

    def forward(self, x: torch.Tensor, topology: GraphTopology) -> torch.Tensor:
        """(B, P, T, N, D) person streams -> (B, T, N, D) merged stream."""
        if x.shape[1] != len(self.blocks):
            raise ShapeMismatchError("strl_layer", x.shape, (len(self.blocks),))
        merged = sum(block(x[:, p], topology) for p, block in enumerate(self.blocks))
        out = self.weight(merged)
        if self.norm is not None:
            out = self.norm(out)
        return numerics.relu(out)


class MultiScaleTemporalPool(nn.Module):
    """Average pooling with windows T, T/2 and T/4, the 7 segments concatenated and projected to D"""

    def __init__(self, frames: int, width: int, generator: Optional[torch.Generator] = None):
        super().__init__()
        if frames < 4 or frames % 4 != 0:
            raise LayerConfigError(f"Multi-scale temporal pooling needs T divisible by 4, got {frames}")
        self.frames = frames
        self.windows = (frames, frames // 2, frames // 4)
        self.segments = sum(frames // w for w in self.windows)
        self.proj = Linear(self.segments * width, width, generator=generator)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """(B, T, N, D) -> (B, N, D)."""
        batch, frames, joints, width = h.shape
        if frames != self.frames:
            raise ShapeMismatchError("temporal_pool", h.shape, (self.frames,))
        segments = []
        for window in self.windows:
            pooled = h.reshape(batch, frames // window, window, joints, width).mean(dim=2)
            segments.extend(pooled.unbind(dim=1))
        return self.proj(numerics.concat(segments, axis=-1))


class SslModel(nn.Module):
    """
    Skeleton sequence classifier.

    Input coordinates (B, 2, T, N, 2) are embedded, offset by a learnable per-frame position
    embedding, passed through M STRL layers, pooled over time and joints, and mapped to logits.
    """

    def __init__(self, class_count: int, frames: int, embed_dim: int, hidden_dim: int, encoder_depth: int,
                 strl_layers: int, backbone: str = "gin", gat_heads: int = 1, persons: int = MAX_PERSONS,
                 generator: Optional[torch.Generator] = None, strl_layer_norm: bool = False):
        super().__init__()
        if strl_layers < 1:
            raise LayerConfigError(f"STRL depth must be >= 1, got {strl_layers}")
        if persons != MAX_PERSONS:
            raise LayerConfigError(f"Person count is fixed at {MAX_PERSONS}, got {persons}")
        if class_count < 1:
            raise LayerConfigError(f"Class count must be >= 1, got {class_count}")
        self.class_count = class_count
        self.frames = frames
        self.persons = persons
        self.embedding = SkeletonEmbedding(embed_dim, generator=generator)
        self.position = nn.Parameter(torch.randn(frames, embed_dim, generator=generator) * POSITION_INIT_STD)

        def block() -> SmBlock:
            encoder = build_encoder(backbone, embed_dim, hidden_dim, encoder_depth, gat_heads=gat_heads,
                                    activation=PRELU, generator=generator)
            return SmBlock(encoder, embed_dim, generator=generator)

        self.layers = nn.ModuleList(
            StrlLayer([block() for _ in range(persons)], embed_dim, generator=generator,
                      layer_norm=strl_layer_norm)
            for _ in range(strl_layers)
        )
        self.pool = MultiScaleTemporalPool(frames, embed_dim, generator=generator)
        self.head = Linear(embed_dim, class_count, generator=generator)

    @classmethod
    def from_config(cls, model: ModelConfig, class_count: int,
                    generator: Optional[torch.Generator] = None) -> "SslModel":
        heads = model.gat_heads if model.backbone == GAT else 1
        return cls(class_count, model.frames, model.embed_dim, model.hidden_dim, model.encoder_depth,
                   model.strl_layers, backbone=model.backbone, gat_heads=heads, persons=model.persons,
                   generator=generator, strl_layer_norm=model.strl_layer_norm)

    @property
    def dtype(self) -> torch.dtype:
        return self.position.dtype

    def blocks(self) -> List[SmBlock]:
        return [block for layer in self.layers for block in layer.blocks]

    def forward_embedded(self, x: torch.Tensor, topology: GraphTopology) -> torch.Tensor:
        """(B, P, T, N, D) embedded persons -> (B, C) logits."""
        if x.dim() != 5 or x.shape[1] != self.persons or x.shape[2] != self.frames:
            raise ShapeMismatchError("strl_forward", x.shape, (self.persons, self.frames, topology.joint_count))
        h = x + self.position[None, None, :, None, :]
        for layer in self.layers:
            merged = layer(h, topology)
            h = merged.unsqueeze(1).expand(-1, self.persons, -1, -1, -1)
        pooled = self.pool(merged)
        return self.head(pooled.sum(dim=-2))

    def forward(self, coords: torch.Tensor, topology: GraphTopology) -> torch.Tensor:
        return self.forward_embedded(self.embedding(coords.to(self.dtype)), topology)


def strl_forward(model: SslModel, pair: torch.Tensor, topology: Optional[GraphTopology] = None) -> torch.Tensor:
    """Logits (C,) of one embedded person pair laid out (2, N, T, D)."""
    topology = topology or GraphTopology.from_layout(build_coco17_layout())
    if pair.dim() != 4:
        raise ShapeMismatchError("strl_forward", pair.shape, (MAX_PERSONS, topology.joint_count, model.frames))
    return model.forward_embedded(pair.permute(0, 2, 1, 3).unsqueeze(0), topology)[0]


def predict(logits: torch.Tensor) -> np.ndarray:
    """Arg-max class per row; ties resolve to the lowest index."""
    return np.argmax(logits.detach().cpu().numpy(), axis=-1)


# Learning-rate schedule

def lr_factor(epoch: int, cfg: FinetuneConfig) -> float:
    """Multiplier of the base lr at a 0-indexed epoch: linear warmup, then step decay."""
    if epoch < cfg.warmup_epochs:
        start = cfg.warmup_start_factor
        return start + (1.0 - start) * epoch / cfg.warmup_epochs
    return cfg.decay_factor ** sum(1 for d in cfg.decay_epochs if d <= epoch)


def lr_at(epoch: int, cfg: FinetuneConfig) -> float:
    return cfg.lr * lr_factor(epoch, cfg)


# Evaluation

@dataclass
class EvaluationResult:
    top1: float
    mean_top1: float
    confusion: np.ndarray
    count: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "top1": self.top1,
            "mean_top1": self.mean_top1,
            "confusion": self.confusion.tolist(),
            "count": self.count,
        }


def score_predictions(predictions: Sequence[int], labels: Sequence[int], class_count: int) -> EvaluationResult:
    """Top-1, mean per-class recall over supported classes, and the (true, predicted) confusion matrix."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyDatasetError("Cannot evaluate an empty dataset")
    if labels.min() < 0 or labels.max() >= class_count:
        raise LabelError(f"Labels must lie in 0..{class_count - 1}, found {labels.min()}..{labels.max()}")

    confusion = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    support = confusion.sum(axis=1)
    recalls = np.diag(confusion)[support > 0] / support[support > 0]
    return EvaluationResult(
        top1=float(np.trace(confusion) / labels.size),
        mean_top1=float(recalls.mean()),
        confusion=confusion,
        count=int(labels.size),
    )


def evaluate(model: SslModel, dataset: SkeletonDataset, layout: Optional[SkeletonLayout] = None,
             batch_size: int = 128) -> EvaluationResult:
    """Top-1 and mean top-1 accuracy of `model` over every sequence of `dataset`."""
    if len(dataset) == 0:
        raise EmptyDatasetError("Cannot evaluate an empty dataset")
    topology = GraphTopology.from_layout(layout or dataset.layout)
    predictions = []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            indices = range(start, min(start + batch_size, len(dataset)))
            coords = torch.as_tensor(dataset.coords(indices), dtype=model.dtype)
            predictions.append(predict(model(coords, topology)))
    model.train(was_training)
    return score_predictions(np.concatenate(predictions), dataset.labels, model.class_count)


# Fine-tuning

def load_pretrained(model: SslModel, checkpoint: Checkpoint, load_embedding: bool = True) -> None:
    """Copy a pre-trained encoder into every SM block (and optionally the input embedding)."""
    if checkpoint.kind != KIND_MAE:
        raise ConfigError(f"{checkpoint.path}: expected a pre-training checkpoint, found '{checkpoint.kind}'")
    encoder = checkpoint.subset("encoder")
    for block in model.blocks():
        load_module_tensors(block.encoder, encoder, prefix="encoder")
    if load_embedding:
        load_module_tensors(model.embedding, checkpoint.subset("embedding"), prefix="embedding")
    logger.info(f"Loaded pre-trained encoder into {len(model.blocks())} SM blocks from {checkpoint.path}")


@dataclass
class FinetuneReport:
    epoch_losses: List[float] = field(default_factory=list)
    epoch_accuracies: List[float] = field(default_factory=list)
    learning_rates: List[float] = field(default_factory=list)
    test: Optional[Dict[str, Any]] = None
    pretrained: str = "none"
    checkpoint_path: Optional[str] = None
    wall_time: float = 0.0
    steps: int = 0

    @property
    def test_top1(self) -> Optional[float]:
        return None if self.test is None else self.test["top1"]

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class SSLFinetuner:
    """SGD-with-momentum fine-tuning under a warmup/step-decay schedule and label-smoothed cross-entropy"""

    def __init__(self, model: SslModel, cfg: FinetuneConfig, layout: Optional[SkeletonLayout] = None,
                 seed: int = 0, run_snapshot: Optional[Dict[str, Any]] = None):
        self.model = model
        self.cfg = cfg
        self.layout = layout or build_coco17_layout()
        self.topology = GraphTopology.from_layout(self.layout)
        self.seed = seed
        self.run_snapshot = run_snapshot
        self.optimizer = torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                                         weight_decay=cfg.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.LambdaLR(self.optimizer, lambda e: lr_factor(e, cfg))
        self.step = 0
        self.pretrained = "none"

    def load_pretrained(self, path) -> None:
        load_pretrained(self.model, load_checkpoint(path), load_embedding=self.cfg.load_embedding)
        self.pretrained = str(path)

    def loss(self, coords: torch.Tensor, labels: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        logits = self.model(coords, self.topology)
        loss = F.cross_entropy(logits, labels, label_smoothing=self.cfg.label_smoothing)
        return loss, logits

    def check_labels(self, labels: np.ndarray) -> None:
        bad = (labels < 0) | (labels >= self.model.class_count)
        if bad.any():
            index = int(np.flatnonzero(bad)[0])
            raise LabelError(f"Label {labels[index]} of record {index} outside 0..{self.model.class_count - 1}")

    def train_epoch(self, dataset: SkeletonDataset, epoch: int) -> Tuple[float, float]:
        rng = np.random.default_rng([self.seed, epoch])
        order = rng.permutation(len(dataset))
        labels_all = dataset.labels
        total_loss, correct = 0.0, 0
        self.model.train()
        for start in range(0, len(order), self.cfg.batch_size):
            indices = order[start:start + self.cfg.batch_size]
            coords = dataset.coords(indices)
            if self.cfg.noise_sigma > 0:
                coords = add_pixel_noise(coords, self.cfg.noise_sigma, rng)
            labels = torch.as_tensor(labels_all[indices], dtype=torch.long)

            self.optimizer.zero_grad(set_to_none=True)
            loss, logits = self.loss(torch.as_tensor(coords, dtype=self.model.dtype), labels)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise NonFiniteLossError(self.step, value)
            numerics.backward(loss)
            self.optimizer.step()
            self.step += 1

            total_loss += value * len(indices)
            correct += int((predict(logits) == labels.numpy()).sum())
        return total_loss / len(order), correct / len(order)

    def finetune(self, train: SkeletonDataset, test: Optional[SkeletonDataset] = None, out_dir=None) -> FinetuneReport:
        """
        Fine-tune on `train` for cfg.epochs epochs, then evaluate on `test`.

        Args:
            train: labeled training split
            test: optional held-out split evaluated after the last epoch
            out_dir: directory receiving model.skmae; None skips saving

        Returns:
            FinetuneReport
        """
        if len(train) == 0:
            raise EmptyDatasetError("Fine-tuning dataset is empty")
        self.check_labels(train.labels)
        report = FinetuneReport(pretrained=self.pretrained)
        started = time.perf_counter()

        for epoch in range(self.cfg.epochs):
            lr = self.optimizer.param_groups[0]["lr"]
            loss, accuracy = self.train_epoch(train, epoch)
            self.scheduler.step()
            report.epoch_losses.append(loss)
            report.epoch_accuracies.append(accuracy)
            report.learning_rates.append(lr)
            logger.info(
                f"Finetune epoch {epoch + 1}/{self.cfg.epochs}: loss={loss:.4f} acc={accuracy:.4f} lr={lr:.6g}"
            )

        if test is not None:
            self.check_labels(test.labels)
            result = evaluate(self.model, test, self.layout)
            report.test = result.to_dict()
            logger.info(f"Test top1={result.top1:.4f} mean_top1={result.mean_top1:.4f}")

        if out_dir is not None:
            report.checkpoint_path = str(self.save(Path(out_dir) / CHECKPOINT_NAME))
        report.steps = self.step
        report.wall_time = time.perf_counter() - started
        return report

    def save(self, path) -> Path:
        extra = {"class_count": self.model.class_count, "pretrained": self.pretrained, "seed": self.seed}
        return save_checkpoint(path, module_tensors(self.model), KIND_SSL, config=self.run_snapshot, extra=extra)


def load_ssl_model(path) -> SslModel:
    """Rebuild a fine-tuned SslModel from its checkpoint."""
    checkpoint = load_checkpoint(path, kind=KIND_SSL)
    snapshot = (checkpoint.config or {}).get("model")
    if snapshot is None:
        raise ConfigError(f"{path}: checkpoint carries no model configuration")
    class_count = checkpoint.extra.get("class_count")
    if class_count is None:
        raise ConfigError(f"{path}: checkpoint does not record its class count")
    model = SslModel.from_config(ModelConfig.model_validate(snapshot), int(class_count))
    load_module_tensors(model, checkpoint.tensors)
    model.eval()
    return model
