"""
Experiment Grids
Pre-train / fine-tune / evaluate cells over masking strategies and model variants, tabulated with pandas
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .checkpoint import KIND_MAE, Checkpoint, module_tensors
from .data import SkeletonDataset, pretraining_frames
from .errors import OutputWriteError
from .masking import RANDOM, MaskSpec, masked_joint_count
from .numerics import seed_everything
from .run_config import RunConfig, parse_run_config
from .skeleton import SkeletonLayout
from .skeleton_mae import MaeModel, SkeletonMAETrainer
from .strl import EvaluationResult, SSLFinetuner, SslModel, load_pretrained

logger = logging.getLogger(__name__)

MASKING_COLUMNS = ["strategy", "seed", "top1", "mean_top1", "masked_joints"]
VARIANT_COLUMNS = ["axis", "value", "seed", "init", "top1", "mean_top1"]


@dataclass
class CellResult:
    evaluation: EvaluationResult
    pretrain_losses: List[float]
    train_accuracy: float


def expected_masked_joints(spec: MaskSpec, layout: SkeletonLayout) -> float:
    """Masked joints per sample: exact for fixed and random masks, the expectation for sampled regions."""
    if spec.strategy == RANDOM:
        return float(masked_joint_count(spec.ratio, layout.joint_count))
    if spec.regions:
        return float(len(layout.joints_in(spec.regions)))
    return spec.sample_regions * layout.joint_count / layout.region_count


def run_cell(run: RunConfig, train: SkeletonDataset, test: SkeletonDataset, seed: int,
             mask: Optional[MaskSpec] = None, pretrained: bool = True) -> CellResult:
    """
    One grid cell: optional pre-training, fine-tuning, then evaluation on `test`.

    The classifier is initialized from the seed alone, so the pretrained and random arms of a
    seed differ only in the loaded encoder weights.
    """
    layout = train.layout
    mask = mask or run.mask.to_spec(seed)
    generator = seed_everything(seed)
    ssl = SslModel.from_config(run.model, train.class_count, generator=generator)

    losses: List[float] = []
    if pretrained:
        mae_generator = torch.Generator()
        mae_generator.manual_seed(seed)
        mae = MaeModel.from_config(run.model, generator=mae_generator)
        trainer = SkeletonMAETrainer(mae, layout, run.pretrain, mask, seed=seed)
        losses = trainer.pretrain(pretraining_frames(train)).epoch_losses
        checkpoint = Checkpoint(kind=KIND_MAE, tensors=module_tensors(mae), path="<in-memory>")
        load_pretrained(ssl, checkpoint, load_embedding=run.finetune.load_embedding)

    finetuner = SSLFinetuner(ssl, run.finetune, layout=layout, seed=seed)
    report = finetuner.finetune(train, test)
    evaluation = EvaluationResult(
        top1=report.test["top1"],
        mean_top1=report.test["mean_top1"],
        confusion=np.asarray(report.test["confusion"], dtype=np.int64),
        count=report.test["count"],
    )
    return CellResult(
        evaluation=evaluation,
        pretrain_losses=losses,
        train_accuracy=report.epoch_accuracies[-1] if report.epoch_accuracies else 0.0,
    )


def _summarize(frame: pd.DataFrame, keys: List[str]) -> pd.DataFrame:
    return frame.groupby(keys, sort=False)[["top1", "mean_top1"]].mean().reset_index()


def _write(frame: pd.DataFrame, summary: pd.DataFrame, out_dir, name: str) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    table_path = out_dir / f"{name}.csv"
    summary_path = out_dir / f"{name}_summary.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(table_path, index=False)
        summary_path.write_text(
            json.dumps(summary.to_dict(orient="records"), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    except OSError as e:
        raise OutputWriteError(out_dir, e) from None
    logger.info(f"Wrote {len(frame)} rows to {table_path}")
    return table_path, summary_path


def compare_masking(run: RunConfig, train: SkeletonDataset, test: SkeletonDataset,
                    strategies: Sequence[MaskSpec], seeds: Sequence[int],
                    out_dir=None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Pre-train, fine-tune and evaluate every strategy under every seed.

    Returns:
        (per-cell table, per-strategy means)
    """
    rows = []
    for spec in strategies:
        spec.validate(train.layout)
        for seed in seeds:
            cell = run_cell(run, train, test, seed, mask=spec)
            rows.append({
                "strategy": spec.label,
                "seed": seed,
                "top1": cell.evaluation.top1,
                "mean_top1": cell.evaluation.mean_top1,
                "masked_joints": expected_masked_joints(spec, train.layout),
            })
            logger.info(f"compare-masking {spec.label} seed={seed}: top1={cell.evaluation.top1:.4f}")

    frame = pd.DataFrame(rows, columns=MASKING_COLUMNS)
    summary = _summarize(frame, ["strategy"])
    if out_dir is not None:
        _write(frame, summary, out_dir, "compare_masking")
    return frame, summary


def _with_model(run: RunConfig, **changes) -> RunConfig:
    data = run.model_dump(mode="json")
    data["model"].update(changes)
    return parse_run_config(data, source="variant grid")


def variant_grid(run: RunConfig) -> List[Tuple[str, object, RunConfig]]:
    """(axis, value, config) for every one-axis change of the base config."""
    experiment = run.experiment
    grid: List[Tuple[str, object, RunConfig]] = []
    grid += [("backbone", b, _with_model(run, backbone=b)) for b in experiment.backbones]
    grid += [("encoder_depth", d, _with_model(run, encoder_depth=d)) for d in experiment.encoder_depths]
    grid += [("strl_layers", m, _with_model(run, strl_layers=m)) for m in experiment.strl_layers]
    if not grid:
        grid.append(("base", "base", run))
    return grid


def compare_variants(run: RunConfig, train: SkeletonDataset, test: SkeletonDataset, seeds: Sequence[int],
                     out_dir=None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Ablation over backbone, encoder depth and STRL depth, optionally against random initialization."""
    inits: Dict[str, bool] = {"pretrained": True}
    if run.experiment.compare_init:
        inits["random"] = False

    rows = []
    for axis, value, variant in variant_grid(run):
        for seed in seeds:
            for init, pretrained in inits.items():
                cell = run_cell(variant, train, test, seed, pretrained=pretrained)
                rows.append({
                    "axis": axis,
                    "value": str(value),
                    "seed": seed,
                    "init": init,
                    "top1": cell.evaluation.top1,
                    "mean_top1": cell.evaluation.mean_top1,
                })
                logger.info(f"compare-variants {axis}={value} seed={seed} init={init}: top1={cell.evaluation.top1:.4f}")

    frame = pd.DataFrame(rows, columns=VARIANT_COLUMNS)
    summary = _summarize(frame, ["axis", "value", "init"])
    if out_dir is not None:
        _write(frame, summary, out_dir, "compare_variants")
    return frame, summary
