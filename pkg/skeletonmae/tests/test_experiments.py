"""
Tests for experiment grids
Unit tests run tiny cells; the integration class runs the desk-scale checks (pytest -m integration)
"""

import numpy as np
import pandas as pd
import pytest

from skeletonmae.pipeline.data import SkeletonDataset, SynthSpec, pretraining_frames, synthesize
from skeletonmae.pipeline.experiments import (
    MASKING_COLUMNS,
    VARIANT_COLUMNS,
    compare_masking,
    compare_variants,
    expected_masked_joints,
    run_cell,
    variant_grid,
)
from skeletonmae.pipeline.masking import RANDOM, MaskSpec
from skeletonmae.pipeline.numerics import seed_everything
from skeletonmae.pipeline.run_config import parse_run_config
from skeletonmae.pipeline.skeleton import build_coco17_layout
from skeletonmae.pipeline.skeleton_mae import MaeModel, SkeletonMAETrainer


def tiny_run(**experiment):
    return parse_run_config({
        "model": {"frames": 4, "embed_dim": 4, "hidden_dim": 4, "encoder_depth": 1, "strl_layers": 1},
        "pretrain": {"epochs": 1, "batch_size": 16, "lr": 1e-3},
        "finetune": {"epochs": 1, "warmup_epochs": 0, "decay_epochs": [], "batch_size": 8, "lr": 0.01},
        "experiment": experiment,
    })


def splits(spec, frames):
    train, test = synthesize(spec)
    return (
        SkeletonDataset.from_sequences(train, class_count=spec.class_count, frames=frames),
        SkeletonDataset.from_sequences(test, class_count=spec.class_count, split="test", frames=frames),
    )


@pytest.fixture
def tiny_splits():
    return splits(SynthSpec(class_count=3, sequences_per_class=4, frame_count=8), frames=4)


class TestCompareMasking:
    """Test suite for the masking strategy grid"""

    def test_table_shape(self, tiny_splits, tmp_path):
        """Test one row per strategy and seed plus the written CSV and summary"""
        train, test = tiny_splits
        strategies = [MaskSpec(strategy=RANDOM, ratio=0.5), MaskSpec(regions=(3, 5))]
        frame, summary = compare_masking(tiny_run(), train, test, strategies, seeds=[0, 1], out_dir=tmp_path)
        assert list(frame.columns) == MASKING_COLUMNS
        assert len(frame) == 4
        assert frame.loc[frame.strategy == "random(0.5)", "masked_joints"].tolist() == [9.0, 9.0]
        assert frame.loc[frame.strategy == "body_parts(3,5)", "masked_joints"].tolist() == [4.0, 4.0]
        assert summary.strategy.tolist() == ["random(0.5)", "body_parts(3,5)"]
        written = pd.read_csv(tmp_path / "compare_masking.csv")
        assert len(written) == 4
        assert (tmp_path / "compare_masking_summary.json").exists()

    def test_repeated_cells_identical(self, tiny_splits):
        """Test the same strategy and seed reproduce the same accuracy"""
        train, test = tiny_splits
        spec = MaskSpec(regions=(2,))
        frame, _ = compare_masking(tiny_run(), train, test, [spec, spec], seeds=[3])
        assert frame.top1.iloc[0] == frame.top1.iloc[1]
        assert frame.mean_top1.iloc[0] == frame.mean_top1.iloc[1]

    def test_expected_masked_joints(self):
        """Test masked joint counts reported per strategy"""
        layout = build_coco17_layout()
        assert expected_masked_joints(MaskSpec(strategy=RANDOM, ratio=0.7), layout) == 12.0
        assert expected_masked_joints(MaskSpec(regions=(0,)), layout) == 5.0
        assert expected_masked_joints(MaskSpec(sample_regions=2), layout) == pytest.approx(2 * 17 / 6)


class TestVariants:
    """Test suite for the ablation grid"""

    def test_grid_axes(self):
        """Test each configured axis value becomes one validated variant"""
        grid = variant_grid(tiny_run(backbones=["gcn", "gat"], encoder_depths=[2], strl_layers=[2]))
        assert [(axis, value) for axis, value, _ in grid] == [
            ("backbone", "gcn"), ("backbone", "gat"), ("encoder_depth", 2), ("strl_layers", 2),
        ]
        assert grid[1][2].model.backbone == "gat"
        assert grid[2][2].model.encoder_depth == 2

    def test_empty_grid_is_base(self):
        """Test no axes fall back to the base config"""
        run = tiny_run()
        assert variant_grid(run) == [("base", "base", run)]

    def test_compare_init(self, tiny_splits, tmp_path):
        """Test pretrained and random arms are both tabulated"""
        train, test = tiny_splits
        frame, summary = compare_variants(tiny_run(compare_init=True), train, test, seeds=[0], out_dir=tmp_path)
        assert list(frame.columns) == VARIANT_COLUMNS
        assert frame.init.tolist() == ["pretrained", "random"]
        assert len(summary) == 2
        assert (tmp_path / "compare_variants.csv").exists()

    def test_cell_reports_losses(self, tiny_splits):
        """Test a pretrained cell carries its pre-training losses"""
        train, test = tiny_splits
        cell = run_cell(tiny_run(), train, test, seed=0)
        assert len(cell.pretrain_losses) == 1
        assert 0.0 <= cell.evaluation.top1 <= 1.0
        assert run_cell(tiny_run(), train, test, seed=0, pretrained=False).pretrain_losses == []


@pytest.mark.integration
class TestDeskScale:
    """Desk-scale runs on the synthetic 4-class dataset"""

    @pytest.fixture(scope="class")
    def desk_splits(self):
        return splits(SynthSpec(class_count=4, sequences_per_class=50), frames=16)

    def desk_run(self, epochs=30, compare_init=False):
        return parse_run_config({
            "experiment": {"compare_init": compare_init},
            "model": {"frames": 16, "embed_dim": 16, "hidden_dim": 16, "encoder_depth": 3, "strl_layers": 1},
            "pretrain": {"epochs": 20, "batch_size": 256, "lr": 1e-3},
            "finetune": {"epochs": epochs, "warmup_epochs": 5, "decay_epochs": [epochs - 5],
                         "batch_size": 16, "lr": 0.01},
        })

    def test_pretraining_converges(self, desk_splits):
        """Test 50 epochs halve the mean epoch loss"""
        train, _ = desk_splits
        run = self.desk_run()
        generator = seed_everything(0)
        model = MaeModel.from_config(run.model, generator=generator)
        cfg = run.pretrain.model_copy(update={"epochs": 50})
        trainer = SkeletonMAETrainer(model, train.layout, cfg, run.mask.to_spec(0), seed=0)
        losses = trainer.pretrain(pretraining_frames(train)).epoch_losses
        assert np.mean(losses[-5:]) < 0.5 * np.mean(losses[:5])

    def test_pretraining_helps(self, desk_splits):
        """Test loaded encoders are not worse than random init over 5 seeds"""
        train, test = desk_splits
        frame, _ = compare_variants(self.desk_run(compare_init=True), train, test, seeds=range(5))
        pretrained = frame[frame.init == "pretrained"].top1.to_numpy()
        random = frame[frame.init == "random"].top1.to_numpy()
        assert pretrained.mean() >= random.mean() - 0.01
        assert int((pretrained > random).sum()) >= 3

    def test_masking_comparison(self, desk_splits, tmp_path):
        """Test body-part and random masking over 5 seeds produce a full table"""
        train, test = desk_splits
        strategies = [MaskSpec(regions=(3, 5)), MaskSpec(strategy=RANDOM, ratio=0.5)]
        frame, summary = compare_masking(self.desk_run(), train, test, strategies, seeds=range(5), out_dir=tmp_path)
        assert len(frame) == 10
        assert frame[["top1", "mean_top1"]].notna().all().all()
        assert len(pd.read_csv(tmp_path / "compare_masking.csv")) == 10
        assert set(summary.strategy) == {"body_parts(3,5)", "random(0.5)"}


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
