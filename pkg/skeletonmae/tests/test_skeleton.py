"""
Unit tests for the skeleton topology
Tests the COCO-17 layout, adjacency normalization and sequence validation
"""

import numpy as np
import pytest
import torch

from skeletonmae.pipeline.errors import AdjacencyError, LayoutError, SequenceValidationError
from skeletonmae.pipeline.skeleton import (
    Adjacency,
    SkeletonSequence,
    build_coco17_layout,
    build_layout,
    edge_regions_adjacent,
    normalize_adjacency,
    raw_from_normalized,
    validate_sequence,
)


class TestLayout:
    """Test suite for the fixed joint layout"""

    @pytest.fixture
    def layout(self):
        return build_coco17_layout()

    def test_region_sizes(self, layout):
        """Test region sizes are (5, 4, 2, 2, 2, 2)"""
        sizes = tuple(len(layout.part_partition[r]) for r in range(6))
        assert sizes == (5, 4, 2, 2, 2, 2)

    def test_partition_covers_joints(self, layout):
        """Test regions are disjoint and cover every joint"""
        joints = [j for r in range(6) for j in layout.part_partition[r]]
        assert sorted(joints) == list(range(17))

    def test_right_arm(self, layout):
        """Test region 3 is the right arm"""
        assert layout.joints_in([3]) == (8, 10)

    def test_edges_join_adjacent_regions(self, layout):
        """Test every edge stays within or between touching regions"""
        assert edge_regions_adjacent(layout)
        assert len(layout.edges) == 18

    def test_unknown_region(self, layout):
        """Test joints_in rejects region ids outside the partition"""
        with pytest.raises(LayoutError):
            layout.joints_in([6])

    def test_overlapping_regions_rejected(self):
        """Test a joint in two regions is a layout error"""
        with pytest.raises(LayoutError):
            build_layout(3, [(0, 1)], {0: [0, 1], 1: [1, 2]})

    def test_uncovered_joint_rejected(self):
        """Test a joint outside every region is a layout error"""
        with pytest.raises(LayoutError):
            build_layout(3, [(0, 1)], {0: [0, 1]})

    def test_self_loop_edge_rejected(self):
        """Test self-loop edges are rejected"""
        with pytest.raises(LayoutError):
            build_layout(2, [(1, 1)], {0: [0, 1]})


class TestAdjacency:
    """Test suite for raw and normalized adjacency"""

    def test_two_node_edge(self):
        """Test a single edge normalizes to 0.5 everywhere"""
        layout = build_layout(2, [(0, 1)], {0: [0, 1]})
        normalized = normalize_adjacency(layout.adjacency())
        assert normalized.normalized
        assert torch.allclose(normalized.matrix, torch.full((2, 2), 0.5, dtype=torch.float64), atol=1e-15)

    def test_single_node(self):
        """Test an edgeless 1-node graph normalizes to [[1]]"""
        layout = build_layout(1, [], {0: [0]})
        assert normalize_adjacency(layout.adjacency()).matrix.tolist() == [[1.0]]

    def test_coco_normalized_properties(self):
        """Test symmetry and spectral bound of the COCO-17 normalized matrix"""
        matrix = normalize_adjacency(build_coco17_layout().adjacency()).matrix
        assert float((matrix - matrix.T).abs().max()) < 1e-12
        assert float(torch.linalg.eigvalsh(matrix).max()) <= 1.0 + 1e-9

    def test_normalization_is_repeatable(self):
        """Test normalizing the same raw matrix twice gives identical values"""
        raw = build_coco17_layout().adjacency()
        assert torch.equal(normalize_adjacency(raw).matrix, normalize_adjacency(raw).matrix)

    def test_asymmetric_rejected(self):
        """Test an asymmetric raw matrix raises AdjacencyError"""
        matrix = torch.tensor([[0.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        with pytest.raises(AdjacencyError):
            normalize_adjacency(Adjacency(matrix))

    def test_double_normalization_rejected(self):
        """Test normalizing an already normalized matrix raises"""
        normalized = normalize_adjacency(build_coco17_layout().adjacency())
        with pytest.raises(AdjacencyError):
            normalize_adjacency(normalized)

    def test_raw_pattern_recovered(self):
        """Test the binary pattern comes back from the normalized form"""
        raw = build_coco17_layout().adjacency()
        assert torch.equal(raw_from_normalized(normalize_adjacency(raw)).matrix, raw.matrix)

    def test_non_square_rejected(self):
        """Test a non-square matrix is not an adjacency"""
        with pytest.raises(AdjacencyError):
            Adjacency(torch.zeros(2, 3))


class TestValidateSequence:
    """Test suite for sequence validation"""

    @pytest.fixture
    def layout(self):
        return build_coco17_layout()

    def test_valid_sequence(self, layout):
        """Test a 1-person, 64-frame sequence validates"""
        seq = SkeletonSequence(persons=np.random.default_rng(0).normal(size=(1, 64, 17, 2)), label=0)
        validate_sequence(seq, layout)
        assert seq.validated

    def test_joint_count_mismatch(self, layout):
        """Test a 16-joint frame names the N mismatch"""
        seq = SkeletonSequence(persons=np.zeros((1, 4, 16, 2)), label=0)
        with pytest.raises(SequenceValidationError) as exc:
            validate_sequence(seq, layout)
        assert "N=17" in str(exc.value)

    def test_nan_location(self, layout):
        """Test a NaN is reported with its frame and joint"""
        persons = np.zeros((1, 8, 17, 2))
        persons[0, 3, 9, 1] = np.nan
        with pytest.raises(SequenceValidationError) as exc:
            validate_sequence(SkeletonSequence(persons=persons, label=0), layout)
        assert exc.value.frame == 3
        assert exc.value.joint == 9
        assert "frame 3" in str(exc.value)

    def test_three_persons_rejected(self, layout):
        """Test person counts outside 1..2 are rejected"""
        with pytest.raises(SequenceValidationError):
            validate_sequence(SkeletonSequence(persons=np.zeros((3, 4, 17, 2)), label=0), layout)

    def test_confidence_range(self, layout):
        """Test confidence values outside [0, 1] are rejected"""
        confidence = np.ones((4, 17))
        confidence[2, 5] = 1.5
        seq = SkeletonSequence(persons=np.zeros((1, 4, 17, 2)), label=0, confidence=confidence)
        with pytest.raises(SequenceValidationError) as exc:
            validate_sequence(seq, layout)
        assert (exc.value.frame, exc.value.joint) == (2, 5)

    def test_negative_label(self, layout):
        """Test negative labels are rejected"""
        with pytest.raises(SequenceValidationError):
            validate_sequence(SkeletonSequence(persons=np.zeros((1, 4, 17, 2)), label=-1), layout)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
