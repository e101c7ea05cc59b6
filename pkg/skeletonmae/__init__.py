"""SkeletonMAE pre-training and Skeleton Sequence Learning fine-tuning."""

__version__ = "1.0.0"
