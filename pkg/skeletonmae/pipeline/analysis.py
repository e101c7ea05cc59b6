"""
Representation Analysis
Masked reconstructions mapped back to coordinates, and pooled encoder embeddings for plotting
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple

import numpy as np
import torch
from sklearn.decomposition import PCA

from .backbones import GraphTopology
from .data import SkeletonDataset
from .errors import ConfigError, OutputWriteError, SingularEmbeddingError
from .masking import MaskSpec, mask_matrix, resolve_mask
from .skeleton_mae import MaeModel, SkeletonEmbedding, cosine_similarity

logger = logging.getLogger(__name__)


def embedding_inverse(embedding: SkeletonEmbedding) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Pseudo-inverse of the 2 -> D input embedding.

    Returns:
        (pinv of shape (D, 2), bias of shape (D,))

    Raises:
        SingularEmbeddingError: when the embedding weight has rank < 2
    """
    weight = embedding.linear.weight.detach()
    rank = int(torch.linalg.matrix_rank(weight))
    if rank < 2:
        raise SingularEmbeddingError(f"Input embedding has rank {rank}; coordinates cannot be recovered")
    bias = embedding.linear.bias
    bias = torch.zeros(weight.shape[1], dtype=weight.dtype) if bias is None else bias.detach()
    return torch.linalg.pinv(weight), bias


def to_coordinates(features: torch.Tensor, embedding: SkeletonEmbedding) -> torch.Tensor:
    """Least-squares 2-D coordinates whose embedding is closest to `features` (..., D)."""
    pinv, bias = embedding_inverse(embedding)
    return (features.detach() - bias) @ pinv


def reconstruct_person(model: MaeModel, coords: np.ndarray, masked: Tuple[int, ...],
                       topology: GraphTopology) -> Dict[str, np.ndarray]:
    """
    Reconstruct every frame of one person with a fixed masked joint set.

    Args:
        coords: (T, N, 2) prepared coordinates
        masked: masked joint indices shared by all frames

    Returns:
        input, reconstruction (T, N, 2) and cosine (T, |masked|) arrays
    """
    frames = coords.shape[0]
    rows = mask_matrix([masked] * frames, topology.joint_count)
    dtype = model.embedding.linear.weight.dtype
    with torch.no_grad():
        targets, recon = model(torch.as_tensor(coords, dtype=dtype), rows, topology)
        index = list(masked)
        cosine = cosine_similarity(targets[:, index], recon[:, index])
        points = to_coordinates(recon, model.embedding)
    return {
        "input": np.asarray(coords, dtype=np.float64),
        "reconstruction": points.numpy().astype(np.float64),
        "cosine": cosine.clamp(-1.0, 1.0).numpy().astype(np.float64),
    }


def reconstruct_dataset(model: MaeModel, dataset: SkeletonDataset, mask: MaskSpec, out_path,
                        indices: Optional[Iterable[int]] = None) -> int:
    """
    Write per-frame reconstruction records as JSONL.

    One mask is resolved per sequence from a stream seeded by the mask spec; every present
    person of the sequence shares it.

    Returns:
        Number of frame records written
    """
    model.eval()
    layout = dataset.layout
    topology = GraphTopology.from_layout(layout)
    rng = np.random.default_rng(mask.rng_seed)
    indices = range(len(dataset)) if indices is None else indices
    out_path = Path(out_path)
    written = 0
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", encoding="utf-8") as handle:
            for index in indices:
                seq = dataset[int(index)]
                masked = resolve_mask(mask, layout, rng)
                for person, coords in enumerate(seq.persons):
                    if not np.any(coords):
                        continue
                    result = reconstruct_person(model, coords, masked, topology)
                    for frame in range(coords.shape[0]):
                        record = {
                            "sequence": int(index),
                            "person": person,
                            "frame": frame,
                            "label": int(seq.label),
                            "masked": list(masked),
                            "input": result["input"][frame].tolist(),
                            "reconstruction": result["reconstruction"][frame].tolist(),
                            "cosine": result["cosine"][frame].tolist(),
                        }
                        handle.write(json.dumps(record, sort_keys=True) + "\n")
                        written += 1
    except OSError as e:
        raise OutputWriteError(out_path, e) from None
    logger.info(f"Wrote {written} reconstruction records to {out_path}")
    return written


def pooled_features(model: MaeModel, dataset: SkeletonDataset) -> np.ndarray:
    """(S, hidden_dim) encoder features averaged over present persons, frames and joints."""
    model.eval()
    topology = GraphTopology.from_layout(dataset.layout)
    dtype = model.embedding.linear.weight.dtype
    vectors: List[np.ndarray] = []
    with torch.no_grad():
        for seq in dataset:
            present = [p for p in seq.persons if np.any(p)]
            coords = torch.as_tensor(np.stack(present), dtype=dtype)
            hidden = model.encode(coords, topology)
            vectors.append(hidden.mean(dim=(0, 1, 2)).numpy().astype(np.float64))
    return np.stack(vectors)


def embed_dataset(model: MaeModel, dataset: SkeletonDataset, out_path,
                  pca_components: Optional[int] = None) -> List[Dict[str, Any]]:
    """Write one {label, vector[, pca]} JSON line per sequence."""
    vectors = pooled_features(model, dataset)
    projected = None
    if pca_components is not None:
        limit = min(vectors.shape)
        if not 1 <= pca_components <= limit:
            raise ConfigError(f"PCA components must be in 1..{limit}, got {pca_components}")
        projected = PCA(n_components=pca_components, svd_solver="full").fit_transform(vectors)

    records = []
    for i, (label, vector) in enumerate(zip(dataset.labels, vectors)):
        record: Dict[str, Any] = {"sequence": i, "label": int(label), "vector": vector.tolist()}
        if projected is not None:
            record["pca"] = projected[i].tolist()
        records.append(record)

    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with out_path.open("w", encoding="utf-8") as handle:
            for record in records:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
    except OSError as e:
        raise OutputWriteError(out_path, e) from None
    logger.info(f"Wrote {len(records)} embeddings to {out_path}")
    return records
