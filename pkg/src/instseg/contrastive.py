"""Contrastive supervision of superpoint features against instance identity.

Superpoints of the same instance should carry similar features; everything
else (different instances, background) should not. The target is a binary
relation matrix from ground truth; the penalty is elementwise BCE between
that target and cosine similarities mapped from [-1, 1] to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError, Tensor, bce, clip, div, matmul, mul, sqrt, sum_, transpose
from .scene import superpoint_instance_assignment

NORM_EPS = 1e-12

# zero-norm feature rows encountered while normalizing, since process start
diagnostics = {"zero_norm_rows": 0}


@dataclass
class RelationPrior:
    """Binary (m, m) target: 1 where two superpoints share an instance."""

    matrix: np.ndarray      # (m, m) float64 of {0, 1}
    assignment: np.ndarray  # (m,) majority instance id, -1 for none

    @property
    def count(self):
        return self.matrix.shape[0]


def relation_prior(scene):
    """Build the pairwise same-instance target from ground truth.

    Background superpoints carry no instance, so they relate to nothing but
    themselves; the diagonal is all ones.
    """
    assignment = superpoint_instance_assignment(scene)
    same = (assignment[:, None] == assignment[None, :]) & (assignment[:, None] >= 0)
    matrix = (same | np.eye(len(assignment), dtype=bool)).astype(np.float64)
    return RelationPrior(matrix=matrix, assignment=assignment)


def cosine_similarity_matrix(features):
    """All-pairs cosine similarity of (m, c) feature rows.

    Rows with vanishing norm are divided by NORM_EPS instead (and counted in
    ``diagnostics['zero_norm_rows']``), keeping the forward pass finite.
    """
    if features.ndim != 2:
        raise ContractError(f"expected (m, c) features, got {features.shape}")
    sq = sum_(mul(features, features), axis=1, keepdims=True)  # (m, 1)
    zero_rows = int((sq.data <= NORM_EPS * NORM_EPS).sum())
    if zero_rows:
        diagnostics["zero_norm_rows"] += zero_rows
    # clamp under the sqrt so degenerate rows cut the gradient instead of
    # producing inf in the sqrt backward
    norm = sqrt(clip(sq, NORM_EPS * NORM_EPS, np.inf))
    unit = div(features, norm)
    return matmul(unit, transpose(unit))


def contrastive_loss(similarity, prior):
    """Mean BCE over all m^2 pairs between (S+1)/2 and the binary target."""
    m = prior.count
    if similarity.shape != (m, m):
        raise ContractError(f"similarity {similarity.shape} vs prior ({m}, {m})")
    probs = mul(similarity + 1.0, 0.5)
    return bce(probs, Tensor(prior.matrix))


def contrastive_from_features(features, prior):
    """Convenience wrapper: loss straight from (m, c) features."""
    return contrastive_loss(cosine_similarity_matrix(features), prior)
