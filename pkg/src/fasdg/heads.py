"""Score regressor, domain discriminator, and the training losses.

Both heads are two-layer MLPs (feature -> hidden -> out) with gelu. The
regressor emits one logit per liveness grid point; its softmax expectation
over the grid is the liveness score, so the score is always a convex
combination of grid values in [0, 1]. The discriminator sits behind a
gradient reversal layer: its own parameters receive the ordinary minimizing
cross-entropy gradient while the feature extractor upstream receives the
negated gradient, scaled by lambda.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from fasdg import ops
from fasdg.errors import ConfigError, ShapeError
from fasdg.tensor import Tensor


@dataclass
class MlpHeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named_parameters(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


def build_head(
    d_in: int, hidden: int, d_out: int, rng: np.random.Generator, dtype=np.float32
) -> MlpHeadParams:
    s1, s2 = 1.0 / math.sqrt(d_in), 1.0 / math.sqrt(hidden)
    return MlpHeadParams(
        w1=Tensor((rng.standard_normal((d_in, hidden)) * s1).astype(dtype), requires_grad=True),
        b1=Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
        w2=Tensor((rng.standard_normal((hidden, d_out)) * s2).astype(dtype), requires_grad=True),
        b2=Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True),
    )


def head_forward(features: Tensor, head: MlpHeadParams) -> Tensor:
    """(B, d) features -> (B, out) logits."""
    h = ops.gelu(ops.add(ops.matmul(features, head.w1), head.b1))
    return ops.add(ops.matmul(h, head.w2), head.b2)


def label_grid(k: int, dtype=np.float32) -> np.ndarray:
    """The liveness grid {0, 1/K, ..., 1} with K+1 points."""
    if k < 2:
        raise ConfigError(f"grid constant K must be >= 2, got {k}")
    return (np.arange(k + 1) / k).astype(dtype)


def liveness_score(
    features: Tensor, reg: MlpHeadParams, grid: np.ndarray
) -> tuple[Tensor, Tensor]:
    """Grid probabilities and expected liveness score.

    Returns (p, score) with p of shape (B, K+1) and score of shape (B, 1);
    score[i] = sum_k grid[k] * p[i, k].
    """
    single = features.data.ndim == 1
    if single:
        features = ops.reshape(features, (1, features.size))
    logits = head_forward(features, reg)
    if logits.shape[1] != grid.shape[0]:
        raise ShapeError(
            f"regressor emits {logits.shape[1]} logits but grid has {grid.shape[0]} points"
        )
    p = ops.softmax_rows(logits)
    score = ops.matmul(p, Tensor(grid.reshape(-1, 1).astype(features.dtype, copy=False)))
    return p, score


def regression_loss(scores: Tensor, labels: Tensor, reduction: str = "mean") -> Tensor:
    """Squared error between predicted scores and discretized labels."""
    return ops.mse(scores, labels, reduction=reduction)


def bce_loss(scores: Tensor, labels: Tensor, eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy on the expected score; ablation mode only."""
    if scores.shape != labels.shape:
        raise ShapeError(f"bce_loss: scores {scores.shape} vs labels {labels.shape}")
    n = scores.size
    pos = ops.log(ops.add_scalar(scores, eps))
    neg = ops.log(ops.add_scalar(ops.scale(scores, -1.0), 1.0 + eps))
    y = labels
    one_minus_y = ops.add_scalar(ops.scale(y, -1.0), 1.0)
    ll = ops.add(ops.multiply(y, pos), ops.multiply(one_minus_y, neg))
    total = ops.mean_axis(ops.reshape(ll, (n,)), 0)
    return ops.reshape(ops.scale(total, -1.0), ())


def adversarial_loss(
    features: Tensor, disc: MlpHeadParams, domain_labels, lambda_grl: float
) -> Tensor:
    """Domain cross-entropy behind the gradient reversal layer.

    The discriminator minimizes this loss; because the features pass through
    grad_reverse first, the extractor's parameters are driven to maximize it.
    """
    y = np.asarray(domain_labels)
    n_domains = disc.out_dim
    if y.size and (y.min() < 0 or y.max() >= n_domains):
        raise ConfigError(
            f"domain label out of range: max {int(y.max())} for {n_domains} domains"
        )
    reversed_feats = ops.grad_reverse(features, lambda_grl)
    logits = head_forward(reversed_feats, disc)
    return ops.cross_entropy_logits(logits, y)


def final_loss(l_reg: Tensor, l_adv: Tensor, adv_weight: float = 1.0) -> Tensor:
    """Total training objective: regression loss plus (weighted) adversarial loss."""
    if adv_weight == 1.0:
        return ops.add(l_reg, l_adv)
    return ops.add(l_reg, ops.scale(l_adv, adv_weight))


def grl_lambda(schedule: str, base: float, progress: float) -> float:
    """Reversal strength at training progress t in [0, 1]."""
    if schedule == "constant":
        return base
    if schedule == "ramp":
        t = min(max(progress, 0.0), 1.0)
        return base * (2.0 / (1.0 + math.exp(-10.0 * t)) - 1.0)
    raise ConfigError(f"unknown grl schedule {schedule!r}")
