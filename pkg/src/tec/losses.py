"""Training losses: masked feature regression plus attention cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .masking import MaskSpec
from .tensor import Tensor

LOG_EPS = 1e-12


@dataclass(frozen=True)
class LossReport:
    feature: float
    attention: float
    total: float
    lambda_attention: float
    masked_count: int

    def csv_row(self, step: int, lr: float) -> str:
        return (f"{step},{self.feature:.10g},{self.attention:.10g},"
                f"{self.total:.10g},{lr:.10g}")

    @staticmethod
    def csv_header() -> str:
        return "step,l_fea,l_att,total,lr"


def feature_loss(target: np.ndarray, prediction: Tensor, mask: MaskSpec) -> Tensor:
    """Mean squared error over masked patch rows only.

    Unmasked rows never enter the graph, so their gradient is exactly
    zero and perturbing them cannot change the loss.
    """
    if tuple(target.shape) != tuple(prediction.shape):
        raise ShapeError(
            f"target {target.shape} vs prediction {tuple(prediction.shape)}")
    if mask.masked_count == 0:
        raise ParameterError("feature loss needs at least one masked patch")
    masked = mask.masked_index
    diff = prediction.gather_rows(masked) - Tensor(target[masked])
    denom = mask.masked_count * target.shape[1]
    return (diff * diff).sum() / denom


def attention_loss(target: np.ndarray, prediction: Tensor) -> Tensor:
    """Cross-entropy between target rows and predicted rows, averaged over rows."""
    if tuple(target.shape) != tuple(prediction.shape):
        raise ShapeError(
            f"target {target.shape} vs prediction {tuple(prediction.shape)}")
    rows = int(np.prod(target.shape[:-1]))
    ce = -(Tensor(target) * (prediction + LOG_EPS).log()).sum()
    return ce / rows


def total_loss(feature: Tensor, attention: Tensor,
               lambda_attention: float = 1.0) -> Tensor:
    if lambda_attention < 0:
        raise ParameterError(
            f"lambda_attention must be >= 0, got {lambda_attention}")
    return feature + attention * lambda_attention
