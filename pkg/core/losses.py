"""Per-instance Gaussian losses on tensors"""

import math
from dataclasses import dataclass

import torch

LN_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LossWeights:
    """Weights of the squared-error and NLL terms in the training loss"""
    mse: float
    nll: float

    @classmethod
    def from_lambda(cls, lam: float) -> "LossWeights":
        return cls(mse=lam, nll=1.0 - lam)


def gaussian_nll(
    y: torch.Tensor,
    mean: torch.Tensor,
    variance: torch.Tensor,
    include_constant: bool = True,
) -> torch.Tensor:
    """0.5 * ((y - mean)^2 / variance + ln variance [+ ln 2pi]), elementwise"""
    nll = 0.5 * ((y - mean) ** 2 / variance + torch.log(variance))
    if include_constant:
        nll = nll + 0.5 * LN_2PI
    return nll


def interpolated_loss(
    y: torch.Tensor,
    mean: torch.Tensor,
    variance: torch.Tensor,
    weights: LossWeights,
    include_constant: bool = False,
) -> torch.Tensor:
    """mse * (y - mean)^2 + nll * NLL, elementwise"""
    loss = weights.mse * (y - mean) ** 2
    if weights.nll != 0.0:
        loss = loss + weights.nll * gaussian_nll(y, mean, variance, include_constant)
    return loss
