"""Prediction head and training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
from torch import nn

PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 0.75
    gamma: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be >= 0")


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 0.5
    codes: float = 1000.0
    interval: float = 0.01

    def __post_init__(self):
        if min(self.reconstruction, self.codes, self.interval) < 0.0:
            raise ValueError("loss weights must be non-negative")


class CodePredictionHead(nn.Module):
    """Per-modality linear + sigmoid map from the predicted visit vector to
    code probabilities."""

    def __init__(self, dim: int, modality_sizes: Mapping[str, int]):
        super().__init__()
        self.layers = nn.ModuleDict(
            {name: nn.Linear(dim, size) for name, size in modality_sizes.items()})

    def forward(self, visit_vec: torch.Tensor) -> dict[str, torch.Tensor]:
        return {name: torch.sigmoid(layer(visit_vec)) for name, layer in self.layers.items()}


def focal_loss(predictions: Mapping[str, torch.Tensor], targets: Mapping[str, torch.Tensor],
               params: FocalParams) -> torch.Tensor:
    """Class-balanced focal loss averaged over modalities and over all code
    slots (present and absent) within each modality.

    Reduces only the code axis, so batched ``(batch, codes)`` inputs yield a
    per-example loss vector.
    """
    terms = []
    for name, pred in predictions.items():
        target = targets[name]
        p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
        pos = params.alpha * (1.0 - p) ** params.gamma * torch.log(p)
        neg = (1.0 - params.alpha) * p ** params.gamma * torch.log(1.0 - p)
        terms.append(-(target * pos + (1.0 - target) * neg).mean(dim=-1))
    return torch.stack(terms).mean(dim=0)


def reconstruction_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Squared error normalized by width."""
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return ((predicted - target) ** 2).mean(dim=-1)


def interval_loss(gap: torch.Tensor, predicted_gap: torch.Tensor) -> torch.Tensor:
    return (gap - predicted_gap) ** 2


def total_loss(reconstruction: Sequence[torch.Tensor], codes: Sequence[torch.Tensor],
               interval: Sequence[torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Weighted per-transition sum, averaged over a patient's transitions."""
    if not (len(reconstruction) == len(codes) == len(interval)) or not reconstruction:
        raise ValueError("need matched non-empty per-transition loss lists")
    per_transition = [
        weights.reconstruction * r + weights.codes * c + weights.interval * t
        for r, c, t in zip(reconstruction, codes, interval)
    ]
    return torch.stack(per_transition).mean()
