"""Per-visit conditioning vector for next-visit generation.

The generator is steered by a width-3d concatenation of (1) an LSTM hidden
state accumulated over the visit embeddings seen so far, (2) a sinusoidal
embedding of the model's own predicted gap to the next visit, and (3) a
dense encoding of the static demographics. The interval prediction reads an
urgency signal ``1 - tanh(W h)`` off the hidden state and maps it through a
softplus so the predicted gap is strictly positive.
"""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

from .embedding import TimeGapEncoder

State = tuple[torch.Tensor, torch.Tensor]


class ConditionEncoder(nn.Module):
    """History recurrence, interval estimation, demographics, and assembly.

    ``use_interval=False`` drops the urgency/readout/gap-embedding layers and
    zeroes the middle segment; ``use_demographics=False`` does the same for
    the last segment. The assembled width is always ``3 * dim``.
    """

    def __init__(self, dim: int, demographic_dim: int,
                 use_interval: bool = True, use_demographics: bool = True):
        super().__init__()
        self.dim = dim
        self.use_interval = use_interval
        self.use_demographics = use_demographics
        self.history = nn.LSTMCell(dim, dim)
        if use_interval:
            self.urgency = nn.Linear(dim, dim)
            self.interval_readout = nn.Linear(dim, 1)
            self.interval_embed = TimeGapEncoder(dim)
        if use_demographics:
            self.demographics = nn.Linear(demographic_dim, dim)

    @property
    def condition_dim(self) -> int:
        return 3 * self.dim

    def initial_state(self, *, dtype: torch.dtype | None = None,
                      device: torch.device | str | None = None) -> State:
        ref = self.history.weight_hh
        dtype = dtype or ref.dtype
        device = device or ref.device
        zeros = torch.zeros(self.dim, dtype=dtype, device=device)
        return zeros, zeros.clone()

    def step(self, state: State, visit_vec: torch.Tensor) -> State:
        return self.history(visit_vec, state)

    def predict_interval(self, hidden: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Urgency vector in (0, 2) and a strictly positive predicted gap."""
        if not self.use_interval:
            raise RuntimeError("interval estimation is disabled for this model")
        urgency = 1.0 - torch.tanh(self.urgency(hidden))
        gap = F.softplus(self.interval_readout(urgency)).squeeze(-1)
        return urgency, gap

    def embed_demographics(self, demo: torch.Tensor) -> torch.Tensor:
        if not self.use_demographics:
            raise RuntimeError("demographic encoding is disabled for this model")
        if demo.shape[-1] != self.demographics.in_features:
            raise ValueError(
                f"demographics width {demo.shape[-1]} does not match "
                f"encoder width {self.demographics.in_features}")
        return self.demographics(demo)

    def assemble(self, hidden: torch.Tensor, predicted_gap: torch.Tensor | None,
                 demo: torch.Tensor | None) -> torch.Tensor:
        """Concatenate [hidden; gap embedding; demographic embedding]."""
        if self.use_interval:
            if predicted_gap is None:
                raise ValueError("predicted_gap required when interval estimation is enabled")
            middle = self.interval_embed(predicted_gap.reshape(()))
        else:
            middle = torch.zeros_like(hidden)
        if self.use_demographics:
            if demo is None:
                raise ValueError("demographics required when demographic encoding is enabled")
            last = self.embed_demographics(demo)
        else:
            last = torch.zeros_like(hidden)
        return torch.cat([hidden, middle, last], dim=-1)
